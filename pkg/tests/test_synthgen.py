import numpy as np
import pytest
from scipy.stats import spearmanr

from skinpavit.datamodel import build_symmetry_table
from skinpavit.evalmetrics import partition_shots
from skinpavit.spectral import band_energy, bandpass_mask
from skinpavit.synthgen import (
    TEMPLATE_ANCHORS,
    TEMPLATE_LANDMARKS,
    SynthConfig,
    assign_labels,
    gen_dataset,
    gen_landmark_template,
    gen_patch,
    target_histogram,
    visible_positions,
)


def procrustes_fit(src, dst):
    """Least-squares similarity transform mapping src onto dst (Umeyama)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    u, s, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1, d]) @ vt
    scale = (s * [1, d]).sum() / (a**2).sum()
    return lambda p: scale * (p - mu_s) @ rot.T + mu_d


def test_identity_template_exact():
    lm, an = gen_landmark_template(np.random.default_rng(0), rotation=0, scale=1, translation=(0, 0), jitter=0)
    np.testing.assert_array_equal(lm.points, TEMPLATE_LANDMARKS)
    np.testing.assert_array_equal(an.to_array(), TEMPLATE_ANCHORS)


def test_translation_equivariance():
    base = gen_landmark_template(np.random.default_rng(0), rotation=5, scale=1.1, translation=(0, 0), jitter=0)
    moved = gen_landmark_template(np.random.default_rng(0), rotation=5, scale=1.1, translation=(40, -7), jitter=0)
    np.testing.assert_allclose(moved[1].to_array() - base[1].to_array(), np.tile([40, -7], (37, 1)), atol=1e-9)


def test_anchors_recoverable_from_landmarks():
    rng = np.random.default_rng(42)
    jitter = 2.0
    for _ in range(5):
        lm, an = gen_landmark_template(rng, jitter=jitter)
        fit = procrustes_fit(TEMPLATE_LANDMARKS, lm.points)
        resid = np.linalg.norm(fit(TEMPLATE_ANCHORS) - an.to_array(), axis=1)
        # anchor jitter plus the fitting error from landmark jitter
        assert resid.max() < 2.5 * jitter


def test_template_anchor_symmetry():
    table = build_symmetry_table()
    for d, e in table.unordered_pairs():
        a, b = TEMPLATE_ANCHORS[d - 1], TEMPLATE_ANCHORS[e - 1]
        assert a[0] == pytest.approx(b[0])
        assert a[1] == pytest.approx(-b[1])
    assert TEMPLATE_ANCHORS[0][1] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(texture_band=(12, 8))
    with pytest.raises(ValueError):
        SynthConfig(label_range=(0, 40))
    with pytest.raises(ValueError):
        SynthConfig(kind="SH", label_range=(0, 95))
    with pytest.raises(ValueError):
        SynthConfig(imbalance=(0.5, 0.2, 0.2))


def test_infeasible_imbalance():
    with pytest.raises(ValueError):
        target_histogram(SynthConfig(imbalance=(0.1, 0.1, 0.8)))


def test_zero_amplitude_has_no_band_energy():
    cfg = SynthConfig(noise_sigma=0.0, shading_amp=0.0)
    p = gen_patch(np.random.default_rng(0), 0.0, cfg)
    mask = bandpass_mask(w=140, h=140)
    assert band_energy(p.pixels.astype(float), mask) < 1e-3
    assert p.label.value == cfg.label_range[0]


def test_band_energy_ordered_by_amplitude():
    cfg = SynthConfig()
    mask = bandpass_mask(w=140, h=140)
    rng = np.random.default_rng(3)
    energies = [band_energy(gen_patch(rng, a, cfg).pixels.astype(float), mask) for a in (0.0, 0.2, 0.5, 0.8, 1.0)]
    assert all(x < y for x, y in zip(energies, energies[1:]))


def test_texture_lives_inside_model_band():
    # without noise or shading all spectral energy (except DC) is inside the band-pass window
    cfg = SynthConfig(noise_sigma=0.0, shading_amp=0.0)
    x = gen_patch(np.random.default_rng(5), 1.0, cfg).pixels.astype(float)
    x = x - x.mean(axis=(0, 1))
    total = band_energy(x, np.ones((140, 140)))
    inside = band_energy(x, bandpass_mask(w=140, h=140))
    assert inside / total > 0.97  # the remainder is rounding to uint8


def test_monotone_link_over_500_patches():
    cfg = SynthConfig()
    rng = np.random.default_rng(11)
    mask = bandpass_mask(w=140, h=140)
    amps = rng.uniform(0, 1, 500)
    tags = ["natural", "white", "yellow"]
    e, y = [], []
    for i, a in enumerate(amps):
        p = gen_patch(rng, float(a), cfg, lighting=tags[i % 3])
        e.append(band_energy(p.pixels.astype(float), mask))
        y.append(p.label.value)
    assert spearmanr(e, y).statistic >= 0.9


def test_visible_positions():
    for angle in ("left", "front", "right"):
        ids = visible_positions(angle)
        assert len(ids) == 19 and 1 in ids
    assert set(visible_positions("left")) | set(visible_positions("right")) == set(range(1, 38))


def test_determinism(small_cfg, small_ds):
    assert gen_dataset(small_cfg) == small_ds


def test_symmetric_labels_within_jitter():
    cfg = SynthConfig(n_panelists=6)
    labels = assign_labels(cfg)
    for p in range(6):
        for d, e in build_symmetry_table().unordered_pairs():
            assert abs(labels[(p, d)] - labels[(p, e)]) <= cfg.pair_jitter + 1e-12


def test_symmetric_difference_smaller_than_unpaired():
    cfg = SynthConfig()
    labels = assign_labels(cfg)
    rng = np.random.default_rng(0)
    pairs = build_symmetry_table().unordered_pairs()
    sym = [abs(labels[(p, d)] - labels[(p, e)]) for p in range(cfg.n_panelists) for d, e in pairs]
    keys = list(labels)
    rand = []
    for _ in range(2000):
        i, j = rng.choice(len(keys), 2, replace=False)
        rand.append(abs(labels[keys[i]] - labels[keys[j]]))
    assert np.median(sym) < np.median(rand)


def test_group_masses_match_imbalance():
    cfg = SynthConfig()
    ds = gen_dataset(cfg.with_(n_panelists=16))
    y = ds.labels(cfg.kind)
    hist = target_histogram(cfg)
    groups = np.asarray(hist.groups)[np.clip(np.searchsorted(hist.edges, y, side="right") - 1, 0, len(hist.groups) - 1)]
    for g, target in zip(("many", "medium", "few"), cfg.imbalance):
        assert abs(np.mean(groups == g) - target) <= 0.05


def test_uniform_imbalance_is_all_many_shot():
    cfg = SynthConfig(imbalance=(1.0, 0.0, 0.0), n_panelists=8)
    part = partition_shots(gen_dataset(cfg).labels(cfg.kind))
    assert set(part.groups) == {"many"}


def test_region_field_visible_in_means():
    # eyelid positions carry higher TEWL on average than cheeks
    from skinpavit.synthgen import region_effect
    from skinpavit.datamodel import MetricKind

    eff = region_effect(MetricKind.TEWL)
    assert eff.shape == (37,)
    assert eff.max() > eff.min()
