"""Synthetic stand-in data: procedural skin patches and face geometry.

Patch labels are an affine function of the amplitude of a band-limited
texture, so a model can only predict them by reading the texture.  Label
values follow a many/medium/few-shot histogram set by the config, and vary
by facial region.  Bilateral partners get nearly equal labels.

Geometry (68 landmarks and 37 anchors) is a fixed template moved by a random
similarity transform.  Patches and geometry are generated independently; a
dataset record is a mosaic of patches with the anchors at the cell centres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment
from .datamodel import (
    N_POSITIONS,
    PATCH_RADIUS,
    Angle,
    AnchorSet,
    Dataset,
    FacialImage,
    LandmarkSet,
    Lighting,
    Measurement,
    MetricKind,
    Modality,
    Record,
    SkinPatch,
    build_symmetry_table,
)

LABEL_DOMAIN = {MetricKind.TEWL: (0.0, 30.0), MetricKind.SH: (0.0, 90.0)}

# nominal relative bin heights per shot group; ratios sit well inside the
# many >= 1/2, 1/4 <= medium < 1/2, few < 1/4 bands
_NOMINAL_HEIGHT = {"many": 0.8, "medium": 0.36, "few": 0.1}
_RATIO_MARGIN = 0.03


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_panelists: int = 16
    patch_side: int = 140
    texture_band: tuple[int, int] = (8, 12)
    kind: MetricKind = MetricKind.TEWL
    label_range: tuple[float, float] = (2.0, 28.0)
    imbalance: tuple[float, float, float] = (0.7, 0.2, 0.1)
    noise_sigma: float = 3.0
    texture_rms: float = 14.0
    shading_amp: float = 10.0
    pair_jitter: float = 0.5
    bin_width: float = 1.0
    region_strength: float = 1.0
    modality: Modality = Modality.SELFIE
    lightings: tuple[str, ...] = ("natural", "white", "yellow")
    n_waves: int = 24

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "texture_band", tuple(int(v) for v in self.texture_band))
        object.__setattr__(self, "label_range", tuple(float(v) for v in self.label_range))
        object.__setattr__(self, "imbalance", tuple(float(v) for v in self.imbalance))
        object.__setattr__(self, "lightings", tuple(Lighting(t).value for t in self.lightings))
        lo, hi = self.texture_band
        if not 0 < lo < hi:
            raise ValueError(f"texture_band needs 0 < freq_lo < freq_hi, got {self.texture_band}")
        if hi >= self.patch_side // 2:
            raise ValueError("texture_band reaches the Nyquist limit of the patch")
        a, b = self.label_range
        dlo, dhi = LABEL_DOMAIN[self.kind]
        if not dlo <= a < b <= dhi:
            raise ValueError(f"label_range {self.label_range} outside the {self.kind.value} domain {(dlo, dhi)}")
        if len(self.imbalance) != 3 or min(self.imbalance) < 0 or not math.isclose(sum(self.imbalance), 1.0, abs_tol=1e-6):
            raise ValueError(f"imbalance must be three nonnegative fractions summing to 1, got {self.imbalance}")
        if self.n_panelists < 1:
            raise ValueError("n_panelists must be >= 1")
        if self.modality == Modality.SELFIE and self.patch_side != 2 * PATCH_RADIUS[Modality.SELFIE]:
            # patch side follows the crop radius of the device
            raise ValueError(f"selfie patches are {2 * PATCH_RADIUS[Modality.SELFIE]}px")
        if self.modality == Modality.VISIA and self.patch_side != 2 * PATCH_RADIUS[Modality.VISIA]:
            raise ValueError(f"visia patches are {2 * PATCH_RADIUS[Modality.VISIA]}px")

    def label_map(self, a):
        lo, hi = self.label_range
        return lo + np.asarray(a, dtype=float) * (hi - lo)

    def amplitude_of(self, label):
        lo, hi = self.label_range
        return (np.asarray(label, dtype=float) - lo) / (hi - lo)

    def with_(self, **kw) -> "SynthConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# face geometry
# ---------------------------------------------------------------------------


def _template_landmarks() -> np.ndarray:
    """Canonical 68-point face in (row, col), face centre at the origin."""
    pts = []
    # jaw 0..16, ear to ear through the chin
    for j in range(17):
        phi = math.pi * (1 - j / 16)
        pts.append((-40 + 300 * math.sin(phi), 250 * math.cos(phi)))
    # brows 17..21 (left), 22..26 (right)
    for side in (-1, 1):
        cols = np.linspace(190, 40, 5) if side < 0 else np.linspace(40, 190, 5)
        for k, c in enumerate(cols):
            t = k / 4
            pts.append((-150 - 22 * math.sin(math.pi * t), side * c))
    # nose bridge 27..30, nose base 31..35
    for r in (-110, -75, -40, -5):
        pts.append((r, 0.0))
    for c, r in zip((-40, -20, 0, 20, 40), (30, 38, 42, 38, 30)):
        pts.append((r, c))
    # eyes 36..41 (left), 42..47 (right), starting at the outer/inner corner
    for cx in (-110, 110):
        for k in range(6):
            ang = math.radians(180 - 60 * k)
            pts.append((-95 - 14 * math.sin(ang), cx + 40 * math.cos(ang)))
    # mouth: 12 outer, 8 inner
    for k in range(12):
        ang = math.pi - 2 * math.pi * k / 12
        pts.append((130 - 30 * math.sin(ang), 70 * math.cos(ang)))
    for k in range(8):
        ang = math.pi - 2 * math.pi * k / 8
        pts.append((130 - 12 * math.sin(ang), 45 * math.cos(ang)))
    arr = np.array(pts, dtype=float)
    assert arr.shape == (68, 2)
    return arr


# left-side anchor positions (row, col); right side mirrors through the symmetry table
_LEFT_ANCHORS = {
    2: (-200, -115), 3: (-175, -200), 4: (-55, -55), 5: (-55, -110), 6: (-60, -175),
    7: (-95, -215), 36: (-118, -110),
    8: (10, -55), 9: (10, -120), 10: (10, -180),
    11: (5, -230), 12: (65, -215), 16: (125, -190),
    13: (80, -60), 14: (80, -120), 15: (85, -175),
    17: (190, -90), 18: (175, -165),
}


def _template_anchors() -> np.ndarray:
    table = build_symmetry_table()
    out = np.zeros((N_POSITIONS, 2))
    out[0] = (-125, 0)
    for d, (r, c) in _LEFT_ANCHORS.items():
        out[d - 1] = (r, c)
        out[table.partner(d) - 1] = (r, -c)
    return out


TEMPLATE_LANDMARKS = _template_landmarks()
TEMPLATE_ANCHORS = _template_anchors()

# default canvas: a portrait selfie frame
IMAGE_SHAPE = (1000, 800)


def similarity(points: np.ndarray, rotation_deg: float, scale: float, translation) -> np.ndarray:
    th = math.radians(rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return scale * points @ rot.T + np.asarray(translation, dtype=float)


def _disc_jitter(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    if radius <= 0:
        return np.zeros((n, 2))
    r = radius * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def gen_landmark_template(
    rng: np.random.Generator,
    rotation: float | None = None,
    scale: float | None = None,
    translation=None,
    jitter: float = 2.0,
    max_rotation: float = 15.0,
    scale_range: tuple[float, float] = (0.8, 1.25),
    max_shift: float = 60.0,
) -> tuple[LandmarkSet, AnchorSet]:
    """Template landmarks and anchors under one random similarity transform.

    Any of ``rotation`` (degrees), ``scale`` or ``translation`` may be pinned;
    the rest are drawn from ``rng``.  Each point also moves by a uniform draw
    from a disc of radius ``jitter`` pixels.
    """
    if rotation is None:
        rotation = rng.uniform(-max_rotation, max_rotation)
    if scale is None:
        scale = math.exp(rng.uniform(math.log(scale_range[0]), math.log(scale_range[1])))
    if translation is None:
        centre = np.array(IMAGE_SHAPE, dtype=float) / 2
        translation = centre + rng.uniform(-max_shift, max_shift, size=2)
    lm = similarity(TEMPLATE_LANDMARKS, rotation, scale, translation) + _disc_jitter(rng, 68, jitter)
    an = similarity(TEMPLATE_ANCHORS, rotation, scale, translation) + _disc_jitter(rng, N_POSITIONS, jitter)
    return LandmarkSet(lm), AnchorSet.from_array(an)


def gen_geometry_pairs(rng: np.random.Generator, n: int, **kw) -> list[tuple[LandmarkSet, AnchorSet]]:
    return [gen_landmark_template(rng, **kw) for _ in range(n)]


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

# per-tag fixed lighting blends, applied in order
LIGHTING_BLENDS: dict[str, tuple[tuple[str, float], ...]] = {
    "natural": (),
    "white": (("brightness", 1.15),),
    "yellow": (("saturation", 1.4), ("brightness", 0.88)),
    "standard2": (("contrast", 1.1),),
    "crosspolar": (("sharpness", 0.6),),
}


def apply_lighting_tag(x: np.ndarray, tag: str) -> np.ndarray:
    for kind, m in LIGHTING_BLENDS[Lighting(tag).value]:
        x = augment.LightingOp(kind, m).apply(x)
    return x


def _waves(n: int, freqs, weights, phases) -> np.ndarray:
    """Sum of ``w * cos(2 pi (fy*y + fx*x)/n + phase)`` via one inverse FFT (exact on integer bins)."""
    spec = np.zeros((n, n), dtype=complex)
    for (fy, fx), w, ph in zip(freqs, weights, phases):
        spec[fy % n, fx % n] += w * np.exp(1j * ph)
    return np.fft.ifft2(spec).real * (n * n)


def _band_waves(rng: np.random.Generator, n: int, band: tuple[int, int], count: int) -> np.ndarray:
    """Unit-RMS sum of integer-frequency waves whose max(|fy|, |fx|) lies in ``band``."""
    lo, hi = band
    freqs, weights, phases = [], [], []
    for _ in range(count):
        cheb = int(rng.integers(lo, hi + 1))
        other = int(rng.integers(-cheb, cheb + 1))
        freqs.append((cheb, other) if rng.uniform() < 0.5 else (other, cheb))
        weights.append(rng.uniform(0.5, 1.0))
        phases.append(rng.uniform(0, 2 * math.pi))
    out = _waves(n, freqs, weights, phases)
    return out / np.sqrt(np.mean(out**2))


def _shading(rng: np.random.Generator, n: int, amp: float) -> np.ndarray:
    # periodic, at most 2 cycles per patch: strictly below any texture band
    freqs = ((1, 0), (0, 1), (1, 1), (2, 1))
    weights = rng.uniform(0, 1, size=4)
    phases = rng.uniform(0, 2 * math.pi, size=4)
    return amp * _waves(n, freqs, weights, phases) / 4


def _skin_tone(rng: np.random.Generator) -> np.ndarray:
    return np.array([200.0, 158.0, 135.0]) + rng.uniform(-18, 18) + rng.uniform(-6, 6, size=3)


def gen_patch(
    rng: np.random.Generator,
    amplitude: float,
    cfg: SynthConfig,
    position_id: int = 1,
    panelist_id: str = "p000",
    lighting: str = "natural",
    angle: str = "front",
    tone: np.ndarray | None = None,
) -> SkinPatch:
    """Skin-toned patch whose in-band texture RMS is ``amplitude * cfg.texture_rms``."""
    if not 0.0 <= amplitude <= 1.0:
        raise ValueError(f"amplitude must lie in [0, 1], got {amplitude}")
    n = cfg.patch_side
    tone = _skin_tone(rng) if tone is None else np.asarray(tone, dtype=float)
    texture = amplitude * cfg.texture_rms * _band_waves(rng, n, cfg.texture_band, cfg.n_waves)
    shade = _shading(rng, n, cfg.shading_amp)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(n, n, 3)) if cfg.noise_sigma > 0 else 0.0
    img = tone[None, None, :] + (texture + shade)[..., None] + noise
    pixels = np.rint(np.clip(img, 0, 255)).astype(np.uint8)
    pixels = apply_lighting_tag(pixels, lighting)
    label = Measurement(cfg.kind, float(cfg.label_map(amplitude)))
    return SkinPatch(pixels, position_id, label, panelist_id, lighting, angle)


# ---------------------------------------------------------------------------
# label field and imbalance
# ---------------------------------------------------------------------------

# qualitative region effects (positive = higher value)
_TEWL_REGION = {
    36: 1.5, 4: 0.8, 8: 0.8, 13: 0.5, 5: 0.4, 6: 0.3, 7: 0.3,
    1: 0.0, 2: -0.1, 3: 0.0, 9: -0.3, 10: -0.3, 14: -0.3, 15: -0.4,
    11: -1.0, 12: -1.0, 16: -0.9, 17: 0.2, 18: -0.5,
}
_SH_REGION = {
    36: -1.2, 4: -0.6, 5: -0.9, 6: -0.8, 7: -0.7,
    1: -0.2, 2: 0.1, 3: -0.1, 8: 0.0, 9: 0.3, 10: 0.4,
    11: 0.8, 12: 0.9, 16: 0.8, 13: 0.2, 14: 0.5, 15: 0.6, 17: 0.3, 18: 0.6,
}


def region_effect(kind: MetricKind) -> np.ndarray:
    """Per-position effect, indexed by position id - 1."""
    table = build_symmetry_table()
    src = _TEWL_REGION if MetricKind(kind) == MetricKind.TEWL else _SH_REGION
    out = np.zeros(N_POSITIONS)
    for d, v in src.items():
        out[d - 1] = v
        if table.partner(d):
            out[table.partner(d) - 1] = v
    return out


@dataclass(frozen=True)
class TargetHistogram:
    edges: np.ndarray
    probs: np.ndarray
    groups: tuple[str, ...]

    def inverse_cdf(self, q) -> np.ndarray:
        cdf = np.concatenate([[0.0], np.cumsum(self.probs)])
        return np.interp(np.asarray(q, dtype=float), cdf, self.edges)


def target_histogram(cfg: SynthConfig) -> TargetHistogram:
    """Peaked histogram over the label range whose shot groups carry ``cfg.imbalance`` mass."""
    lo, hi = cfg.label_range
    bw = cfg.bin_width
    first = math.floor(lo / bw + 1e-9)
    last = math.ceil(hi / bw - 1e-9)
    n_bins = last - first
    edges = np.arange(first, last + 1) * bw
    edges[0], edges[-1] = max(edges[0], lo), min(edges[-1], hi)
    fm, fmed, ffew = cfg.imbalance
    fr = {"many": fm, "medium": fmed, "few": ffew}
    k = n_bins / sum(f / _NOMINAL_HEIGHT[g] for g, f in fr.items())
    counts = {g: (max(1, round(f / _NOMINAL_HEIGHT[g] * k)) if f > 0 else 0) for g, f in fr.items()}
    while sum(counts.values()) != n_bins:
        g = max((g for g in counts if counts[g] > 0), key=lambda g: counts[g])
        counts[g] += 1 if sum(counts.values()) < n_bins else -1
        if counts[g] == 0:
            raise ValueError(f"infeasible imbalance {cfg.imbalance} for {n_bins} bins")
    if counts["many"] == 0:
        raise ValueError("imbalance needs a nonzero many-shot fraction")
    height = {g: (fr[g] / counts[g] if counts[g] else 0.0) for g in fr}
    ratio_med = height["medium"] / height["many"]
    ratio_few = height["few"] / height["many"]
    if counts["medium"] and not (0.25 + _RATIO_MARGIN <= ratio_med <= 0.5 - _RATIO_MARGIN):
        raise ValueError(f"infeasible imbalance {cfg.imbalance}: medium/many bin ratio {ratio_med:.3f}")
    if counts["few"] and not ratio_few <= 0.25 - _RATIO_MARGIN:
        raise ValueError(f"infeasible imbalance {cfg.imbalance}: few/many bin ratio {ratio_few:.3f}")
    # low tail, medium shoulder, many block, medium shoulder, long high tail
    few_lo = counts["few"] // 3
    med_lo = counts["medium"] // 2
    layout = (
        ["few"] * few_lo
        + ["medium"] * med_lo
        + ["many"] * counts["many"]
        + ["medium"] * (counts["medium"] - med_lo)
        + ["few"] * (counts["few"] - few_lo)
    )
    widths = np.diff(edges) / bw
    probs = np.array([height[g] for g in layout]) * widths
    probs = probs / probs.sum()
    return TargetHistogram(edges, probs, tuple(layout))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

_FRONT_PAIRS = ((2, 19), (3, 20), (4, 21), (5, 22), (36, 37), (8, 26), (9, 27), (13, 30), (17, 34))


def visible_positions(angle: Angle | str) -> list[int]:
    """The 19 anchors visible from one camera angle."""
    angle = Angle(angle)
    if angle == Angle.LEFT:
        return [1] + list(range(2, 19)) + [36]
    if angle == Angle.RIGHT:
        return [1] + list(range(19, 36)) + [37]
    return sorted({1} | {d for pair in _FRONT_PAIRS for d in pair})


ANGLES = (Angle.LEFT, Angle.FRONT, Angle.RIGHT)
MOSAIC_COLS = 5


def _panelist_id(p: int) -> str:
    return f"p{p:03d}"


def _mosaic(patches: list[np.ndarray], side: int) -> tuple[np.ndarray, list[tuple[float, float]]]:
    rows = math.ceil(len(patches) / MOSAIC_COLS)
    canvas = np.zeros((rows * side, MOSAIC_COLS * side, 3), dtype=np.uint8)
    centres = []
    for k, px in enumerate(patches):
        i, j = divmod(k, MOSAIC_COLS)
        canvas[i * side : (i + 1) * side, j * side : (j + 1) * side] = px
        centres.append((i * side + side / 2, j * side + side / 2))
    return canvas, centres


def assign_labels(cfg: SynthConfig) -> dict[tuple[int, int], float]:
    """Label per (panelist index, position id), drawn by stratified inverse-CDF sampling."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1AB]))
    table = build_symmetry_table()
    hist = target_histogram(cfg)
    effect = region_effect(cfg.kind) * cfg.region_strength
    # how many patches each position contributes per panelist (one per visible angle)
    views = np.zeros(N_POSITIONS + 1)
    for ang in ANGLES:
        for d in visible_positions(ang):
            views[d] += 1
    groups = [(1,)] + [tuple(p) for p in table.unordered_pairs()]
    units, scores, weights = [], [], []
    for p in range(cfg.n_panelists):
        offset = rng.normal(0, 0.5)
        for g in groups:
            units.append((p, g))
            scores.append(effect[g[0] - 1] + offset + rng.normal(0, 0.7))
            weights.append(sum(views[d] for d in g))
    order = np.argsort(np.asarray(scores), kind="stable")
    w = np.asarray(weights, dtype=float)[order]
    q = (np.cumsum(w) - w / 2) / w.sum()
    base = hist.inverse_cdf(q)
    lo, hi = cfg.label_range
    # keep jittered labels below ``hi`` so they stay in the last histogram bin
    top = hi - 1e-6 * (hi - lo)
    labels: dict[tuple[int, int], float] = {}
    for idx, value in zip(order, base):
        p, g = units[idx]
        if len(g) == 1:
            labels[(p, g[0])] = float(value)
        else:
            delta = rng.uniform(-cfg.pair_jitter / 2, cfg.pair_jitter / 2)
            labels[(p, g[0])] = float(np.clip(value + delta, lo, top))
            labels[(p, g[1])] = float(np.clip(value - delta, lo, top))
    return labels


def gen_dataset(cfg: SynthConfig | None = None) -> Dataset:
    cfg = cfg or SynthConfig()
    target_histogram(cfg)  # validates the imbalance spec up front
    labels = assign_labels(cfg)
    records = []
    for p in range(cfg.n_panelists):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, p]))
        tone = _skin_tone(rng)
        pid = _panelist_id(p)
        for a_idx, angle in enumerate(ANGLES):
            lighting = cfg.lightings[(p + a_idx) % len(cfg.lightings)]
            ids = visible_positions(angle)
            patches = []
            for d in ids:
                amp = float(np.clip(cfg.amplitude_of(labels[(p, d)]), 0.0, 1.0))
                patches.append(gen_patch(rng, amp, cfg, d, pid, lighting, angle.value, tone=tone).pixels)
            canvas, centres = _mosaic(patches, cfg.patch_side)
            image = FacialImage(canvas, cfg.modality, lighting, angle, pid)
            anchors = AnchorSet(dict(zip(ids, centres)))
            lab = {d: Measurement(cfg.kind, labels[(p, d)]) for d in ids}
            records.append(Record(image, anchors, lab))
    return Dataset(records)
