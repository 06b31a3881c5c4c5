import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skinpavit.spectral import (
    RHO_HIGH,
    RHO_LOW,
    band_energy,
    bandpass_mask,
    extract_texture,
    forward_spectrum,
    highpass_mask,
    inverse_spectrum,
    lowpass_mask,
    make_mask,
    render_texture,
)


def naive_centered_dft(x):
    """O(n^4) DFT with the DC term placed at (h // 2, w // 2)."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    ys, xs = np.mgrid[0:h, 0:w]
    for u in range(h):
        for v in range(w):
            fu, fv = u - h // 2, v - w // 2
            out[u, v] = np.sum(x * np.exp(-2j * math.pi * (fu * ys / h + fv * xs / w)))
    return out


def test_forward_matches_naive_dft():
    x = np.random.default_rng(0).normal(size=(6, 7))
    np.testing.assert_allclose(forward_spectrum(x), naive_centered_dft(x), atol=1e-9)


def test_inverse_roundtrip():
    x = np.random.default_rng(1).normal(size=(9, 8, 3))
    np.testing.assert_allclose(inverse_spectrum(forward_spectrum(x)).real, x, atol=1e-12)


def test_nonfinite_rejected():
    x = np.zeros((4, 4))
    x[1, 1] = np.nan
    with pytest.raises(ValueError):
        forward_spectrum(x)


def mask_oracle(rho, w, h):
    """Count-based reconstruction: the window holds every index within sqrt(rho) * n / 2 of n // 2."""
    m = np.zeros((h, w), dtype=np.uint8)
    half_h, half_w = math.sqrt(rho) * h / 2, math.sqrt(rho) * w / 2
    for i in range(h):
        for j in range(w):
            if abs(i - h // 2) <= half_h + 1e-9 and abs(j - w // 2) <= half_w + 1e-9:
                m[i, j] = 1
    return m


@pytest.mark.parametrize("rho,w,h", [(0.0576, 224, 224), (0.0036, 224, 224), (0.3, 17, 30), (1.0, 16, 20), (0.0, 11, 11)])
def test_mask_matches_oracle(rho, w, h):
    np.testing.assert_array_equal(make_mask(rho, w, h), mask_oracle(rho, w, h))


def test_default_band_at_224():
    band = bandpass_mask()
    # 53 x 53 outer square (|k| <= 26.88) minus the 13 x 13 inner one (|k| <= 6.72)
    assert band.values.sum() == 53 * 53 - 13 * 13
    assert band.values[112, 112] == 0
    assert band.rho_low == RHO_LOW and band.rho_high == RHO_HIGH


@settings(max_examples=60, deadline=None)
@given(rho=st.floats(0, 1), w=st.integers(16, 256), h=st.integers(16, 256))
def test_ones_fraction_within_discretization(rho, w, h):
    m = make_mask(rho, w, h)
    side = math.sqrt(rho)
    # each axis window holds between n*sqrt(rho) - 1 and n*sqrt(rho) + 1 indices, clipped to [.., n]
    lo = max(0.0, (side * h - 1) / h) * max(0.0, (side * w - 1) / w)
    hi = min(1.0, (side * h + 1) / h) * min(1.0, (side * w + 1) / w)
    assert lo - 1e-12 <= m.mean() <= hi + 1e-12


@settings(max_examples=40, deadline=None)
@given(rho=st.floats(0, 1), w=st.integers(2, 64), h=st.integers(2, 64))
def test_masks_are_conjugate_symmetric(rho, w, h):
    m = make_mask(rho, w, h).astype(bool)
    for i, j in zip(*np.nonzero(m)):
        # mirror through the DC bin in the shifted frame
        mi = (2 * (h // 2) - i) % h
        mj = (2 * (w // 2) - j) % w
        assert m[mi, mj]


def test_bandpass_one_zero_drops_only_dc():
    band = bandpass_mask(1.0, 0.0, 31, 40)
    assert band.values.size - band.values.sum() == 1
    assert band.values[20, 15] == 0


def test_band_ordering_enforced():
    with pytest.raises(ValueError):
        bandpass_mask(0.01, 0.02)
    with pytest.raises(ValueError):
        make_mask(1.5, 8, 8)


def test_high_is_complement_of_low():
    np.testing.assert_array_equal(highpass_mask(0.2, 30, 20).values + lowpass_mask(0.2, 30, 20).values, 1)


def test_texture_identity_and_zero():
    x = np.random.default_rng(2).uniform(0, 255, size=(32, 40, 3))
    np.testing.assert_allclose(extract_texture(x, np.ones((32, 40))), x, atol=1e-9)
    np.testing.assert_allclose(extract_texture(x, np.zeros((32, 40))), 0.0, atol=1e-12)


def test_texture_imaginary_residue_is_roundoff():
    x = np.random.default_rng(3).uniform(0, 255, size=(64, 48, 3))
    t = extract_texture(x, bandpass_mask(0.2, 0.01, 48, 64), return_complex=True)
    assert np.abs(t.imag).max() < 1e-9


def test_texture_shape_mismatch():
    with pytest.raises(ValueError):
        extract_texture(np.zeros((10, 10)), np.ones((10, 11)))


def test_band_energy_matches_parseval():
    x = np.random.default_rng(4).normal(size=(16, 16))
    assert band_energy(x, np.ones((16, 16))) == pytest.approx(np.mean(x**2), rel=1e-12)


def test_render_texture_stretch():
    t = np.array([[-1.0, 0.0], [1.0, 3.0]])
    np.testing.assert_array_equal(render_texture(t), [[0, 64], [128, 255]])
    assert render_texture(np.ones((3, 3))).max() == 0
