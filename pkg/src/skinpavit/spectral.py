"""Frequency-domain texture highlighting.

Images are arrays of shape ``(h, w)`` or ``(h, w, c)``; transforms run over the
two spatial axes, channel by channel.  Masks have shape ``(h, w)`` and live in
the DC-centred (``fftshift``-ed) frame, where the DC bin sits at
``(h // 2, w // 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# texture band used by the model: keep the central 5.76% of the spectrum,
# then drop the innermost 0.36%
RHO_LOW = 0.0576
RHO_HIGH = 0.0036

_EPS = 1e-9


@dataclass(frozen=True)
class FreqMask:
    values: np.ndarray
    rho_low: float | None
    rho_high: float | None
    kind: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def ones_fraction(self) -> float:
        return float(self.values.mean())


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def forward_spectrum(x: np.ndarray) -> np.ndarray:
    """Per-channel 2-D DFT with the DC bin moved to the centre."""
    x = _check_finite(x).astype(np.float64, copy=False)
    return np.fft.fftshift(np.fft.fft2(x, axes=(0, 1)), axes=(0, 1))


def inverse_spectrum(f: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(f, axes=(0, 1)), axes=(0, 1))


def _axis_window(rho: float, n: int) -> np.ndarray:
    # closed interval of integer indices, centred on the shifted DC bin
    half = math.sqrt(rho) * n / 2.0
    c = n // 2
    lo = max(0, math.ceil(c - half - _EPS))
    hi = min(n - 1, math.floor(c + half + _EPS))
    idx = np.zeros(n, dtype=bool)
    idx[lo : hi + 1] = True
    return idx


def make_mask(rho: float, w: int, h: int) -> np.ndarray:
    """Centred square window covering roughly a ``rho`` fraction of a ``h x w`` spectrum."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    rows = _axis_window(rho, h)
    cols = _axis_window(rho, w)
    return (rows[:, None] & cols[None, :]).astype(np.uint8)


def lowpass_mask(rho_l: float, w: int, h: int) -> FreqMask:
    return FreqMask(make_mask(rho_l, w, h), rho_l, None, "low")


def highpass_mask(rho_h: float, w: int, h: int) -> FreqMask:
    return FreqMask((1 - make_mask(rho_h, w, h)).astype(np.uint8), None, rho_h, "high")


def bandpass_mask(rho_l: float = RHO_LOW, rho_h: float = RHO_HIGH, w: int = 224, h: int = 224) -> FreqMask:
    if not rho_l > rho_h:
        raise ValueError(f"band-pass needs rho_l > rho_h, got {rho_l} <= {rho_h}")
    band = lowpass_mask(rho_l, w, h).values * highpass_mask(rho_h, w, h).values
    return FreqMask(band.astype(np.uint8), rho_l, rho_h, "band")


def _mask_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, FreqMask) else np.asarray(mask)


def extract_texture(x: np.ndarray, mask, return_complex: bool = False) -> np.ndarray:
    """Filter ``x`` by a centred spectral mask and return the real texture image.

    The imaginary residue is discarded; it is round-off only when the mask is
    symmetric about the DC bin, which holds for every mask built here.
    """
    x = np.asarray(x)
    m = _mask_values(mask)
    if m.shape != x.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
    f = forward_spectrum(x)
    if x.ndim == 3:
        m = m[:, :, None]
    t = inverse_spectrum(f * m)
    return t if return_complex else t.real


def band_energy(x: np.ndarray, mask) -> float:
    """Mean squared magnitude of the spectrum inside ``mask`` (per pixel, per channel)."""
    x = np.asarray(x, dtype=np.float64)
    m = _mask_values(mask).astype(bool)
    f = forward_spectrum(x)
    if x.ndim == 3:
        f = f[m, :]
    else:
        f = f[m]
    n = x.shape[0] * x.shape[1]
    return float(np.sum(np.abs(f) ** 2) / (n * n) / (x.shape[2] if x.ndim == 3 else 1))


def render_texture(t: np.ndarray) -> np.ndarray:
    """Stretch a texture image to uint8 for inspection."""
    t = np.asarray(t, dtype=np.float64)
    lo, hi = float(t.min()), float(t.max())
    if hi - lo < 1e-12:
        return np.zeros(t.shape, dtype=np.uint8)
    return np.round((t - lo) / (hi - lo) * 255.0).astype(np.uint8)
