"""Lighting and geometric augmentation for skin patches.

Lighting ops blend the patch with a degraded copy of itself:
``clip((1 - m) * degraded + m * original, 0, 255)`` for a magnitude ``m`` in
``[0, 2]``.  The blend is done in float and rounded once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

LIGHTING_KINDS = ("saturation", "contrast", "brightness", "sharpness")
GEOMETRIC_KINDS = ("flip_h", "flip_v", "rotate", "erase", "crop")

# ITU-R 601 luma weights, as used by PIL's "L" conversion
LUMA = np.array([0.299, 0.587, 0.114])

MAX_ROTATION_DEG = 30.0
MAX_ERASE_FRACTION = 0.25
CROP_FRACTION = 0.875
GEOMETRIC_PROB = 0.5


@dataclass(frozen=True)
class LightingOp:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in LIGHTING_KINDS:
            raise ValueError(f"unknown lighting op {self.kind!r}")
        if not 0.0 <= self.magnitude <= 2.0:
            raise ValueError(f"magnitude must lie in [0, 2], got {self.magnitude}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return blend(degrade(x, self.kind), x, self.magnitude)


def luminance(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ LUMA


def degrade(x: np.ndarray, kind: str) -> np.ndarray:
    """The fully degraded (m = 0) image for one lighting op, as float64."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "saturation":
        return np.repeat(luminance(x)[..., None], 3, axis=-1)
    if kind == "contrast":
        return np.full_like(x, luminance(x).mean())
    if kind == "brightness":
        return np.zeros_like(x)
    if kind == "sharpness":
        return ndimage.uniform_filter(x, size=(3, 3, 1), mode="nearest")
    raise ValueError(f"unknown lighting op {kind!r}")


def blend(x_deg: np.ndarray, x_ori: np.ndarray, m: float) -> np.ndarray:
    if not 0.0 <= m <= 2.0:
        raise ValueError(f"magnitude must lie in [0, 2], got {m}")
    x_deg = np.asarray(x_deg, dtype=np.float64)
    x_ori = np.asarray(x_ori, dtype=np.float64)
    if x_deg.shape != x_ori.shape:
        raise ValueError(f"shape mismatch {x_deg.shape} vs {x_ori.shape}")
    out = (1.0 - m) * x_deg + m * x_ori
    return np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)


def sample_lighting(rng: np.random.Generator) -> LightingOp:
    kind = LIGHTING_KINDS[int(rng.integers(len(LIGHTING_KINDS)))]
    return LightingOp(kind, float(rng.uniform(0.0, 2.0)))


def random_lighting(x: np.ndarray, rng: np.random.Generator, return_op: bool = False):
    op = sample_lighting(rng)
    out = op.apply(x)
    return (out, op) if return_op else out


# ---------------------------------------------------------------------------
# geometric
# ---------------------------------------------------------------------------


def _erase_box(shape, rng: np.random.Generator) -> tuple[int, int, int, int]:
    h, w = shape[:2]
    frac = rng.uniform(0.02, MAX_ERASE_FRACTION)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    eh = int(np.clip(np.floor(np.sqrt(frac * h * w * aspect)), 1, h))
    ew = int(np.clip(np.floor(frac * h * w / eh), 1, w))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return top, left, eh, ew


def _resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.asarray(Image.fromarray(x).resize((w, h), Image.BICUBIC))


def apply_geometric(x: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint8)
    if kind == "identity":
        return x.copy()
    if kind == "flip_h":
        return x[:, ::-1].copy()
    if kind == "flip_v":
        return x[::-1].copy()
    if kind == "rotate":
        angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
        out = ndimage.rotate(x.astype(np.float64), angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
        return np.rint(np.clip(out, 0, 255)).astype(np.uint8)
    if kind == "erase":
        top, left, eh, ew = _erase_box(x.shape, rng)
        out = x.copy()
        fill = np.rint(x.reshape(-1, x.shape[-1]).mean(axis=0)).astype(np.uint8)
        out[top : top + eh, left : left + ew] = fill
        return out
    if kind == "crop":
        h, w = x.shape[:2]
        ch, cw = int(round(h * CROP_FRACTION)), int(round(w * CROP_FRACTION))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        return _resize(np.ascontiguousarray(x[top : top + ch, left : left + cw]), h, w)
    raise ValueError(f"unknown geometric op {kind!r}")


def random_geometric(x: np.ndarray, rng: np.random.Generator, force: str | None = None, return_op: bool = False):
    """With probability 0.5 apply one uniformly chosen geometric transform."""
    if force is not None:
        kind = force
    elif rng.uniform() < GEOMETRIC_PROB:
        kind = GEOMETRIC_KINDS[int(rng.integers(len(GEOMETRIC_KINDS)))]
    else:
        kind = "identity"
    out = apply_geometric(x, kind, rng)
    return (out, kind) if return_op else out


def augment_patch(
    x: np.ndarray,
    rng: np.random.Generator,
    lighting: bool = True,
    geometric: bool = True,
) -> np.ndarray:
    if geometric:
        x = random_geometric(x, rng)
    if lighting:
        x = random_lighting(x, rng)
    return x
