"""Anchor estimation from facial landmarks, patch cropping and sticker centroids.

The regressor is a PointNet-style network: a shared per-point MLP over the 68
normalized landmarks (each tagged with its landmark index, since the ordering
is fixed), max pooling, and an MLP head emitting 37 (row, col) anchors.
"""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .datamodel import (
    N_LANDMARKS,
    N_POSITIONS,
    AnchorSet,
    Dataset,
    LandmarkSet,
    Measurement,
    SkinPatch,
    center_index,
    window_inside,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skinpavit-anchor-model"
CHECKPOINT_VERSION = 1


class LandmarkProvider(Protocol):
    """Anything that returns the 68 landmarks of a facial image."""

    def __call__(self, image: np.ndarray) -> LandmarkSet: ...


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


class PatchOutOfBounds(ValueError):
    def __init__(self, position_id, centre, r, shape):
        self.position_id = position_id
        super().__init__(
            f"anchor {position_id}: {2 * r}px window around {centre} leaves image {shape[0]}x{shape[1]}"
        )


def crop_patch(image: np.ndarray, c: tuple[float, float], r: int, position_id: int | None = None) -> np.ndarray:
    """Slice ``image[c0 - r : c0 + r, c1 - r : c1 + r]`` around the rounded centre."""
    image = np.asarray(image)
    if not window_inside(image.shape, c, r):
        raise PatchOutOfBounds(position_id, c, r, image.shape)
    r0, c0 = center_index(c[0]), center_index(c[1])
    return image[r0 - r : r0 + r, c0 - r : c0 + r]


def extract_patches(ds: Dataset, skip_out_of_bounds: bool = True) -> list[SkinPatch]:
    """Every labeled anchor of every record as a SkinPatch, in record order."""
    out = []
    for i, rec in enumerate(ds.records):
        img = rec.image
        for d, m in rec.labels.items():
            try:
                px = crop_patch(img.pixels, rec.anchors[d], img.radius, d)
            except PatchOutOfBounds as e:
                if not skip_out_of_bounds:
                    raise
                log.warning("record %d: skipping %s", i, e)
                continue
            out.append(SkinPatch(px, d, m, img.panelist_id, img.lighting, img.angle))
    return out


# ---------------------------------------------------------------------------
# error rate
# ---------------------------------------------------------------------------


def anchor_error_rate(c, c_pred, r: float) -> float:
    if not r > 0:
        raise ValueError(f"sticker radius must be positive, got {r}")
    c = np.asarray(c, dtype=float)
    c_pred = np.asarray(c_pred, dtype=float)
    return float(np.hypot(*(c - c_pred)) / r)


def mean_error_rate(truth: AnchorSet, pred: AnchorSet, r: float) -> float:
    ids = [d for d in truth.ids if d in pred]
    if not ids:
        raise ValueError("no anchors in common")
    return float(np.mean([anchor_error_rate(truth[d], pred[d], r) for d in ids]))


# ---------------------------------------------------------------------------
# landmark normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormTransform:
    centre: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.centre) / self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) * self.scale + self.centre


def normalize_landmarks(P: LandmarkSet | np.ndarray) -> tuple[np.ndarray, NormTransform]:
    """Centre on the centroid and scale the RMS radius to one."""
    pts = P.points if isinstance(P, LandmarkSet) else np.asarray(P, dtype=float)
    centre = pts.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((pts - centre) ** 2, axis=1))))
    if not scale > 1e-12:
        raise ValueError("degenerate landmark set: all points coincide")
    t = NormTransform(centre, scale)
    return t.apply(pts), t


def denormalize(pts: np.ndarray, t: NormTransform) -> np.ndarray:
    return t.invert(pts)


# ---------------------------------------------------------------------------
# regressor
# ---------------------------------------------------------------------------


@dataclass
class AnchorTrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 128
    index_dim: int = 16
    seed: int = 0


class PointNetAnchors(nn.Module):
    def __init__(self, hidden: int = 128, index_dim: int = 16):
        super().__init__()
        self.index_embed = nn.Embedding(N_LANDMARKS, index_dim)
        self.point_mlp = nn.Sequential(
            nn.Linear(2 + index_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 4 * hidden),
        )
        self.head = nn.Sequential(
            nn.Linear(4 * hidden, 2 * hidden),
            nn.ReLU(),
            nn.Linear(2 * hidden, N_POSITIONS * 2),
        )

    def forward(self, pts: torch.Tensor) -> torch.Tensor:
        b = pts.shape[0]
        idx = self.index_embed.weight.unsqueeze(0).expand(b, -1, -1)
        feat = self.point_mlp(torch.cat([pts, idx], dim=-1))
        pooled = feat.max(dim=1).values
        return self.head(pooled).view(b, N_POSITIONS, 2)


@dataclass
class AnchorRegressor:
    net: PointNetAnchors
    config: AnchorTrainConfig
    trained: bool = False
    history: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "trained": self.trained,
                "state": self.net.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "AnchorRegressor":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not an anchor model checkpoint (version {CHECKPOINT_VERSION})")
        cfg = AnchorTrainConfig(**blob["config"])
        net = PointNetAnchors(cfg.hidden, cfg.index_dim)
        net.load_state_dict(blob["state"])
        return cls(net, cfg, trained=blob["trained"])


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for lm, an in pairs:
        if len(an) != N_POSITIONS:
            raise ValueError("training anchors must cover all 37 positions")
        x, t = normalize_landmarks(lm)
        xs.append(x)
        ys.append(t.apply(an.to_array(range(1, N_POSITIONS + 1))))
    return np.stack(xs), np.stack(ys)


def train_anchor_model(pairs: Sequence[tuple[LandmarkSet, AnchorSet]], cfg: AnchorTrainConfig | None = None) -> AnchorRegressor:
    """Fit the regressor by MSE in the normalized landmark frame (Adam, cosine schedule)."""
    cfg = cfg or AnchorTrainConfig()
    if len(pairs) == 0:
        raise ValueError("anchor model needs at least one training pair")
    x, y = _stack_pairs(pairs)
    torch.manual_seed(cfg.seed)
    net = PointNetAnchors(cfg.hidden, cfg.index_dim)
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for s in range(0, len(xt), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss = torch.mean((net(xt[idx]) - yt[idx]) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        history.append(total / len(xt))
    net.eval()
    return AnchorRegressor(net, cfg, trained=True, history=history)


def predict_anchors(model: AnchorRegressor, P: LandmarkSet) -> AnchorSet:
    if not model.trained:
        raise RuntimeError("anchor model has not been trained")
    x, t = normalize_landmarks(P)
    with torch.no_grad():
        out = model.net(torch.as_tensor(x[None], dtype=torch.float32))[0].double().numpy()
    return AnchorSet.from_array(t.invert(out))


# ---------------------------------------------------------------------------
# sticker segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StickerColor:
    """Hue window in degrees plus saturation / value floors (HSV in [0, 1])."""

    hue_lo: float = 90.0
    hue_hi: float = 150.0
    min_sat: float = 0.5
    min_val: float = 0.25
    min_area: int = 20


@dataclass
class StickerResult:
    centroids: np.ndarray
    areas: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.centroids)


def _hsv(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    hue = np.select(
        [mx == r, mx == g],
        [((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    )
    hue = np.where(delta > 0, hue * 60.0, 0.0)
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return hue, sat, mx


def sticker_mask(image: np.ndarray, color: StickerColor = StickerColor()) -> np.ndarray:
    hue, sat, val = _hsv(image)
    if color.hue_lo <= color.hue_hi:
        in_hue = (hue >= color.hue_lo) & (hue <= color.hue_hi)
    else:  # window wraps through 0 degrees
        in_hue = (hue >= color.hue_lo) | (hue <= color.hue_hi)
    return in_hue & (sat >= color.min_sat) & (val >= color.min_val)


def sticker_centroids(
    image: np.ndarray,
    color: StickerColor = StickerColor(),
    expected: int | None = None,
) -> StickerResult:
    """Centroids (row, col) of the connected sticker-coloured blobs, sorted by row then column."""
    mask = sticker_mask(image, color)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    notes = []
    if n == 0:
        notes.append("no sticker-coloured pixels found")
        warnings.warn(notes[0], stacklevel=2)
        return StickerResult(np.zeros((0, 2)), np.zeros(0, dtype=int), notes)
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(mask, labels, idx).astype(int)
    keep = idx[areas >= color.min_area]
    cents = np.array(ndimage.center_of_mass(mask, labels, keep), dtype=float).reshape(-1, 2)
    areas = areas[areas >= color.min_area]
    order = np.lexsort((cents[:, 1], cents[:, 0]))
    cents, areas = cents[order], areas[order]
    if n > len(keep):
        notes.append(f"dropped {n - len(keep)} components below {color.min_area} px")
    if expected is not None and len(cents) != expected:
        notes.append(f"found {len(cents)} stickers, expected {expected}")
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    return StickerResult(cents, areas, notes)


def match_stickers(centroids: np.ndarray, reference: AnchorSet) -> AnchorSet:
    """Assign sticker centroids to anchor ids by minimum total distance to ``reference``."""
    ref = reference.to_array()
    if len(centroids) == 0:
        return AnchorSet({})
    cost = np.linalg.norm(np.asarray(centroids)[:, None, :] - ref[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    ids = reference.ids
    return AnchorSet({ids[c]: tuple(centroids[r]) for r, c in zip(rows, cols)})


def paint_discs(shape, centres, radius: float, color=(0, 200, 40), background=(205, 160, 140)) -> np.ndarray:
    """Flat image with filled discs; test fixture and demo helper."""
    img = np.empty(tuple(shape[:2]) + (3,), dtype=np.uint8)
    img[:] = background
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    for c in centres:
        img[(rr - c[0]) ** 2 + (cc - c[1]) ** 2 <= radius**2] = color
    return img
