"""Full-face heatmaps from per-anchor predictions.

Values are interpolated linearly over a Delaunay triangulation of the anchors.
Outside the anchor hull (but inside the face mask) a pixel takes the value at
the nearest point of the hull boundary; outside the face mask it stays NaN and
is left untouched by the overlay.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .datamodel import MetricKind

# blue-white-red diverging ramp, RGB in 0..255, at fractions of the domain
RAMP_POSITIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
RAMP_COLORS = (
    (0, 0, 77),
    (0, 0, 255),
    (255, 255, 255),
    (255, 0, 0),
    (128, 0, 0),
)

DEFAULT_ALPHA = 0.6


@dataclass(frozen=True)
class ColorScale:
    kind: MetricKind
    lo: float
    hi: float
    # SH runs red (dry) to blue (hydrated); TEWL runs blue to red
    inverted: bool

    @property
    def midpoint(self) -> float:
        return (self.lo + self.hi) / 2.0

    @classmethod
    def for_kind(cls, kind) -> "ColorScale":
        kind = MetricKind(kind)
        if kind == MetricKind.TEWL:
            return cls(kind, 0.0, 30.0, False)
        return cls(kind, 0.0, 90.0, True)


def value_to_color(v, scale: ColorScale) -> np.ndarray:
    """Piecewise-linear ramp lookup; returns uint8 RGB with a trailing axis of 3."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("colour lookup needs finite values")
    t = (np.clip(v, scale.lo, scale.hi) - scale.lo) / (scale.hi - scale.lo)
    if scale.inverted:
        t = 1.0 - t
    colors = np.asarray(RAMP_COLORS, dtype=float)
    out = np.stack([np.interp(t, RAMP_POSITIONS, colors[:, c]) for c in range(3)], axis=-1)
    return np.rint(out).astype(np.uint8)


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def _triangulate(points: np.ndarray) -> Delaunay:
    if len(points) < 3:
        raise ValueError(f"interpolation needs at least 3 anchors, got {len(points)}")
    centred = points - points.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, float(np.abs(centred).max()))) < 2:
        raise ValueError("anchors are collinear")
    try:
        return Delaunay(points)
    except QhullError as e:
        raise ValueError(f"cannot triangulate anchors: {e}") from None


def hull_mask(points: np.ndarray, shape) -> np.ndarray:
    """Pixels (row, col) inside the convex hull of ``points``."""
    tri = _triangulate(np.asarray(points, dtype=float))
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    q = np.column_stack([rr.ravel(), cc.ravel()]).astype(float)
    return (tri.find_simplex(q) >= 0).reshape(shape[:2])


def _barycentric(tri: Delaunay, q: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    simplex = tri.find_simplex(q)
    inside = simplex >= 0
    out = np.full(len(q), np.nan)
    s = simplex[inside]
    trans = tri.transform[s]
    b = np.einsum("ijk,ik->ij", trans[:, :2], q[inside] - trans[:, 2])
    weights = np.column_stack([b, 1.0 - b.sum(axis=1)])
    out[inside] = np.sum(weights * values[tri.simplices[s]], axis=1)
    return out, inside


def _nearest_on_hull(points: np.ndarray, values: np.ndarray, q: np.ndarray, chunk: int = 65536) -> np.ndarray:
    hull = ConvexHull(points)
    verts = hull.vertices  # counter-clockwise order
    a = points[verts]
    b = points[np.roll(verts, -1)]
    va = values[verts]
    vb = values[np.roll(verts, -1)]
    ab = b - a
    len2 = np.sum(ab**2, axis=1)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        part = q[s : s + chunk]
        t = np.clip(np.einsum("mek,ek->me", part[:, None, :] - a[None], ab) / len2, 0.0, 1.0)
        near = a[None] + t[..., None] * ab[None]
        dist = np.sum((part[:, None, :] - near) ** 2, axis=-1)
        e = np.argmin(dist, axis=1)
        tt = t[np.arange(len(part)), e]
        out[s : s + chunk] = (1 - tt) * va[e] + tt * vb[e]
    return out


def interpolate_at(anchors, values, queries) -> np.ndarray:
    """Field value at arbitrary (row, col) queries, ignoring any face mask."""
    pts = np.asarray(anchors, dtype=float).reshape(-1, 2)
    vals = np.asarray(values, dtype=float).ravel()
    if len(pts) != len(vals):
        raise ValueError("one value per anchor")
    q = np.asarray(queries, dtype=float).reshape(-1, 2)
    tri = _triangulate(pts)
    out, inside = _barycentric(tri, q, vals)
    if not inside.all():
        out[~inside] = _nearest_on_hull(pts, vals, q[~inside])
    return out


def interpolate_field(anchors, values, face_mask: np.ndarray) -> np.ndarray:
    """Scalar grid shaped like ``face_mask``; NaN outside the mask."""
    face_mask = np.asarray(face_mask, dtype=bool)
    field = np.full(face_mask.shape, np.nan)
    rows, cols = np.nonzero(face_mask)
    if len(rows):
        field[rows, cols] = interpolate_at(anchors, values, np.column_stack([rows, cols]))
    else:
        _triangulate(np.asarray(anchors, dtype=float).reshape(-1, 2))
    return field


def face_mask_from_landmarks(landmarks, shape) -> np.ndarray:
    pts = landmarks.points if hasattr(landmarks, "points") else np.asarray(landmarks, dtype=float)
    return hull_mask(pts, shape)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_overlay(image: np.ndarray, field: np.ndarray, scale: ColorScale, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """``alpha * color(field) + (1 - alpha) * image`` where the field is defined."""
    image = np.asarray(image)
    field = np.asarray(field, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("overlay needs an RGB image")
    if field.shape != image.shape[:2]:
        raise ValueError(f"field {field.shape} does not match image {image.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = image.astype(np.uint8).copy()
    defined = np.isfinite(field)
    color = value_to_color(field[defined], scale).astype(float)
    mixed = alpha * color + (1.0 - alpha) * image[defined].astype(float)
    out[defined] = np.rint(mixed).astype(np.uint8)
    return out


def legend_strip(scale: ColorScale, width: int, height: int = 24) -> np.ndarray:
    """Horizontal ramp from the low to the high end of the domain."""
    values = np.linspace(scale.lo, scale.hi, width)
    row = value_to_color(values, scale)
    return np.repeat(row[None], height, axis=0)


def with_legend(image: np.ndarray, scale: ColorScale, height: int = 24, gap: int = 4) -> np.ndarray:
    strip = legend_strip(scale, image.shape[1], height)
    spacer = np.full((gap, image.shape[1], 3), 255, dtype=np.uint8)
    return np.concatenate([image, spacer, strip], axis=0)


def render_heatmap(image, anchors, values, kind, landmarks=None, alpha: float = DEFAULT_ALPHA, legend: bool = False):
    """Interpolate per-anchor values over the face and blend onto ``image``."""
    image = np.asarray(image)
    if landmarks is not None:
        mask = face_mask_from_landmarks(landmarks, image.shape[:2])
    else:
        mask = hull_mask(np.asarray(anchors, dtype=float), image.shape[:2])
    scale = ColorScale.for_kind(kind)
    out = render_overlay(image, interpolate_field(anchors, values, mask), scale, alpha)
    return with_legend(out, scale) if legend else out


def image_digest(image: np.ndarray) -> str:
    """sha256 over shape, dtype and pixel bytes."""
    image = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(f"{image.shape}{image.dtype.str}".encode())
    h.update(image.tobytes())
    return h.hexdigest()
