"""Shared domain types, the on-disk dataset container and the facial symmetry table.

Coordinates are ``(row, col)`` pixel positions with the origin at the top-left
corner of the image.  All value types are frozen after construction; pixel
arrays are flagged read-only so they can be shared between workers.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

N_POSITIONS = 37
N_LANDMARKS = 68
MIDLINE_IDS = frozenset({1})

FORMAT_NAME = "skinpavit-dataset"
FORMAT_VERSION = 1


class Modality(str, Enum):
    SELFIE = "selfie"
    VISIA = "visia"


class Lighting(str, Enum):
    NATURAL = "natural"
    WHITE = "white"
    YELLOW = "yellow"
    STANDARD2 = "standard2"
    CROSSPOLAR = "crosspolar"


class Angle(str, Enum):
    LEFT = "left"
    FRONT = "front"
    RIGHT = "right"


class MetricKind(str, Enum):
    SH = "SH"
    TEWL = "TEWL"


# semi-side length of the square crop, per imaging device
PATCH_RADIUS = {Modality.SELFIE: 70, Modality.VISIA: 170}

UNITS = {MetricKind.SH: "AU", MetricKind.TEWL: "g/m^2/h"}


class DatasetFormatError(ValueError):
    """Raised when a dataset container cannot be parsed."""

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        where = f"record {record}: " if record is not None else ""
        super().__init__(where + message)


def _frozen_array(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def center_index(c: float) -> int:
    """Round a sub-pixel coordinate to the integer patch centre (half-up)."""
    return int(math.floor(c + 0.5))


def window_inside(shape: tuple[int, ...], c: tuple[float, float], r: int) -> bool:
    """True when the ``2r x 2r`` window around ``c`` fits inside an image of ``shape``."""
    r0, c0 = center_index(c[0]), center_index(c[1])
    return r0 - r >= 0 and c0 - r >= 0 and r0 + r <= shape[0] and c0 + r <= shape[1]


@dataclass(frozen=True)
class FacialImage:
    pixels: np.ndarray
    modality: Modality
    lighting: Lighting
    angle: Angle
    panelist_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        r = PATCH_RADIUS[Modality(self.modality)]
        if px.shape[0] < 2 * r or px.shape[1] < 2 * r:
            raise ValueError(f"image {px.shape[:2]} smaller than one {2 * r}px patch")
        object.__setattr__(self, "pixels", _frozen_array(px))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "lighting", Lighting(self.lighting))
        object.__setattr__(self, "angle", Angle(self.angle))
        object.__setattr__(self, "panelist_id", str(self.panelist_id))

    @property
    def radius(self) -> int:
        return PATCH_RADIUS[self.modality]

    def __eq__(self, other):
        if not isinstance(other, FacialImage):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.lighting == other.lighting
            and self.angle == other.angle
            and self.panelist_id == other.panelist_id
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    __hash__ = None


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected {N_LANDMARKS} 2-D landmarks, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", _frozen_array(pts))

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return bool(np.array_equal(self.points, other.points))

    __hash__ = None


@dataclass(frozen=True)
class AnchorSet:
    """Position id -> (row, col) centre.  Any subset of 1..37 is allowed."""

    entries: Mapping[int, tuple[float, float]]

    def __post_init__(self):
        clean = {}
        for d, c in dict(self.entries).items():
            d = int(d)
            if not 1 <= d <= N_POSITIONS:
                raise ValueError(f"position id {d} outside 1..{N_POSITIONS}")
            row, col = (float(v) for v in c)
            if not (math.isfinite(row) and math.isfinite(col)):
                raise ValueError(f"anchor {d} has non-finite coordinate")
            clean[d] = (row, col)
        object.__setattr__(self, "entries", dict(sorted(clean.items())))

    @classmethod
    def from_array(cls, coords: np.ndarray, ids: Iterable[int] | None = None) -> "AnchorSet":
        coords = np.asarray(coords, dtype=float)
        ids = list(ids) if ids is not None else list(range(1, len(coords) + 1))
        return cls({d: tuple(c) for d, c in zip(ids, coords)})

    @property
    def ids(self) -> list[int]:
        return list(self.entries)

    def to_array(self, ids: Iterable[int] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else list(ids)
        return np.array([self.entries[d] for d in ids], dtype=float).reshape(-1, 2)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, d: int) -> tuple[float, float]:
        return self.entries[d]

    def __contains__(self, d) -> bool:
        return d in self.entries

    def check_bounds(self, shape: tuple[int, ...], r: int) -> None:
        """Every centre must lie inside the image padded by ``r``."""
        h, w = shape[:2]
        for d, (row, col) in self.entries.items():
            if not (-r <= row <= h + r and -r <= col <= w + r):
                raise ValueError(f"anchor {d} at {(row, col)} outside image {h}x{w} padded by {r}")


@dataclass(frozen=True)
class Measurement:
    kind: MetricKind
    value: float

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        v = float(self.value)
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"measurement value must be finite and >= 0, got {self.value}")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True)
class SkinPatch:
    pixels: np.ndarray
    position_id: int
    label: Measurement
    panelist_id: str
    lighting: Lighting
    angle: Angle

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise ValueError(f"patch must be square 2r x 2r x 3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("patch pixels must be uint8")
        if not 1 <= int(self.position_id) <= N_POSITIONS:
            raise ValueError(f"position id {self.position_id} outside 1..{N_POSITIONS}")
        object.__setattr__(self, "pixels", _frozen_array(px))
        object.__setattr__(self, "position_id", int(self.position_id))
        object.__setattr__(self, "lighting", Lighting(self.lighting))
        object.__setattr__(self, "angle", Angle(self.angle))

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    __hash__ = None


# Left-side id -> right-side id.  Same-row counterparts follow the sticker layout:
# 8/9/10 pair with 26/27/28 (second row), the ear column 11/12/16 with 25/29/33.
_LEFT_TO_RIGHT = {
    2: 19, 3: 20, 4: 21, 5: 22, 6: 23, 7: 24,
    8: 26, 9: 27, 10: 28, 11: 25, 12: 29,
    13: 30, 14: 31, 15: 32, 16: 33, 17: 34, 18: 35,
    36: 37,
}


@dataclass(frozen=True)
class SymmetryTable:
    pairs: Mapping[int, int]

    def __post_init__(self):
        pairs = dict(self.pairs)
        for d, e in pairs.items():
            if pairs.get(e) != d or d == e:
                raise ValueError(f"pairing is not an involution at {d} -> {e}")
        object.__setattr__(self, "pairs", pairs)

    def partner(self, d: int) -> int | None:
        return self.pairs.get(d)

    @property
    def midline(self) -> frozenset[int]:
        return frozenset(range(1, N_POSITIONS + 1)) - frozenset(self.pairs)

    def unordered_pairs(self) -> list[tuple[int, int]]:
        return sorted((d, e) for d, e in self.pairs.items() if d < e)


def build_symmetry_table() -> SymmetryTable:
    pairs = dict(_LEFT_TO_RIGHT)
    pairs.update({e: d for d, e in _LEFT_TO_RIGHT.items()})
    return SymmetryTable(pairs)


@dataclass(frozen=True)
class Record:
    image: FacialImage
    anchors: AnchorSet
    labels: Mapping[int, Measurement]

    def __post_init__(self):
        labels = {int(d): m for d, m in dict(self.labels).items()}
        r = self.image.radius
        self.anchors.check_bounds(self.image.pixels.shape, r)
        for d in labels:
            if d not in self.anchors:
                raise ValueError(f"label for position {d} has no anchor")
            if not window_inside(self.image.pixels.shape, self.anchors[d], r):
                raise ValueError(f"labeled anchor {d} has no croppable {2 * r}px patch")
        object.__setattr__(self, "labels", dict(sorted(labels.items())))


@dataclass
class Dataset:
    """Ordered collection of labeled facial images (the training set S)."""

    records: list[Record] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.records == other.records

    @property
    def n_patches(self) -> int:
        return sum(len(r.labels) for r in self.records)

    @property
    def panelists(self) -> list[str]:
        return sorted({r.image.panelist_id for r in self.records})

    @property
    def lightings(self) -> list[Lighting]:
        return sorted({r.image.lighting for r in self.records}, key=lambda x: x.value)

    @property
    def kinds(self) -> set[MetricKind]:
        return {m.kind for r in self.records for m in r.labels.values()}

    def subset(self, keep) -> "Dataset":
        """New dataset holding records for which ``keep(record)`` is true."""
        return Dataset([r for r in self.records if keep(r)])

    def by_panelist(self, ids: Iterable[str]) -> "Dataset":
        ids = set(ids)
        return self.subset(lambda r: r.image.panelist_id in ids)

    def by_lighting(self, tags: Iterable[Lighting | str]) -> "Dataset":
        tags = {Lighting(t) for t in tags}
        return self.subset(lambda r: r.image.lighting in tags)

    def by_angle(self, tags: Iterable[Angle | str]) -> "Dataset":
        tags = {Angle(t) for t in tags}
        return self.subset(lambda r: r.image.angle in tags)

    def labels(self, kind: MetricKind | str | None = None) -> np.ndarray:
        kind = MetricKind(kind) if kind is not None else None
        return np.array(
            [m.value for r in self.records for m in r.labels.values() if kind is None or m.kind == kind],
            dtype=float,
        )


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


def _record_meta(i: int, rec: Record) -> dict:
    img = rec.image
    return {
        "record": i,
        "image": f"images/{i:06d}.npy",
        "shape": list(img.pixels.shape),
        "modality": img.modality.value,
        "lighting": img.lighting.value,
        "angle": img.angle.value,
        "panelist_id": img.panelist_id,
        "anchors": {str(d): [c[0], c[1]] for d, c in rec.anchors.entries.items()},
        "labels": {str(d): {"kind": m.kind.value, "value": m.value} for d, m in rec.labels.items()},
    }


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical datasets give identical bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def serialize_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` as a zip container: manifest.json, index.jsonl, images/*.npy."""
    path = Path(path)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "n_records": len(ds)}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        lines = []
        for i, rec in enumerate(ds.records):
            meta = _record_meta(i, rec)
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(rec.image.pixels), allow_pickle=False)
            zf.writestr(_entry(meta["image"]), buf.getvalue())
            lines.append(json.dumps(meta, sort_keys=True))
        zf.writestr(_entry("index.jsonl"), "\n".join(lines) + ("\n" if lines else ""))


def _parse_record(zf: zipfile.ZipFile, i: int, line: str) -> Record:
    try:
        meta = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed index line ({e})", record=i) from e
    try:
        raw = zf.read(meta["image"])
        pixels = np.load(io.BytesIO(raw), allow_pickle=False)
        if list(pixels.shape) != list(meta["shape"]):
            raise DatasetFormatError(f"image shape {pixels.shape} != index {meta['shape']}", record=i)
        image = FacialImage(pixels, meta["modality"], meta["lighting"], meta["angle"], meta["panelist_id"])
        anchors = AnchorSet({int(d): tuple(c) for d, c in meta["anchors"].items()})
        labels = {int(d): Measurement(m["kind"], m["value"]) for d, m in meta["labels"].items()}
        return Record(image, anchors, labels)
    except DatasetFormatError:
        raise
    except (KeyError, ValueError, TypeError, zipfile.BadZipFile, EOFError, OSError) as e:
        raise DatasetFormatError(f"{type(e).__name__}: {e}", record=i) from e


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as e:
        raise DatasetFormatError(f"{path}: not a readable dataset container ({e})") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
            index = zf.read("index.jsonl").decode("utf-8")
        except (KeyError, json.JSONDecodeError, zipfile.BadZipFile, OSError) as e:
            raise DatasetFormatError(f"{path}: missing or corrupt header ({e})") from e
        if manifest.get("format") != FORMAT_NAME:
            raise DatasetFormatError(f"{path}: unknown format {manifest.get('format')!r}")
        if manifest.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {manifest.get('version')!r}")
        lines = [ln for ln in index.splitlines() if ln.strip()]
        if len(lines) != manifest.get("n_records"):
            raise DatasetFormatError(
                f"{path}: index holds {len(lines)} records, manifest says {manifest.get('n_records')}"
            )
        return Dataset([_parse_record(zf, i, ln) for i, ln in enumerate(lines)])
