"""Shot-group partitioning, MAE / R^2, and the evaluation report.

Shot groups come from a histogram of *training* labels: a bin is many-shot
when its count is at least half the largest bin count, medium-shot between a
quarter and a half, few-shot below a quarter.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

GROUPS = ("many", "medium", "few")


@dataclass(frozen=True)
class ShotPartition:
    bin_width: float
    first_bin: int
    counts: np.ndarray
    groups: tuple[str, ...]

    @property
    def edges(self) -> np.ndarray:
        return (self.first_bin + np.arange(len(self.counts) + 1)) * self.bin_width

    def bin_index(self, labels) -> np.ndarray:
        """Bin of each label; labels past either end go to the nearest edge bin."""
        b = np.floor(np.asarray(labels, dtype=float) / self.bin_width + 1e-12).astype(int) - self.first_bin
        return np.clip(b, 0, len(self.counts) - 1)

    def group_of(self, labels) -> np.ndarray:
        return np.asarray(self.groups, dtype=object)[self.bin_index(labels)]

    def to_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "groups": list(self.groups),
        }


def partition_shots(train_labels, bin_width: float = 1.0) -> ShotPartition:
    y = np.asarray(train_labels, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("partition needs at least one training label")
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    idx = np.floor(y / bin_width + 1e-12).astype(int)
    first = int(idx.min())
    counts = np.bincount(idx - first)
    top = counts.max()
    groups = tuple("many" if c >= top / 2 else "medium" if c >= top / 4 else "few" for c in counts)
    return ShotPartition(float(bin_width), first, counts, groups)


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def mae(preds, labels, mask=None) -> float:
    p, y = _pair(preds, labels)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        p, y = p[mask], y[mask]
    if p.size == 0:
        raise ValueError("MAE of an empty selection")
    return float(np.mean(np.abs(p - y)))


def r2(preds, labels) -> float:
    p, y = _pair(preds, labels)
    if p.size < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined for zero-variance labels")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


@dataclass
class EvalReport:
    """MAE per shot group (None when a group is empty) and R^2, in measurement units."""

    kind: str
    n: int
    mae_all: float
    mae_many: float | None
    mae_medium: float | None
    mae_few: float | None
    r2: float
    group_sizes: dict = field(default_factory=dict)
    name: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> str:
        def f(v):
            return "   -  " if v is None else f"{v:6.3f}"

        return (
            f"{self.name:<12} {self.kind:<5} {self.n:>6} {f(self.mae_all)} {f(self.mae_many)} "
            f"{f(self.mae_medium)} {f(self.mae_few)} {self.r2:7.3f}"
        )


REPORT_HEADER = f"{'config':<12} {'kind':<5} {'n':>6} {'MAE':>6} {'many':>6} {'med.':>6} {'few':>6} {'R2':>7}"


def format_reports(reports) -> str:
    return "\n".join([REPORT_HEADER] + [r.row() for r in reports])


def build_report(preds, labels, partition: ShotPartition, kind: str, name: str = "") -> EvalReport:
    p, y = _pair(preds, labels)
    groups = partition.group_of(y)
    per = {}
    sizes = {}
    for g in GROUPS:
        m = groups == g
        sizes[g] = int(m.sum())
        per[g] = mae(p, y, m) if m.any() else None
    return EvalReport(
        kind=str(kind),
        n=int(p.size),
        mae_all=mae(p, y),
        mae_many=per["many"],
        mae_medium=per["medium"],
        mae_few=per["few"],
        r2=r2(p, y),
        group_sizes=sizes,
        name=name,
    )


def weighted_group_mae(report: EvalReport) -> float:
    """MAE(all) rebuilt from the group MAEs weighted by group size."""
    tot = 0.0
    for g in GROUPS:
        v = getattr(report, f"mae_{g}")
        if v is not None:
            tot += v * report.group_sizes[g]
    return tot / report.n if report.n else math.nan


def mean_report(reports, name: str = "") -> EvalReport:
    """Field-wise mean over repeated runs (a group absent in any run stays absent)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")

    def avg(attr):
        vals = [getattr(r, attr) for r in reports]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    return EvalReport(
        kind=reports[0].kind,
        n=reports[0].n,
        mae_all=avg("mae_all"),
        mae_many=avg("mae_many"),
        mae_medium=avg("mae_medium"),
        mae_few=avg("mae_few"),
        r2=avg("r2"),
        group_sizes=dict(reports[0].group_sizes),
        name=name or reports[0].name,
    )


# ---------------------------------------------------------------------------
# harnesses (these train models, so the model package is imported lazily)
# ---------------------------------------------------------------------------


def split_by_panelist(ds, n_val: int, seed: int = 0):
    """Hold out ``n_val`` whole panelists; returns (train, val) datasets."""
    panelists = sorted(ds.panelists)
    if not 0 < n_val < len(panelists):
        raise ValueError(f"cannot hold out {n_val} of {len(panelists)} panelists")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(panelists, size=n_val, replace=False).tolist())
    train = ds.subset(lambda r: r.image.panelist_id not in held)
    val = ds.subset(lambda r: r.image.panelist_id in held)
    return train, val


def _patches(data):
    from .anchors import extract_patches
    from .datamodel import Dataset

    return extract_patches(data) if isinstance(data, Dataset) else list(data)


def evaluate(model, data, partition: ShotPartition, kind, name: str = "") -> EvalReport:
    """Report for a model (or checkpoint path) on a dataset or list of patches."""
    from .pavit.train import load_checkpoint, predict

    if not hasattr(model, "forward"):
        model = load_checkpoint(model)[0]
    patches = _patches(data)
    preds = predict(model, patches, kind)
    labels = [p.label.value for p in patches]
    return build_report(preds, labels, partition, getattr(kind, "value", kind), name)


def train_and_report(train_data, val_data, train_cfg, model_cfg=None, name: str = "", bin_width: float = 1.0):
    from .pavit.train import model_config_for, train

    train_p, val_p = _patches(train_data), _patches(val_data)
    partition = partition_shots([p.label.value for p in train_p], bin_width)
    mcfg = model_config_for(train_cfg, model_cfg)
    result = train(train_p, train_cfg, mcfg)
    return evaluate(result.model, val_p, partition, train_cfg.kind, name), result


def ablation_ladder(train_data, val_data, train_cfg, model_cfg=None, configs="ABCDE", seeds=(0,), bin_width=1.0):
    """One report per configuration; metrics averaged over ``seeds``."""
    from dataclasses import replace

    from .pavit.train import ABLATION_CONFIGS

    reports = []
    for c in configs:
        runs = []
        for s in seeds:
            cfg = replace(train_cfg, seed=s, **ABLATION_CONFIGS[c])
            runs.append(train_and_report(train_data, val_data, cfg, model_cfg, c, bin_width)[0])
        reports.append(mean_report(runs, c))
    return reports


def leave_one_lighting_out(ds, train_cfg, model_cfg=None, bin_width=1.0):
    """For each lighting tag: train on the others, test on it, with and without lighting augmentation."""
    from dataclasses import replace

    tags = sorted(t.value if hasattr(t, "value") else str(t) for t in ds.lightings)
    if len(tags) < 2:
        raise ValueError("leave-one-lighting-out needs at least two lighting tags")
    reports = []
    for tag in tags:
        train = ds.subset(lambda r: r.image.lighting.value != tag)
        test = ds.subset(lambda r: r.image.lighting.value == tag)
        for aug in (False, True):
            cfg = replace(train_cfg, use_lighting_augmentation=aug)
            name = f"{tag}{'+aug' if aug else ''}"
            reports.append(train_and_report(train, test, cfg, model_cfg, name, bin_width)[0])
    return reports
