"""Training loop, pair batching, checkpoints and prediction."""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..augment import random_geometric, random_lighting
from ..datamodel import MIDLINE_IDS, MetricKind, SkinPatch, build_symmetry_table
from ..evalmetrics import r2
from .losses import DEFAULT_TAU, LABEL_RANGE, pair_cosines, scale_label, total_loss, unscale
from .model import ModelConfig, SkinPAViT, fast_config, resize_patch, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skinpavit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 50
    batch_size: int = 16
    tau: float = DEFAULT_TAU
    kind: str = "TEWL"
    loss_weights: tuple[float, float] = (1.0, 1.0)
    use_freq_input: bool = True
    use_position_adapters: bool = True
    # geometric augmentation; lighting augmentation has its own switch
    use_augmentation: bool = True
    use_lighting_augmentation: bool = True
    use_symmetric_loss: bool = True
    seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        MetricKind(self.kind)
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even (pairs), got {self.batch_size}")
        if self.epochs < 0 or not self.lr > 0:
            raise ValueError("epochs must be >= 0 and lr > 0")

    @property
    def flags(self) -> dict:
        return {
            "use_freq_input": self.use_freq_input,
            "use_position_adapters": self.use_position_adapters,
            "use_augmentation": self.use_augmentation,
            "use_symmetric_loss": self.use_symmetric_loss,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# configurations A..E: each adds one ingredient to the previous one
ABLATION_CONFIGS = {
    "A": dict(use_freq_input=False, use_position_adapters=False, use_augmentation=False, use_symmetric_loss=False),
    "B": dict(use_freq_input=True, use_position_adapters=False, use_augmentation=False, use_symmetric_loss=False),
    "C": dict(use_freq_input=True, use_position_adapters=True, use_augmentation=False, use_symmetric_loss=False),
    "D": dict(use_freq_input=True, use_position_adapters=True, use_augmentation=True, use_symmetric_loss=False),
    "E": dict(use_freq_input=True, use_position_adapters=True, use_augmentation=True, use_symmetric_loss=True),
}


def model_config_for(train_cfg: TrainConfig, base: ModelConfig | None = None) -> ModelConfig:
    base = base or fast_config()
    return base.with_flags(
        use_freq_input=train_cfg.use_freq_input,
        use_position_adapters=train_cfg.use_position_adapters,
    )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class PatchTable:
    """Patches with scaled labels and the symmetric partner lookup used for batching."""

    def __init__(self, patches: Sequence[SkinPatch], kind: str, side: int):
        if len(patches) == 0:
            raise ValueError("no patches")
        self.patches = list(patches)
        self.kind = MetricKind(kind)
        self.side = side
        for p in self.patches:
            if p.label.kind != self.kind:
                raise ValueError(f"patch label kind {p.label.kind.value} != {self.kind.value}")
        self.position_ids = np.array([p.position_id for p in self.patches], dtype=np.int64)
        self.values = np.array([p.label.value for p in self.patches], dtype=float)
        self.targets = np.asarray(scale_label(self.values, self.kind), dtype=float)
        self._resized: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.patches)

    def resized(self, i: int) -> np.ndarray:
        if i not in self._resized:
            self._resized[i] = resize_patch(self.patches[i].pixels, self.side)
        return self._resized[i]

    def symmetric_pairs(self) -> tuple[list[tuple[list[int], list[int]]], list[int]]:
        """Group indices by (panelist, unordered symmetric pair); midline patches listed apart."""
        table = build_symmetry_table()
        groups: dict = defaultdict(lambda: ([], []))
        midline = []
        for i, p in enumerate(self.patches):
            d = p.position_id
            if d in MIDLINE_IDS:
                midline.append(i)
                continue
            e = table.partner(d)
            key = (p.panelist_id, min(d, e))
            groups[key][0 if d < e else 1].append(i)
        return [groups[k] for k in sorted(groups)], midline

    def validation_pairs(self) -> np.ndarray:
        """Every (left, right) combination of partner patches from the same panelist."""
        out = []
        groups, _ = self.symmetric_pairs()
        for a, b in groups:
            out.extend((i, j) for i in a for j in b)
        return np.array(out, dtype=np.int64).reshape(-1, 2)


def epoch_units(table: PatchTable, rng: np.random.Generator) -> list[tuple[int, int, bool]]:
    """Shuffle into units of two patches; the flag marks a symmetric pair.

    Each side of a group is shuffled and zipped with the other, the shorter side
    cycling, so every patch appears at least once per epoch.  Patches whose
    partner never appears for that panelist are grouped like midline patches.
    """
    groups, midline = table.symmetric_pairs()
    units = []
    singles = list(midline)
    for a, b in groups:
        if not a or not b:
            singles.extend(a or b)
            continue
        a = list(rng.permutation(a))
        b = list(rng.permutation(b))
        n = max(len(a), len(b))
        units.extend((int(a[k % len(a)]), int(b[k % len(b)]), True) for k in range(n))
    singles = list(rng.permutation(singles)) if singles else []
    if len(singles) % 2:
        singles.append(singles[int(rng.integers(len(singles) - 1))] if len(singles) > 1 else singles[0])
    units.extend((int(singles[k]), int(singles[k + 1]), False) for k in range(0, len(singles), 2))
    order = rng.permutation(len(units))
    return [units[k] for k in order]


def batches_from_units(units, batch_size: int):
    per = batch_size // 2
    for s in range(0, len(units), per):
        chunk = units[s : s + per]
        idx, partner = [], []
        for a, b, paired in chunk:
            k = len(idx)
            idx += [a, b]
            partner += [k + 1, k] if paired else [-1, -1]
        yield np.array(idx), np.array(partner)


def _augmented(table: PatchTable, i: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    x = table.patches[i].pixels
    if cfg.use_augmentation:
        x = random_geometric(x, rng)
    if cfg.use_lighting_augmentation:
        x = random_lighting(x, rng)
    return resize_patch(x, table.side)


def _batch_pixels(table: PatchTable, idx, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    if not (cfg.use_augmentation or cfg.use_lighting_augmentation):
        return [table.resized(int(i)) for i in idx]
    # per-sample streams keep augmentation deterministic under any batching
    return [
        _augmented(table, int(i), cfg, np.random.default_rng([cfg.seed, epoch, int(i), k]))
        for k, i in enumerate(idx)
    ]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SkinPAViT
    train_cfg: TrainConfig
    history: list[dict] = field(default_factory=list)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(self.model, self.train_cfg, path, history=self.history, extra=extra)


def train(
    patches: Sequence[SkinPatch],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    val_patches: Sequence[SkinPatch] | None = None,
    max_steps: int | None = None,
    progress=None,
) -> TrainResult:
    """Adam with per-epoch cosine annealing over the trainable (non-backbone) parameters."""
    model_cfg = model_cfg or model_config_for(train_cfg)
    if (model_cfg.use_freq_input, model_cfg.use_position_adapters) != (
        train_cfg.use_freq_input,
        train_cfg.use_position_adapters,
    ):
        raise ValueError("model flags disagree with the training config")
    torch.manual_seed(train_cfg.seed)
    model = SkinPAViT(model_cfg, seed=train_cfg.seed)
    side = model_cfg.backbone.image_side
    table = PatchTable(patches, train_cfg.kind, side)
    val_table = PatchTable(val_patches, train_cfg.kind, side) if val_patches else None

    opt = torch.optim.Adam(model.trainable_parameters(), lr=train_cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(train_cfg.epochs, 1))
    rng = np.random.default_rng(train_cfg.seed)
    before = model.backbone_hash()
    history = []
    steps = 0
    for epoch in range(train_cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx, partner in batches_from_units(epoch_units(table, rng), train_cfg.batch_size):
            x = to_tensor(_batch_pixels(table, idx, train_cfg, epoch), side)
            y = torch.as_tensor(table.targets[idx], dtype=torch.float32)
            pred, z = model(x, torch.as_tensor(table.position_ids[idx]))
            loss = total_loss(
                pred,
                y,
                z,
                torch.as_tensor(partner),
                tau=train_cfg.tau,
                use_symmetric_loss=train_cfg.use_symmetric_loss,
                weights=train_cfg.loss_weights,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        sched.step()
        entry = {"epoch": epoch + 1, "loss": total / max(count, 1), "seconds": time.perf_counter() - t0}
        if val_table is not None:
            preds = predict_table(model, val_table, train_cfg.eval_batch)
            entry["val_r2"] = r2(preds, val_table.values)
        history.append(entry)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in entry.items() if k != "epoch"})
        if progress is not None:
            progress(entry)
        if max_steps is not None and steps >= max_steps:
            break
    model.eval()
    return TrainResult(model, train_cfg, history, before, model.backbone_hash())


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def infer_table(model: SkinPAViT, table: PatchTable, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Scaled predictions and latents for every patch in ``table``."""
    model.eval()
    preds, latents = [], []
    for s in range(0, len(table), batch):
        idx = np.arange(s, min(s + batch, len(table)))
        x = to_tensor([table.resized(int(i)) for i in idx], table.side)
        p, z = model(x, torch.as_tensor(table.position_ids[idx]))
        preds.append(p.numpy())
        latents.append(z.numpy())
    return np.concatenate(preds), np.concatenate(latents)


def predict_table(model: SkinPAViT, table: PatchTable, batch: int = 64) -> np.ndarray:
    return np.asarray(unscale(infer_table(model, table, batch)[0], table.kind))


def predict(model: SkinPAViT, patches: Sequence[SkinPatch], kind: str, batch: int = 64) -> np.ndarray:
    """Predictions in measurement units."""
    return predict_table(model, PatchTable(patches, kind, model.cfg.backbone.image_side), batch)


def median_pair_cosine(model: SkinPAViT, patches: Sequence[SkinPatch], kind: str) -> tuple[float, int]:
    table = PatchTable(patches, kind, model.cfg.backbone.image_side)
    pairs = table.validation_pairs()
    _, z = infer_table(model, table)
    cos = pair_cosines(torch.as_tensor(z), pairs).numpy()
    return float(np.median(cos)), len(pairs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: SkinPAViT, train_cfg: TrainConfig, path: str | Path, history=None, extra=None) -> None:
    """``extra`` holds JSON-like run metadata, such as the training shot partition."""
    kind = MetricKind(train_cfg.kind)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "backbone_source": model.cfg.backbone.source,
            "backbone_sha256": model.backbone_hash(),
            "label_range": list(LABEL_RANGE[kind]),
            "kind": kind.value,
            "flags": train_cfg.flags,
            "history": history or [],
            "extra": extra or {},
            "trainable_state": model.trainable_state(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[SkinPAViT, TrainConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a Skin-PAViT checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob.get('version')} unsupported")
    model_cfg = ModelConfig.from_dict(blob["model_config"])
    train_cfg = TrainConfig.from_dict(blob["train_config"])
    model = SkinPAViT(model_cfg, seed=train_cfg.seed)
    if model.backbone_hash() != blob["backbone_sha256"]:
        raise ValueError(f"{path}: backbone {blob['backbone_source']} does not match the recorded hash")
    missing, unexpected = model.load_state_dict(blob["trainable_state"], strict=False)
    missing = [k for k in missing if not k.startswith("backbone.")]
    if missing or unexpected:
        raise ValueError(f"{path}: state mismatch (missing {missing}, unexpected {unexpected})")
    model.eval()
    return model, train_cfg, blob
