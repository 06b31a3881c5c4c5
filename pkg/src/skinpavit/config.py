"""Run configuration: a versioned TOML file with one table per stage.

Unknown sections or keys are rejected, and every referenced path is checked
when the config is validated, so a run either fails before any compute or
has a fully resolved configuration.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .pavit.model import PROFILES, ModelConfig
from .pavit.train import TrainConfig
from .synthgen import SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1


class ConfigValidationError(ValueError):
    pass


@dataclass
class AugmentSection:
    lighting: bool = True
    geometric: bool = True


@dataclass
class ModelSection:
    profile: str = "fast"
    backbone_source: str = "random:0"


@dataclass
class EvalSection:
    bin_width: float = 1.0
    n_val_panelists: int = 4
    split_seed: int = 0
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class HeatmapSection:
    alpha: float = 0.6
    legend: bool = True


# the fast profile learns at a much higher rate than the full-size backbone
DESK_TRAIN_DEFAULTS = {"lr": 1e-3, "epochs": 30}

# train keys owned by other sections
_TRAIN_EXCLUDED = {"use_augmentation", "use_lighting_augmentation", "seed"}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs"
    synth: dict = field(default_factory=dict)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN_DEFAULTS))
    eval: EvalSection = field(default_factory=EvalSection)
    heatmap: HeatmapSection = field(default_factory=HeatmapSection)

    # -- resolved objects ---------------------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{"seed": self.seed, **self.synth})

    def train_config(self, **overrides) -> TrainConfig:
        kw = {
            "seed": self.seed,
            "kind": self.synth.get("kind", "TEWL"),
            **self.train,
            "use_augmentation": self.augment.geometric,
            "use_lighting_augmentation": self.augment.lighting,
        }
        kw.update(overrides)
        return TrainConfig(**kw)

    def model_config(self) -> ModelConfig:
        base = PROFILES[self.model.profile]()
        return replace(base, backbone=replace(base.backbone, source=self.model.backbone_source))

    def validate(self) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigValidationError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if self.model.profile not in PROFILES:
            raise ConfigValidationError(f"unknown model profile {self.model.profile!r}; choose from {sorted(PROFILES)}")
        src = self.model.backbone_source
        if src.startswith("file:") and not Path(src[5:]).is_file():
            raise ConfigValidationError(f"backbone weights {src[5:]} not found")
        if not 0.0 <= self.heatmap.alpha <= 1.0:
            raise ConfigValidationError("heatmap.alpha must lie in [0, 1]")
        if not self.eval.bin_width > 0:
            raise ConfigValidationError("eval.bin_width must be positive")
        if not self.eval.seeds:
            raise ConfigValidationError("eval.seeds must list at least one seed")
        try:
            self.synth_config()
            self.train_config()
            self.model_config()
        except (TypeError, ValueError) as e:
            raise ConfigValidationError(str(e)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "augment": AugmentSection,
    "model": ModelSection,
    "eval": EvalSection,
    "heatmap": HeatmapSection,
}


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigValidationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def config_from_dict(raw: dict) -> RunConfig:
    top = {"version", "seed", "output_dir", "synth", "train", *_SECTIONS}
    _check_keys("top level", raw, top)
    kw = {k: raw[k] for k in ("version", "seed", "output_dir") if k in raw}
    synth = dict(raw.get("synth", {}))
    _check_keys("synth", synth, {f.name for f in fields(SynthConfig)} - {"seed"})
    train = {**DESK_TRAIN_DEFAULTS, **raw.get("train", {})}
    _check_keys("train", train, {f.name for f in fields(TrainConfig)} - _TRAIN_EXCLUDED)
    for name, cls in _SECTIONS.items():
        sec = dict(raw.get(name, {}))
        _check_keys(name, sec, {f.name for f in fields(cls)})
        kw[name] = cls(**sec)
    return RunConfig(synth=synth, train=train, **kw).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigValidationError(f"{path}: {e}") from None
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if hasattr(v, "value"):
        v = v.value
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg: RunConfig) -> str:
    """TOML text for ``cfg``; only flat sections, so a small writer suffices."""
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(d[k])}" for k in ("version", "seed", "output_dir")]
    for section in ("synth", "augment", "model", "train", "eval", "heatmap"):
        lines += ["", f"[{section}]"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in d[section].items()]
    return "\n".join(lines) + "\n"
