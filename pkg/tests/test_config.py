import pytest

from skinpavit.config import (
    ConfigValidationError,
    RunConfig,
    config_from_dict,
    dump_config,
    load_config,
)


def test_defaults_validate():
    cfg = load_config(None)
    assert cfg.model.profile == "fast"
    assert cfg.train_config().use_lighting_augmentation
    assert cfg.model_config().backbone.source == "random:0"


def test_roundtrip_through_toml(tmp_path):
    raw = {
        "seed": 7,
        "synth": {"n_panelists": 4, "kind": "SH", "label_range": [5.0, 80.0]},
        "augment": {"lighting": False},
        "model": {"profile": "tiny"},
        "train": {"epochs": 3, "lr": 0.001, "tau": 0.2},
        "eval": {"seeds": [0, 1]},
        "heatmap": {"alpha": 0.5},
    }
    cfg = config_from_dict(raw)
    path = tmp_path / "run.toml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    tc = again.train_config()
    assert (tc.epochs, tc.tau, tc.kind, tc.seed) == (3, 0.2, "SH", 7)
    assert not tc.use_lighting_augmentation
    assert again.synth_config().seed == 7


def test_overrides_win():
    cfg = RunConfig(train={"epochs": 3})
    assert cfg.train_config(epochs=9).epochs == 9


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"bogus": 1}, "top level"),
        ({"synth": {"panelists": 3}}, r"\[synth\]"),
        ({"train": {"use_augmentation": False}}, r"\[train\]"),
        ({"model": {"size": 1}}, r"\[model\]"),
        ({"version": 2}, "version"),
        ({"model": {"profile": "huge"}}, "profile"),
        ({"model": {"backbone_source": "file:/nonexistent/w.pt"}}, "not found"),
        ({"heatmap": {"alpha": 1.5}}, "alpha"),
        ({"eval": {"seeds": []}}, "seeds"),
        ({"train": {"tau": -1.0}}, "temperature"),
        ({"synth": {"texture_band": [12, 8]}}, "texture_band"),
    ],
)
def test_invalid_configs_rejected(raw, match):
    with pytest.raises(ConfigValidationError, match=match):
        config_from_dict(raw)


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = = 3\n")
    with pytest.raises(ConfigValidationError):
        load_config(path)
