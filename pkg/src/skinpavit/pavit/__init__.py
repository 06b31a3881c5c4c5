"""Prompt-adapted frozen ViT for skin metric regression."""

from .losses import contrastive_loss, contrastive_terms, scale_label, total_loss, unscale
from .model import (
    PROFILES,
    BackboneConfig,
    ConfigError,
    ModelConfig,
    PTMConfig,
    SkinPAViT,
    fast_config,
    tiny_config,
    toy_config,
)
from .train import ABLATION_CONFIGS, TrainConfig, load_checkpoint, predict, save_checkpoint, train
