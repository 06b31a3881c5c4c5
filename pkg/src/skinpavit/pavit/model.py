"""Skin-PAViT: a frozen ViT steered by texture and position prompts.

Every transformer layer sees ``[cls, prompts, patch tokens]``; the prompts are
rebuilt for each layer from the Prior Texture Module output (49 tokens) and
the position one-hot (1 token), and their outputs are dropped before the next
layer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from ..datamodel import N_POSITIONS
from ..spectral import RHO_HIGH, RHO_LOW, bandpass_mask

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PTM_STAGES = 5
PTM_GRID = 7
N_TEXTURE_PROMPTS = PTM_GRID * PTM_GRID


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 224
    patch_size: int = 16
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    # "random:<seed>" builds a deterministic random backbone, "file:<path>" loads a state dict
    source: str = "random:0"
    frozen: bool = True

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"token dim {self.dim} not divisible by {self.heads} heads")
        if not self.frozen:
            raise ConfigError("the backbone is always frozen")
        if not (self.source.startswith("random:") or self.source.startswith("file:")):
            raise ConfigError(f"unknown backbone source {self.source!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass(frozen=True)
class PTMConfig:
    channels: tuple[int, ...] = (48, 96, 192, 384, 768)
    in_channels: int = 6
    # finish with an adaptive 7x7 pool so sides other than 224 work
    adaptive_pool: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != PTM_STAGES:
            raise ConfigError(f"PTM needs {PTM_STAGES} stages, got {len(self.channels)}")
        if self.in_channels != 6:
            raise ConfigError("PTM input is RGB plus a 3-channel texture image")

    @property
    def out_dim(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ptm: PTMConfig = field(default_factory=PTMConfig)
    use_freq_input: bool = True
    use_position_adapters: bool = True
    rho_low: float = RHO_LOW
    rho_high: float = RHO_HIGH

    def __post_init__(self):
        side = self.backbone.image_side
        if not self.ptm.adaptive_pool and side != PTM_GRID * 2**PTM_STAGES:
            raise ConfigError(
                f"image side {side} does not halve to a {PTM_GRID}x{PTM_GRID} grid in {PTM_STAGES} stages; "
                f"use side {PTM_GRID * 2 ** PTM_STAGES} or adaptive_pool"
            )
        if self.ptm.adaptive_pool and side < PTM_GRID * 2**PTM_STAGES // 4:
            raise ConfigError(f"image side {side} too small for the texture module")

    @property
    def n_prompts(self) -> int:
        return N_TEXTURE_PROMPTS + (1 if self.use_position_adapters else 0)

    @property
    def seq_len(self) -> int:
        return 1 + self.backbone.n_patches + self.n_prompts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = BackboneConfig(**d.pop("backbone"))
        ptm = d.pop("ptm")
        ptm = PTMConfig(**{**ptm, "channels": tuple(ptm["channels"])})
        return cls(backbone=bb, ptm=ptm, **d)

    def with_flags(self, **flags) -> "ModelConfig":
        return replace(self, **flags)


def full_config(**flags) -> ModelConfig:
    return ModelConfig(**flags)


def toy_config(**flags) -> ModelConfig:
    """Side 224 with D = D' = 64 and L = 4: every shape contract, CPU speed."""
    bb = BackboneConfig(image_side=224, patch_size=16, depth=4, dim=64, heads=4)
    return ModelConfig(backbone=bb, ptm=PTMConfig(channels=(4, 8, 16, 32, 64)), **flags)


def fast_config(**flags) -> ModelConfig:
    """Toy widths at side 112 with an adaptive final pool; used for training experiments."""
    bb = BackboneConfig(image_side=112, patch_size=16, depth=4, dim=64, heads=4)
    return ModelConfig(backbone=bb, ptm=PTMConfig(channels=(4, 8, 16, 32, 64), adaptive_pool=True), **flags)


def tiny_config(**flags) -> ModelConfig:
    bb = BackboneConfig(image_side=112, patch_size=16, depth=2, dim=16, heads=2)
    return ModelConfig(backbone=bb, ptm=PTMConfig(channels=(2, 4, 4, 8, 8), adaptive_pool=True), **flags)


PROFILES = {"full": full_config, "toy": toy_config, "fast": fast_config, "tiny": tiny_config}


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViTBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.n_patches, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim, eps=1e-6)

    def init_random(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                elif p.dim() >= 2 and not name.endswith(("cls_token", "pos_embed")):
                    fan_in = p[0].numel()
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, tok], dim=1) + self.pos_embed


def build_backbone(cfg: BackboneConfig) -> ViTBackbone:
    net = ViTBackbone(cfg)
    kind, _, arg = cfg.source.partition(":")
    if kind == "random":
        net.init_random(int(arg))
    else:
        state = torch.load(arg, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def module_hash(module: nn.Module) -> str:
    """sha256 over the raw bytes of every parameter and buffer, in name order."""
    h = hashlib.sha256()
    tensors = dict(module.named_parameters())
    tensors.update(dict(module.named_buffers()))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# prompt modules
# ---------------------------------------------------------------------------


class PriorTextureModule(nn.Module):
    """Five conv3x3 / BN / ReLU / max-pool stages down to a 7x7 grid."""

    def __init__(self, cfg: PTMConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = cfg.in_channels
        for c in cfg.channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c
        if cfg.adaptive_pool:
            layers.append(nn.AdaptiveAvgPool2d(PTM_GRID))
        self.stages = nn.Sequential(*layers)

    def forward(self, x6: torch.Tensor) -> torch.Tensor:
        if x6.dim() != 4 or x6.shape[1] != self.cfg.in_channels:
            raise ValueError(f"texture module expects (B, {self.cfg.in_channels}, H, W), got {tuple(x6.shape)}")
        out = self.stages(x6)
        if out.shape[-2:] != (PTM_GRID, PTM_GRID):
            raise ValueError(f"texture grid came out {tuple(out.shape[-2:])}, expected 7x7")
        return out

    def trace(self, side: int) -> list[int]:
        sides = [side]
        for _ in range(PTM_STAGES):
            sides.append(sides[-1] // 2)
        if self.cfg.adaptive_pool:
            sides.append(PTM_GRID)
        return sides


class TextureAdapters(nn.Module):
    """One bias-free D' -> D map per layer, applied to the 49 flattened grid cells."""

    def __init__(self, depth: int, in_dim: int, dim: int):
        super().__init__()
        self.maps = nn.ModuleList(nn.Linear(in_dim, dim, bias=False) for _ in range(depth))

    @staticmethod
    def flatten(grid: torch.Tensor) -> torch.Tensor:
        # (B, D', 7, 7) -> (B, 49, D'), row-major over the grid
        return grid.flatten(2).transpose(1, 2)

    def forward(self, grid: torch.Tensor, layer: int) -> torch.Tensor:
        return self.maps[layer](self.flatten(grid))


class PositionAdapters(nn.Module):
    """One 37 -> D affine map per layer on the position one-hot."""

    def __init__(self, depth: int, dim: int):
        super().__init__()
        self.maps = nn.ModuleList(nn.Linear(N_POSITIONS, dim) for _ in range(depth))

    @staticmethod
    def one_hot(position_ids: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        position_ids = torch.as_tensor(position_ids)
        if position_ids.numel() and (position_ids.min() < 1 or position_ids.max() > N_POSITIONS):
            raise ValueError(f"position ids must lie in 1..{N_POSITIONS}")
        return F.one_hot(position_ids.long() - 1, N_POSITIONS).to(dtype)

    def forward(self, position_ids: torch.Tensor, layer: int) -> torch.Tensor:
        w = self.maps[layer].weight
        return self.maps[layer](self.one_hot(position_ids, w.dtype).to(w.device)).unsqueeze(1)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class SkinPAViT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        self.backbone = build_backbone(bb)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.ptm = PriorTextureModule(cfg.ptm)
            self.texture_adapters = TextureAdapters(bb.depth, cfg.ptm.out_dim, bb.dim)
            self.position_adapters = PositionAdapters(bb.depth, bb.dim) if cfg.use_position_adapters else None
            self.head = nn.Linear(bb.dim, 1)
        mask = bandpass_mask(cfg.rho_low, cfg.rho_high, bb.image_side, bb.image_side).values
        self.register_buffer("freq_mask", torch.as_tensor(mask, dtype=torch.float32), persistent=False)
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.seq_trace: list[int] = []

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()  # frozen; no dropout / batch statistics to update anyway
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def trainable_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def backbone_hash(self) -> str:
        return module_hash(self.backbone)

    def texture(self, x: torch.Tensor) -> torch.Tensor:
        """Band-pass texture of each channel, matching ``spectral.extract_texture``."""
        f = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))
        f = f * self.freq_mask.to(f.real.dtype)
        return torch.fft.ifft2(torch.fft.ifftshift(f, dim=(-2, -1))).real

    def ptm_input(self, x: torch.Tensor) -> torch.Tensor:
        tex = self.texture(x) if self.cfg.use_freq_input else torch.zeros_like(x)
        return torch.cat([x, tex], dim=1)

    def forward(self, x: torch.Tensor, position_ids) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: normalized RGB (B, 3, S, S). Returns (prediction in [0, 1], latent)."""
        side = self.cfg.backbone.image_side
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (side, side):
            raise ValueError(f"expected input (B, 3, {side}, {side}); resize patches first, got {tuple(x.shape)}")
        position_ids = torch.as_tensor(position_ids).view(-1)
        if position_ids.shape[0] != x.shape[0]:
            raise ValueError("one position id per patch")
        grid = self.ptm(self.ptm_input(x))
        tokens = self.backbone.embed(x)
        self.seq_trace = []
        for layer, block in enumerate(self.backbone.blocks):
            prompts = self.texture_adapters(grid, layer)
            if self.position_adapters is not None:
                prompts = torch.cat([prompts, self.position_adapters(position_ids, layer)], dim=1)
            n_prompts = prompts.shape[1]
            seq = torch.cat([tokens[:, :1], prompts, tokens[:, 1:]], dim=1)
            self.seq_trace.append(seq.shape[1])
            out = block(seq)
            tokens = torch.cat([out[:, :1], out[:, 1 + n_prompts :]], dim=1)
        latent = self.backbone.norm(tokens[:, 0])
        pred = torch.sigmoid(self.head(latent)).squeeze(-1)
        return pred, latent


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------


def resize_patch(pixels: np.ndarray, side: int) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.shape[:2] == (side, side):
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((side, side), Image.BICUBIC))


def to_tensor(pixels_batch, side: int, dtype=torch.float32) -> torch.Tensor:
    """uint8 HxWx3 patches -> ImageNet-normalized (B, 3, side, side)."""
    arr = np.stack([resize_patch(p, side) for p in pixels_batch]).astype(np.float32) / 255.0
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=dtype).view(1, 3, 1, 1)
    return (t - mean) / std
