"""Symmetric contrastive loss, the combined objective, and label scaling."""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel import MIDLINE_IDS, MetricKind

DEFAULT_TAU = 0.2

# measurement ranges mapped onto [0, 1]
LABEL_RANGE = {MetricKind.TEWL: (0.0, 30.0), MetricKind.SH: (0.0, 90.0)}


def _range(kind) -> tuple[float, float]:
    return LABEL_RANGE[MetricKind(kind)]


def scale_label(y, kind):
    """Affine map of a measurement to [0, 1]; values outside the range are clamped with a warning."""
    lo, hi = _range(kind)
    arr = np.asarray(y, dtype=float)
    if np.any(arr < lo) or np.any(arr > hi):
        warnings.warn(f"{MetricKind(kind).value} label outside [{lo}, {hi}] clamped", stacklevel=2)
    out = (np.clip(arr, lo, hi) - lo) / (hi - lo)
    return float(out) if out.ndim == 0 else out


def unscale(y_hat, kind):
    lo, hi = _range(kind)
    out = lo + np.asarray(y_hat, dtype=float) * (hi - lo)
    return float(out) if out.ndim == 0 else out


def _check_latents(latents: torch.Tensor) -> None:
    if latents.dim() != 2 or latents.shape[0] < 2:
        raise ValueError("contrastive loss needs a set of at least two latents")
    if torch.any(latents.norm(dim=1) == 0):
        raise ValueError("zero-norm latent has no cosine similarity")


def contrastive_terms(latents: torch.Tensor, partner: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Per-anchor loss ``-log(exp(s_ip / tau) / sum_{k != i} exp(s_ik / tau))``.

    ``latents`` is the whole set (N, D); ``partner[i]`` is the index of i's
    symmetric counterpart, or -1 for samples without one (their term is 0).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _check_latents(latents)
    partner = torch.as_tensor(partner, dtype=torch.long, device=latents.device)
    n = latents.shape[0]
    if partner.shape != (n,):
        raise ValueError("one partner index per latent")
    has = partner >= 0
    if torch.any(partner >= n) or torch.any(partner[has] == torch.arange(n, device=latents.device)[has]):
        raise ValueError("partner index must point at another latent in the set")
    unit = F.normalize(latents, dim=1)
    logits = unit @ unit.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=latents.device)
    log_denom = torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1)
    pos = logits.gather(1, partner.clamp(min=0).unsqueeze(1)).squeeze(1)
    return torch.where(has, log_denom - pos, torch.zeros_like(pos))


def contrastive_loss(z_i: torch.Tensor, z_partner: torch.Tensor, others: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Loss for one anchor ``z_i`` with positive ``z_partner``; ``others`` are the rest of the set."""
    others = others.reshape(-1, z_i.shape[-1]) if others.numel() else z_i.new_zeros(0, z_i.shape[-1])
    latents = torch.cat([z_i.view(1, -1), z_partner.view(1, -1), others], dim=0)
    partner = torch.full((latents.shape[0],), -1, dtype=torch.long)
    partner[0] = 1
    return contrastive_terms(latents, partner, tau)[0]


def total_loss(
    preds: torch.Tensor,
    targets: torch.Tensor,
    latents: torch.Tensor,
    partner: torch.Tensor,
    tau: float = DEFAULT_TAU,
    use_symmetric_loss: bool = True,
    weights: tuple[float, float] = (1.0, 1.0),
    position_ids=None,
) -> torch.Tensor:
    """Batch mean of ``contrastive + squared error`` with labels already in [0, 1].

    Samples with ``partner == -1`` contribute squared error only; when
    ``position_ids`` is given they must be midline positions.
    """
    sq = (targets.to(preds.dtype) - preds) ** 2
    if not use_symmetric_loss:
        return weights[1] * sq.mean()
    if position_ids is not None:
        lonely = [int(d) for d, j in zip(position_ids, partner) if int(j) < 0 and int(d) not in MIDLINE_IDS]
        if lonely:
            raise ValueError(f"unpaired non-midline positions in batch: {sorted(set(lonely))}")
    con = contrastive_terms(latents, partner, tau)
    return (weights[0] * con + weights[1] * sq).mean()


def pair_cosines(latents: torch.Tensor, pairs) -> torch.Tensor:
    pairs = torch.as_tensor(pairs, dtype=torch.long).view(-1, 2)
    unit = F.normalize(latents, dim=1)
    return (unit[pairs[:, 0]] * unit[pairs[:, 1]]).sum(dim=1)
