"""Multi-scale dice / consistency losses and the consistency ramp-up."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import DomainError, ShapeError

DICE_EPS = 1e-5
LAMBDA_MAX = 5.0


@dataclass
class LossBreakdown:
    supervised: float
    consistency: float
    lam: float
    total: float
    per_scale_supervised: list = field(default_factory=list)
    per_scale_consistency: list = field(default_factory=list)


def _check_same(p, g):
    if tuple(p.shape) != tuple(g.shape):
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss ``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`` over all elements."""
    _check_same(p, g)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps)


def batch_dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Dice loss computed per sample over (C, D, H, W), then averaged over the batch."""
    _check_same(p, g)
    dims = tuple(range(1, p.dim()))
    inter = (p * g).sum(dim=dims)
    loss = 1.0 - (2.0 * inter + eps) / (p.sum(dim=dims) + g.sum(dim=dims) + eps)
    return loss.mean()


def supervised_loss(preds: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]):
    """Sum of per-scale dice losses. Returns ``(total, [term_1..term_5])``.

    Inputs with a leading batch axis (5D) are scored per sample and averaged.
    """
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} predictions vs {len(targets)} targets")
    fn = batch_dice_loss if preds[0].dim() == 5 else dice_loss
    terms = [fn(p, g.to(p.dtype)) for p, g in zip(preds, targets)]
    return sum(terms), terms


def consistency_loss(s: Sequence[torch.Tensor], t: Sequence[torch.Tensor]):
    """Sum over scales of the mean squared difference. Returns ``(total, terms)``."""
    if len(s) != len(t):
        raise ShapeError(f"{len(s)} student vs {len(t)} teacher predictions")
    terms = []
    for a, b in zip(s, t):
        _check_same(a, b)
        terms.append(((a - b) ** 2).mean())
    return sum(terms), terms


def ramp_weight(i: float, i_max: float, lambda_max: float = LAMBDA_MAX) -> float:
    """Gaussian warm-up ``lambda_max * exp(-5 (1 - i / i_max)^2)``."""
    if i_max <= 0:
        raise DomainError("i_max must be positive")
    if not 0 <= i <= i_max:
        raise DomainError(f"iteration {i} outside [0, {i_max}]")
    return lambda_max * math.exp(-5.0 * (1.0 - i / i_max) ** 2)


def total_loss(sup, cons, lam: float):
    return sup + lam * cons
