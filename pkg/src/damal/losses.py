"""
Segmentation losses on softmax probabilities.

All functions take ``probs`` shaped (batch, classes, *spatial) and integer
``target`` shaped (batch, *spatial). Reductions are means over voxels
(and over classes for the attention loss); multiply by N (or N*C) to
recover the summed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import optimize

EPS = 1e-7


@dataclass
class LossValue:
    total: torch.Tensor
    attention: Optional[torch.Tensor] = None
    dice: Optional[torch.Tensor] = None

    def terms(self) -> dict:
        out = {"total": float(self.total.detach())}
        if self.attention is not None:
            out["attention"] = float(self.attention.detach())
        if self.dice is not None:
            out["dice"] = float(self.dice.detach())
        return out


def _check(probs: torch.Tensor, target: torch.Tensor) -> None:
    if probs.dim() != target.dim() + 1:
        raise ValueError(
            f"probs {tuple(probs.shape)} must have exactly one more axis than target {tuple(target.shape)}"
        )
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")


def one_hot(target: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    oh = torch.nn.functional.one_hot(target.long(), num_classes)
    return oh.movedim(-1, 1).to(dtype)


def _true_class_prob(probs, target):
    return probs.gather(1, target.long().unsqueeze(1)).squeeze(1)


def cross_entropy(probs: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    _check(probs, target)
    p = _true_class_prob(probs, target).clamp(eps, 1 - eps)
    return -torch.log(p).mean()


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: Optional[Sequence[float]] = None, eps: float = EPS) -> torch.Tensor:
    _check(probs, target)
    if not math.isfinite(gamma) or gamma < 0:
        raise ValueError(f"gamma must be finite and >= 0, got {gamma}")
    p = _true_class_prob(probs, target).clamp(eps, 1 - eps)
    loss = -((1 - p) ** gamma) * torch.log(p)
    if alpha is not None:
        a = torch.as_tensor(alpha, dtype=probs.dtype, device=probs.device)
        if a.numel() != probs.shape[1] or torch.any(a <= 0):
            raise ValueError("alpha needs one positive weight per class")
        loss = a[target.long()] * loss
    return loss.mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor,
              include_background: bool = False, eps: float = 1e-12) -> torch.Tensor:
    """Soft Dice, averaged over classes; classes with no mass in T or P are skipped."""
    _check(probs, target)
    num_classes = probs.shape[1]
    t = one_hot(target, num_classes, probs.dtype)
    dims = [0] + list(range(2, probs.dim()))
    inter = (t * probs).sum(dims)
    denom = (t + probs).sum(dims)
    classes = torch.arange(0 if include_background else 1, num_classes)
    present = denom[classes] > eps
    if not bool(present.any()):
        return probs.sum() * 0
    per_class = 1 - 2 * inter[classes][present] / denom[classes][present]
    return per_class.mean()


def attention_loss(probs: torch.Tensor, target: torch.Tensor, weights: torch.Tensor,
                   reduction: str = "mean") -> torch.Tensor:
    """Surface-weighted squared error: W (1-P)^2 on the true class, W P^2 elsewhere."""
    _check(probs, target)
    if weights.shape != probs.shape:
        raise ValueError(f"weights {tuple(weights.shape)} must match probs {tuple(probs.shape)}")
    if torch.any(weights < 0):
        raise ValueError("attention weights must be non-negative")
    t = one_hot(target, probs.shape[1], probs.dtype)
    per_voxel_class = weights.to(probs.dtype) * (t - probs) ** 2
    if reduction == "mean":
        return per_voxel_class.mean()
    if reduction == "sum":
        return per_voxel_class.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def combined_loss(probs, target, weights, lambda_dice: float = 1.0) -> LossValue:
    if lambda_dice < 0:
        raise ValueError("lambda_dice must be >= 0")
    att = attention_loss(probs, target, weights)
    dice = dice_loss(probs, target)
    return LossValue(att + lambda_dice * dice, att, dice)


# ---------------------------------------------------------------------------
# gradient analysis for the binary T=1 case


def grad_ce(p):
    return -1.0 / np.asarray(p, dtype=np.float64)


def grad_focal(p, gamma: float):
    p = np.asarray(p, dtype=np.float64)
    return -((1 - p) ** gamma) / p + gamma * (1 - p) ** (gamma - 1) * np.log(p)


def grad_attention(p, weight: float = 1.0):
    return -2.0 * weight * (1 - np.asarray(p, dtype=np.float64))


def gradient_crossover(gamma: float, eps: float = 1e-6, xtol: float = 1e-12) -> Optional[float]:
    """Probability below which |dFocal/dP| exceeds |dCE/dP|; None if the two never cross."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")

    def gap(p):
        return abs(grad_focal(p, gamma)) - abs(grad_ce(p))

    lo, hi = eps, 1 - eps
    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo > 0 > g_hi or g_lo < 0 < g_hi):
        return None
    return float(optimize.bisect(gap, lo, hi, xtol=xtol, maxiter=500))


def gradient_table(gammas: Sequence[float], points: int = 99):
    """Rows of (gamma, P, |dCE|, |dFocal|, |dAttention|) over an open P-grid."""
    grid = np.linspace(0, 1, points + 2)[1:-1]
    rows = []
    for gamma in gammas:
        for p, gc, gf, ga in zip(grid, np.abs(grad_ce(grid)), np.abs(grad_focal(grid, gamma)),
                                 np.abs(grad_attention(grid))):
            rows.append((float(gamma), float(p), float(gc), float(gf), float(ga)))
    return rows
