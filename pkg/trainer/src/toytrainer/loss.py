"""Segmentation training loss: soft dice plus twice the mean BCE."""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def soft_dice(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - 2*sum(p*g) / (sum(p) + sum(g) + eps) on sigmoid probabilities."""
    p = torch.sigmoid(logits)
    inter = (p * target).sum()
    return 1.0 - 2.0 * inter / (p.sum() + target.sum() + eps)


def combined_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return soft_dice(logits, target) + 2.0 * bce
