"""Compound Dice + cross-entropy objectives.

* ``standard``: multi-class cross-entropy + Dice on the softmax foreground
  channel (class 1).
* ``bce``: binary cross-entropy on a single logit channel + Dice on its
  sigmoid.

Both terms are summed with weight 1. The Dice term uses smoothing
``eps = 1``, reduced per sample and then averaged over the batch, so an
empty mask predicted empty scores a loss of 0.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeError, VariantMismatch

DICE_EPS = 1.0


def _as_mask(y: torch.Tensor) -> torch.Tensor:
    if y.dim() == 4 and y.shape[1] == 1:
        y = y[:, 0]
    return y


def dice_loss(probs: torch.Tensor, y: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`` per sample, batch-averaged.

    ``probs`` is (B, H, W) or (B, 1, H, W); ``y`` holds labels in {0, 1}.
    """
    probs, y = _as_mask(probs), _as_mask(y)
    if probs.shape != y.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} and mask {tuple(y.shape)} differ")
    y = y.to(probs.dtype)
    inter = (probs * y).flatten(1).sum(1)
    denom = probs.flatten(1).sum(1) + y.flatten(1).sum(1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def ce_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 4 or logits.shape[1] < 2:
        raise ShapeError(f"cross-entropy needs (B, C>=2, H, W) logits, got {tuple(logits.shape)}")
    y = _as_mask(y)
    if logits.shape[0] != y.shape[0] or logits.shape[2:] != y.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} and mask {tuple(y.shape)} differ")
    return F.cross_entropy(logits, y.long())


def bce_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 4 or logits.shape[1] != 1:
        raise ShapeError(f"BCE needs (B, 1, H, W) logits, got {tuple(logits.shape)}")
    y = _as_mask(y)
    z = logits[:, 0]
    if z.shape != y.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and mask {tuple(y.shape)} differ")
    # max(z, 0) - z y + log(1 + exp(-|z|))
    return F.binary_cross_entropy_with_logits(z, y.to(z.dtype))


def foreground_probs(logits: torch.Tensor, variant: str) -> torch.Tensor:
    if variant == "bce":
        if logits.shape[1] != 1:
            raise VariantMismatch(f"bce variant expects 1 logit channel, got {logits.shape[1]}")
        return torch.sigmoid(logits[:, 0])
    if variant == "standard":
        if logits.shape[1] < 2:
            raise VariantMismatch(f"standard variant expects >= 2 logit channels, got {logits.shape[1]}")
        return logits.softmax(1)[:, 1]
    raise VariantMismatch(f"unknown loss variant {variant!r}")


def compound_loss(logits: torch.Tensor, y: torch.Tensor, variant: str) -> torch.Tensor:
    probs = foreground_probs(logits, variant)
    if variant == "bce":
        return bce_loss(logits, y) + dice_loss(probs, y)
    return ce_loss(logits, y) + dice_loss(probs, y)
