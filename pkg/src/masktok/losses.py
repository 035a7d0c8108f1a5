"""BCE, soft Dice, per-level mask loss, and their multi-level aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_codebook: float = 1.0
    w_commit: float = 0.25
    dice_epsilon: float = 1.0
    bce_clamp: float = 1e-6

    def __post_init__(self):
        for name in ("w_bce", "w_dice", "w_codebook", "w_commit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")
        if not 0.0 < self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in (0, 0.5)")


def _pair(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return pred, target


def bce_loss(pred, target, clamp: float = 1e-6) -> torch.Tensor:
    """Mean binary cross entropy with probabilities clamped away from {0,1}."""
    pred, target = _pair(pred, target)
    p = pred.clamp(clamp, 1.0 - clamp)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def dice_loss(pred, target, epsilon: float = 1.0) -> torch.Tensor:
    """Soft Dice over the grid dims: 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps).

    Leading batch dimensions, when present, are averaged after the
    per-grid score.
    """
    pred, target = _pair(pred, target)
    dims = (-2, -1) if pred.ndim >= 2 else (-1,)
    inter = (pred * target).sum(dims)
    sums = pred.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + epsilon) / (sums + epsilon)).mean()


def level_loss(logits, label, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Mask loss at one granularity level: weighted BCE + Dice on sigmoid(logits)."""
    logits, label = _pair(logits, label)
    prob = torch.sigmoid(logits)
    return weights.w_bce * bce_loss(prob, label, weights.bce_clamp) + weights.w_dice * dice_loss(
        prob, label, weights.dice_epsilon
    )


def hml_components(
    per_level_logits: dict[int, torch.Tensor],
    labels: dict[int, torch.Tensor],
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Hierarchical mask loss plus its summed BCE and Dice parts."""
    if set(per_level_logits) != set(labels):
        raise ValueError(
            f"level sets differ: logits {sorted(per_level_logits)} vs labels {sorted(labels)}"
        )
    total = bce_sum = dice_sum = None
    for level in sorted(per_level_logits):
        prob = torch.sigmoid(torch.as_tensor(per_level_logits[level]))
        b = bce_loss(prob, labels[level], weights.bce_clamp)
        d = dice_loss(prob, labels[level], weights.dice_epsilon)
        term = weights.w_bce * b + weights.w_dice * d
        total = term if total is None else total + term
        bce_sum = b if bce_sum is None else bce_sum + b
        dice_sum = d if dice_sum is None else dice_sum + d
    return total, bce_sum, dice_sum


def hml(
    per_level_logits: dict[int, torch.Tensor],
    labels: dict[int, torch.Tensor],
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Hierarchical mask loss: unweighted sum of level_loss over all levels."""
    return hml_components(per_level_logits, labels, weights)[0]


def _scalar(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def total_loss(hml_value, codebook_loss, commitment_loss, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Training objective: HML plus weighted quantizer terms."""
    return (
        _scalar(hml_value)
        + weights.w_codebook * _scalar(codebook_loss)
        + weights.w_commit * _scalar(commitment_loss)
    )
