"""Finite-difference verification of the training gradients.

The training objective routes decoder gradients straight through the
quantizer and stops gradients on one side of each VQ loss term, so the
raw loss value is piecewise constant in places where the analytic
gradient is not zero. The audit therefore differentiates the surrogate
the backward pass actually defines: the code assignment and every
stop-gradient operand are frozen at the base point, which yields an
ordinary smooth function whose true gradient equals the straight-through
gradient of the real loss. Central differences on that surrogate must
match backward() to tight relative tolerance in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import hierarchy, losses
from .losses import LossWeights
from .model import MaskTokenizerModel


@dataclass
class QuantizerAnchor:
    """Base-point values entering the stop-gradient sides of the loss."""

    indices: torch.Tensor
    latents: torch.Tensor
    codes: torch.Tensor

    @property
    def offset(self) -> torch.Tensor:
        return self.codes - self.latents


def capture_anchor(model: MaskTokenizerModel, batch) -> QuantizerAnchor:
    with torch.no_grad():
        latents = model.encode(batch)
        result = model.quantizer(latents)
    return QuantizerAnchor(
        indices=result.indices.clone(),
        latents=latents.clone(),
        codes=result.quantized.clone(),
    )


def training_loss(model, batch, levels, weights: LossWeights) -> torch.Tensor:
    """The real objective whose backward pass is under audit."""
    out = model(batch, levels)
    labels = hierarchy.make_labels_batch(
        torch.as_tensor(np.asarray(batch), dtype=model.config.dtype), levels
    )
    value, _, _ = losses.hml_components(out.level_logits, labels, weights)
    return losses.total_loss(value, out.codebook_loss, out.commitment_loss, weights)


def frozen_loss(model, batch, levels, weights: LossWeights, anchor: QuantizerAnchor) -> torch.Tensor:
    """The surrogate: same value and gradient at the anchor point, but an
    honest function of the parameters (no stop-gradients, no argmin)."""
    latents = model.encode(batch)
    straight = latents + anchor.offset
    level_logits = {l: model.decoder(straight[:, :l]) for l in levels.all_levels}
    labels = hierarchy.make_labels_batch(
        torch.as_tensor(np.asarray(batch), dtype=model.config.dtype), levels
    )
    value, _, _ = losses.hml_components(level_logits, labels, weights)
    codes = model.quantizer.codebook[anchor.indices.reshape(-1)]
    codebook_loss = (codes - anchor.latents.reshape(-1, latents.shape[-1])).pow(2).sum(1).mean()
    commitment_loss = (latents.reshape(-1, latents.shape[-1]) - anchor.codes.reshape(-1, latents.shape[-1])).pow(2).sum(1).mean()
    return losses.total_loss(value, codebook_loss, commitment_loss, weights)


@dataclass
class GradientCheck:
    name: str
    index: int
    analytic: float
    finite_difference: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.finite_difference), 1e-10)
        return abs(self.analytic - self.finite_difference) / scale


def audit_gradients(
    model: MaskTokenizerModel,
    batch,
    levels,
    weights: LossWeights = LossWeights(),
    epsilon: float = 1e-5,
) -> list[GradientCheck]:
    """Check one coordinate of every parameter tensor against central FD.

    Requires a double-precision model; returns one record per parameter
    group with its relative error.
    """
    if model.config.dtype != torch.float64:
        raise ValueError("gradient audit requires precision='double'")
    anchor = capture_anchor(model, batch)
    model.zero_grad()
    training_loss(model, batch, levels, weights).backward()
    checks = []
    for i, (name, param) in enumerate(model.named_parameters()):
        flat = param.detach().reshape(-1)
        index = i % flat.numel()
        analytic = param.grad.reshape(-1)[index].item()
        with torch.no_grad():
            flat[index] += epsilon
            hi = frozen_loss(model, batch, levels, weights, anchor).item()
            flat[index] -= 2 * epsilon
            lo = frozen_loss(model, batch, levels, weights, anchor).item()
            flat[index] += epsilon
        checks.append(
            GradientCheck(
                name=name,
                index=index,
                analytic=analytic,
                finite_difference=(hi - lo) / (2 * epsilon),
            )
        )
    model.zero_grad()
    return checks
