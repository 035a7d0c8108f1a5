"""Vector quantization of latent token rows against a learnable codebook."""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections import Counter
from collections.abc import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn


class DecodeError(ValueError):
    """A token index falls outside the codebook."""


@dataclass
class QuantizeResult:
    """Output of one quantization pass.

    `quantized` holds the selected codebook rows bit-exactly;
    `straight_through` is the gradient-carrying surrogate fed to the
    decoder during training (identical values up to float addition).
    """

    indices: torch.Tensor
    quantized: torch.Tensor
    straight_through: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


class VectorQuantizer(nn.Module):
    """Nearest-codebook quantizer with straight-through gradients.

    Distances are squared Euclidean; exact ties resolve to the lowest
    index. Losses follow the classic VQ-VAE split: the codebook term pulls
    codes toward (stopped) encoder outputs, the commitment term pulls
    encoder outputs toward (stopped) codes. Each is the mean over rows of
    the squared distance.
    """

    def __init__(self, codebook_size: int, dim: int):
        super().__init__()
        if codebook_size < 1:
            raise ValueError(f"codebook_size must be >= 1, got {codebook_size}")
        self.codebook_size = codebook_size
        self.dim = dim
        codebook = torch.empty(codebook_size, dim)
        nn.init.uniform_(codebook, -1.0 / codebook_size, 1.0 / codebook_size)
        self.codebook = nn.Parameter(codebook)

    def forward(self, latents: torch.Tensor) -> QuantizeResult:
        if latents.shape[-1] != self.dim:
            raise ValueError(
                f"latent dim {latents.shape[-1]} != codebook dim {self.dim}"
            )
        flat = latents.reshape(-1, self.dim)
        # ||z - e||^2 = ||z||^2 + ||e||^2 - 2 z.e, computed once per codebook row
        distances = (
            flat.pow(2).sum(1, keepdim=True)
            + self.codebook.pow(2).sum(1)
            - 2.0 * flat @ self.codebook.t()
        )
        indices = distances.argmin(dim=1)
        hard = self.codebook[indices]
        codebook_loss = (hard - flat.detach()).pow(2).sum(1).mean()
        commitment_loss = (flat - hard.detach()).pow(2).sum(1).mean()
        straight = flat + (hard - flat).detach()
        shape = latents.shape
        return QuantizeResult(
            indices=indices.reshape(shape[:-1]),
            quantized=hard.detach().reshape(shape),
            straight_through=straight.reshape(shape),
            codebook_loss=codebook_loss,
            commitment_loss=commitment_loss,
        )

    def bootstrap_from(self, latents: torch.Tensor, seed: int) -> None:
        """Re-seed the codebook from observed latent rows (plus a little
        seeded noise so repeated rows stay distinct).

        The default uniform init sits orders of magnitude below the latent
        scale and takes thousands of steps to be re-captured; seeding codes
        inside the actual latent cloud gives every code a live cluster from
        step 0. Deterministic for a fixed (latents, seed).
        """
        rows = latents.detach().reshape(-1, self.dim)
        rng = np.random.default_rng([seed, 0xC0DE])
        picks = torch.as_tensor(rng.choice(rows.shape[0], size=self.codebook_size, replace=True))
        noise = torch.as_tensor(
            rng.normal(0.0, 1.0, size=(self.codebook_size, self.dim)), dtype=rows.dtype
        )
        scale = 0.05 * rows.std()
        with torch.no_grad():
            self.codebook.copy_(rows[picks] + scale * noise)

    def lookup(self, indices: Sequence[int] | torch.Tensor) -> torch.Tensor:
        """Copy codebook rows for a token sequence, in order."""
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.numel() == 0:
            raise DecodeError("token sequence must be non-empty")
        flat = idx.reshape(-1)
        bad = (flat < 0) | (flat >= self.codebook_size)
        if bad.any():
            pos = int(bad.nonzero()[0])
            raise DecodeError(
                f"token index {int(flat[pos])} out of range [0, {self.codebook_size}) "
                f"at position {pos}"
            )
        return self.codebook[idx].detach()


@dataclass
class UsageStats:
    counts: np.ndarray
    perplexity: float


def usage_stats(sequences: Iterable[Sequence[int]], codebook_size: int) -> UsageStats:
    """Code histogram and exp-entropy perplexity over token sequences.

    Perplexity is 1.0 when every token is the same code and equals the
    codebook size under a uniform empirical distribution.
    """
    counts = np.zeros(codebook_size, dtype=np.int64)
    tally = Counter()
    for seq in sequences:
        tally.update(int(t) for t in seq)
    for code, c in tally.items():
        counts[code] = c
    total = counts.sum()
    if total == 0:
        return UsageStats(counts=counts, perplexity=float("nan"))
    probs = counts[counts > 0] / total
    entropy = -(probs * np.log(probs)).sum()
    return UsageStats(counts=counts, perplexity=float(math.exp(entropy)))
