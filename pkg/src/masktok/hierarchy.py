"""Multi-grained blurred label construction and granularity-level sampling.

Coarse supervision targets are the source mask convolved with an isotropic
Gaussian whose width shrinks as the level rises: sigma(l) = 100/(l+1) - 2.
The full level K carries no blur. Besides the full level, training samples
three partial levels with probability proportional to 1/(l+8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.ndimage import correlate1d

MAX_LEVEL = 32
PARTIAL_LEVEL_COUNT = 3


def sigma_for_level(level: int, max_level: int = MAX_LEVEL) -> float:
    """Blur width in pixels for a partial level, 1 <= level < max_level."""
    if not 1 <= level < max_level:
        raise ValueError(f"level must lie in [1, {max_level - 1}], got {level}")
    return 100.0 / (level + 1) - 2.0


@lru_cache(maxsize=256)
def gaussian_kernel_1d(sigma: float, max_side: int | None = None) -> np.ndarray:
    """Discretized 1D Gaussian on an odd window, normalized to sum 1.

    The window side is 2*ceil(3*sigma) + 1, clipped to the largest odd
    value <= max_side when given (float64, read-only).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    side = 2 * math.ceil(3 * sigma) + 1
    if max_side is not None and side > max_side:
        side = max_side if max_side % 2 == 1 else max_side - 1
    radius = side // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    kernel.setflags(write=False)
    return kernel


def gaussian_kernel(sigma: float, max_side: int | None = None) -> np.ndarray:
    """Isotropic 2D Gaussian kernel as the outer product of the 1D kernel."""
    k = gaussian_kernel_1d(sigma, max_side)
    return np.outer(k, k)


@dataclass(frozen=True)
class LevelSample:
    """Three distinct partial levels (in draw order) plus the full level."""

    partial_levels: tuple[int, ...]
    max_level: int = MAX_LEVEL
    includes_full: bool = True

    def __post_init__(self):
        if len(set(self.partial_levels)) != len(self.partial_levels):
            raise ValueError(f"partial levels must be distinct, got {self.partial_levels}")
        for l in self.partial_levels:
            if not 1 <= l < self.max_level:
                raise ValueError(
                    f"partial level {l} outside [1, {self.max_level - 1}]"
                )

    @property
    def all_levels(self) -> tuple[int, ...]:
        return self.partial_levels + (self.max_level,)


def level_weights(max_level: int = MAX_LEVEL) -> np.ndarray:
    """Unnormalized sampling weight 1/(l+8) for each level in [1, max_level)."""
    levels = np.arange(1, max_level, dtype=np.float64)
    return 1.0 / (levels + 8.0)


def draw_level(rng: np.random.Generator, max_level: int = MAX_LEVEL, exclude: tuple[int, ...] = ()) -> int:
    """One weighted draw from the partial levels, skipping excluded ones."""
    levels = np.arange(1, max_level)
    weights = level_weights(max_level)
    if exclude:
        keep = ~np.isin(levels, exclude)
        levels, weights = levels[keep], weights[keep]
    return int(rng.choice(levels, p=weights / weights.sum()))


def sample_partial_levels(
    rng: np.random.Generator,
    max_level: int = MAX_LEVEL,
    count: int = PARTIAL_LEVEL_COUNT,
) -> LevelSample:
    """Draw `count` distinct partial levels without replacement.

    Each sequential draw is proportional to 1/(l+8) over the levels still
    available; the full level is always included.
    """
    if max_level < count + 2:
        raise ValueError(f"max_level {max_level} too small for {count} partial levels")
    drawn: list[int] = []
    for _ in range(count):
        drawn.append(draw_level(rng, max_level, exclude=tuple(drawn)))
    return LevelSample(partial_levels=tuple(drawn), max_level=max_level)


def blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirror-reflective border handling."""
    kernel = gaussian_kernel_1d(sigma, max_side=min(mask.shape))
    out = correlate1d(np.asarray(mask, dtype=np.float64), kernel, axis=0, mode="mirror")
    return correlate1d(out, kernel, axis=1, mode="mirror")


def make_labels(mask: np.ndarray, levels: LevelSample) -> dict[int, np.ndarray]:
    """Per-level supervision targets for one mask.

    Partial levels are blurred with their schedule sigma; the full level
    is the mask itself, bit-identical.
    """
    labels = {l: blur(mask, sigma_for_level(l, levels.max_level)) for l in levels.partial_levels}
    labels[levels.max_level] = np.asarray(mask, dtype=np.float64).copy()
    return labels


@lru_cache(maxsize=256)
def blur_operator(sigma: float, side: int) -> np.ndarray:
    """Dense (side, side) matrix applying the 1D mirror-padded blur.

    Row i sums kernel taps over mirror-reflected indices, so M @ x equals
    correlate1d(x, kernel, mode='mirror') up to summation order; the 2D
    blur is then M @ X @ M.T, which runs as two BLAS matmuls.
    """
    kernel = gaussian_kernel_1d(sigma, max_side=side)
    radius = len(kernel) // 2
    op = np.zeros((side, side), dtype=np.float64)
    period = 2 * side - 2 if side > 1 else 1
    for offset, weight in enumerate(kernel, start=-radius):
        for i in range(side):
            j = (i + offset) % period
            if j >= side:
                j = period - j
            op[i, j] += weight
    op.setflags(write=False)
    return op


_TORCH_OP_CACHE: dict[tuple[float, int, torch.dtype], torch.Tensor] = {}


def blur_batch(masks: torch.Tensor, sigma: float) -> torch.Tensor:
    """Batched mirror-padded Gaussian blur of (B, H, W) masks."""
    b, h, w = masks.shape
    if h != w:
        raise ValueError(f"masks must be square, got {h}x{w}")
    key = (sigma, h, masks.dtype)
    if key not in _TORCH_OP_CACHE:
        _TORCH_OP_CACHE[key] = torch.from_numpy(np.array(blur_operator(sigma, h))).to(masks.dtype)
    op = _TORCH_OP_CACHE[key]
    return torch.matmul(torch.matmul(op, masks), op.t())


def make_labels_batch(masks: torch.Tensor, levels: LevelSample) -> dict[int, torch.Tensor]:
    """Batched `make_labels` over (B, H, W) masks, used by the trainer."""
    labels = {
        l: blur_batch(masks, sigma_for_level(l, levels.max_level))
        for l in levels.partial_levels
    }
    labels[levels.max_level] = masks.clone()
    return labels
