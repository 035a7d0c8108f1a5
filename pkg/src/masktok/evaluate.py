"""Reconstruction metrics and coarse-to-fine prefix-length curves."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import MaskTokenizerModel


def _as_bool(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    return arr > 0.5 if arr.dtype != bool else arr


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def ciou(pairs) -> float:
    """Cumulative IoU: summed intersections over summed unions."""
    total_i = total_u = 0
    count = 0
    for pred, gt in pairs:
        pred, gt = _as_bool(pred), _as_bool(gt)
        total_i += int(np.count_nonzero(pred & gt))
        total_u += int(np.count_nonzero(pred | gt))
        count += 1
    if count == 0:
        raise ValueError("ciou needs at least one pair")
    return 1.0 if total_u == 0 else total_i / total_u


def giou_mean(pairs) -> float:
    """Mean of per-pair IoU."""
    values = [iou(pred, gt) for pred, gt in pairs]
    if not values:
        raise ValueError("giou_mean needs at least one pair")
    return sum(values) / len(values)


@dataclass
class PrefixCurve:
    """Aggregate reconstruction quality per decoded prefix length."""

    lengths: tuple[int, ...]
    mean_iou: tuple[float, ...]
    ciou: tuple[float, ...]
    giou: tuple[float, ...]

    def __post_init__(self):
        if list(self.lengths) != sorted(set(self.lengths)):
            raise ValueError(f"lengths must be strictly increasing, got {self.lengths}")


def prefix_curve(
    model: MaskTokenizerModel,
    masks: list[np.ndarray],
    lengths: tuple[int, ...] = (4, 8, 16, 32),
    threshold: float = 0.5,
    batch_size: int = 16,
) -> PrefixCurve:
    """Encode each mask once, decode every prefix length, score against the
    original (unblurred) mask at the given threshold."""
    k = model.config.num_tokens
    for l in lengths:
        if not 1 <= l <= k:
            raise ValueError(f"prefix length {l} outside [1, {k}]")
    model.eval()
    per_length: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {l: [] for l in lengths}
    with torch.no_grad():
        for lo in range(0, len(masks), batch_size):
            chunk = masks[lo : lo + batch_size]
            batch = np.stack([np.asarray(m, dtype=np.float64) for m in chunk])
            indices = model.tokenize(batch)
            for l in lengths:
                probs = torch.sigmoid(model.decode_tokens(indices, length=l))
                preds = (probs > threshold).cpu().numpy()
                for pred, gt in zip(preds, chunk):
                    per_length[l].append((pred, _as_bool(gt)))
    means = tuple(giou_mean(per_length[l]) for l in lengths)
    return PrefixCurve(
        lengths=tuple(lengths),
        mean_iou=means,
        ciou=tuple(ciou(per_length[l]) for l in lengths),
        giou=means,
    )


def _fmt(value: float) -> str:
    # shortest exact decimal, padded so at least 6 significant digits print
    return np.format_float_positional(value, unique=True, min_digits=6)


def emit_curve(curve: PrefixCurve, path: str | os.PathLike) -> None:
    """Write the curve as CSV; values re-read exactly (full precision)."""
    lines = ["length,mean_iou,ciou,giou"]
    for i, length in enumerate(curve.lengths):
        lines.append(
            f"{length},{_fmt(curve.mean_iou[i])},{_fmt(curve.ciou[i])},{_fmt(curve.giou[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve(path: str | os.PathLike) -> PrefixCurve:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "length,mean_iou,ciou,giou":
        raise ValueError(f"{path}: missing curve CSV header")
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    return PrefixCurve(
        lengths=tuple(int(r[0]) for r in rows),
        mean_iou=tuple(float(r[1]) for r in rows),
        ciou=tuple(float(r[2]) for r in rows),
        giou=tuple(float(r[3]) for r in rows),
    )
