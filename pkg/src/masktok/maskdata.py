"""Mask image I/O, augmentation, and synthetic shape corpora.

Masks are square grayscale grids held as numpy arrays with values in
[0, 1]; a binary mask contains only {0, 1}. The canonical training side
is 256 pixels (configurable everywhere for tests).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CANONICAL_SIDE = 256
MANIFEST_VERSION = 1

SHAPE_KINDS = ("ellipse", "rectangle", "polygon", "union-of-2", "ring")


class MaskFormatError(ValueError):
    """A mask file or array violates the mask format contract."""


class ParameterError(ValueError):
    """A shape spec or split request is degenerate."""


# ---------------------------------------------------------------------------
# I/O


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit grayscale PGM/PNG file as a float grid in [0, 1].

    Raises MaskFormatError naming the offending property when the file is
    not 8-bit grayscale or not square.
    """
    with Image.open(path) as img:
        if img.mode != "L":
            raise MaskFormatError(
                f"{path}: expected 8-bit grayscale (mode L), got mode {img.mode}"
            )
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise MaskFormatError(
            f"{path}: expected a square image, got {arr.shape[1]}x{arr.shape[0]}"
        )
    return arr / 255.0


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] grid as an 8-bit grayscale file (.pgm or .png).

    Binary masks round-trip exactly through load_mask (0 -> 0, 1 -> 255).
    """
    _check_mask(mask)
    data = np.rint(np.asarray(mask, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def _check_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise MaskFormatError(f"expected a square 2D grid, got shape {mask.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise MaskFormatError("mask values must lie in [0, 1]")


def is_binary(mask: np.ndarray) -> bool:
    return bool(np.isin(mask, (0.0, 1.0)).all())


# ---------------------------------------------------------------------------
# Pointwise ops and augmentation


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold to {0, 1}: v -> 1 if v > threshold else 0. Idempotent."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(mask) > threshold).astype(np.float64)


def random_crop_resize(
    mask: np.ndarray,
    rng: np.random.Generator,
    min_crop_fraction: float = 0.5,
) -> np.ndarray:
    """Crop a random square sub-window and resize back to the input side.

    The window side is uniform over [ceil(min_crop_fraction * side), side]
    and the resize is nearest-neighbor, so binary masks stay binary.
    min_crop_fraction = 1.0 reproduces the input exactly.
    """
    if not 0.0 < min_crop_fraction <= 1.0:
        raise ParameterError(
            f"min_crop_fraction must lie in (0, 1], got {min_crop_fraction}"
        )
    mask = np.asarray(mask)
    side = mask.shape[0]
    lo = max(1, math.ceil(min_crop_fraction * side))
    crop_side = int(rng.integers(lo, side + 1))
    y0 = int(rng.integers(0, side - crop_side + 1))
    x0 = int(rng.integers(0, side - crop_side + 1))
    window = mask[y0 : y0 + crop_side, x0 : x0 + crop_side]
    idx = np.minimum(
        ((np.arange(side) + 0.5) * crop_side / side).astype(np.int64), crop_side - 1
    )
    return window[np.ix_(idx, idx)].copy()


# ---------------------------------------------------------------------------
# Synthetic shapes


@dataclass(frozen=True)
class ShapeSpec:
    """Deterministic recipe for one synthetic binary mask.

    size_range bounds are fractions of the image side; position_jitter is
    the maximum center offset as a fraction of the side; rotation is the
    maximum |angle| in radians, sampled uniformly. Identical spec (seed
    included) always generates the identical mask.
    """

    kind: str
    size_range: tuple[float, float] = (0.25, 0.7)
    position_jitter: float = 0.15
    rotation: float = math.pi
    seed: int = 0
    side: int = CANONICAL_SIDE

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}")
        lo, hi = self.size_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ParameterError(f"size_range bounds must satisfy 0 < min <= max <= 1, got {self.size_range}")
        if lo * self.side < 2.0:
            raise ParameterError(
                f"size_range min {lo} is below one pixel at side {self.side} (zero-size shape)"
            )


def _pixel_centers(side: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(side, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="xy")


def _rotate(x, y, cx, cy, angle):
    dx, dy = x - cx, y - cy
    c, s = math.cos(angle), math.sin(angle)
    return c * dx + s * dy, -s * dx + c * dy


def ellipse_mask(side: int, cx: float, cy: float, a: float, b: float, angle: float = 0.0) -> np.ndarray:
    """Binary ellipse with semi-axes (a, b) via pixel-center inside test."""
    x, y = _pixel_centers(side)
    u, v = _rotate(x, y, cx, cy, angle)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)


def rectangle_mask(side: int, cx: float, cy: float, hw: float, hh: float, angle: float = 0.0) -> np.ndarray:
    """Binary rectangle with half-extents (hw, hh)."""
    x, y = _pixel_centers(side)
    u, v = _rotate(x, y, cx, cy, angle)
    return ((np.abs(u) <= hw) & (np.abs(v) <= hh)).astype(np.float64)


def ring_mask(side: int, cx: float, cy: float, a: float, b: float, angle: float = 0.0, inner: float = 0.5) -> np.ndarray:
    """Elliptical annulus: outer ellipse minus its inner-scaled copy."""
    x, y = _pixel_centers(side)
    u, v = _rotate(x, y, cx, cy, angle)
    r2 = (u / a) ** 2 + (v / b) ** 2
    return ((r2 <= 1.0) & (r2 > inner ** 2)).astype(np.float64)


def polygon_mask(side: int, vertices: np.ndarray) -> np.ndarray:
    """Fill a simple polygon (n x 2 array of (x, y)) by even-odd ray casting."""
    vx = np.asarray(vertices, dtype=np.float64)[:, 0]
    vy = np.asarray(vertices, dtype=np.float64)[:, 1]
    x, y = _pixel_centers(side)
    inside = np.zeros((side, side), dtype=bool)
    n = len(vx)
    for i in range(n):
        j = (i - 1) % n
        crosses = (vy[i] > y) != (vy[j] > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (vx[j] - vx[i]) * (y - vy[i]) / (vy[j] - vy[i]) + vx[i]
        inside ^= crosses & (x < xint)
    return inside.astype(np.float64)


def _gen_one(kind: str, spec: ShapeSpec, rng: np.random.Generator) -> np.ndarray:
    side = spec.side
    lo, hi = spec.size_range
    jitter = spec.position_jitter * side
    cx = side / 2 + rng.uniform(-jitter, jitter)
    cy = side / 2 + rng.uniform(-jitter, jitter)
    angle = rng.uniform(-spec.rotation, spec.rotation)
    # extents are half the sampled size so a size fraction of 1.0 spans the image
    ext_a = rng.uniform(lo, hi) * side / 2
    ext_b = rng.uniform(lo, hi) * side / 2
    if kind == "ellipse":
        return ellipse_mask(side, cx, cy, ext_a, ext_b, angle)
    if kind == "rectangle":
        return rectangle_mask(side, cx, cy, ext_a, ext_b, angle)
    if kind == "ring":
        return ring_mask(side, cx, cy, ext_a, ext_b, angle, inner=rng.uniform(0.35, 0.7))
    if kind == "polygon":
        n = int(rng.integers(3, 9))
        theta = np.sort(rng.uniform(0.0, 2 * math.pi, size=n)) + angle
        radii = ext_a * rng.uniform(0.5, 1.0, size=n)
        verts = np.stack([cx + radii * np.cos(theta), cy + radii * np.sin(theta)], axis=1)
        return polygon_mask(side, verts)
    raise ParameterError(f"unknown shape kind {kind!r}")


def gen_synthetic(spec: ShapeSpec) -> np.ndarray:
    """Generate the binary mask described by a ShapeSpec.

    Pure function of the spec: same spec (and seed) gives the same grid.
    Retries placement a few times if the shape rasterizes to nothing, then
    raises ParameterError.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(16):
        if spec.kind == "union-of-2":
            kinds = rng.choice(["ellipse", "rectangle", "polygon"], size=2)
            mask = np.maximum(_gen_one(str(kinds[0]), spec, rng), _gen_one(str(kinds[1]), spec, rng))
        else:
            mask = _gen_one(spec.kind, spec, rng)
        if mask.any():
            return mask
    raise ParameterError(f"spec {spec} rasterized to an empty mask")


# ---------------------------------------------------------------------------
# Dataset manifests

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    """Listing of mask files with their split tags."""

    entries: list[tuple[str, str]] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION
    root: Path = Path(".")

    def paths(self, split: str) -> list[Path]:
        return [self.root / p for p, s in self.entries if s == split]

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        lines = [f"format-version\t{self.format_version}"]
        lines += [f"{p}\t{s}" for p, s in self.entries]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("format-version\t"):
            raise MaskFormatError(f"{path}: missing format-version header")
        version = int(lines[0].split("\t", 1)[1])
        if version != MANIFEST_VERSION:
            raise MaskFormatError(f"{path}: unsupported manifest version {version}")
        entries = []
        seen = set()
        for ln in lines[1:]:
            if not ln.strip():
                continue
            rel, split = ln.split("\t")
            if split not in SPLITS:
                raise MaskFormatError(f"{path}: unknown split tag {split!r}")
            if rel in seen:
                raise MaskFormatError(f"{path}: duplicate path {rel!r}")
            seen.add(rel)
            entries.append((rel, split))
        return cls(entries=entries, format_version=version, root=path.parent)


def split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n items into train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    return tuple(counts)


def build_dataset(
    specs: list[ShapeSpec],
    out_dir: str | os.PathLike,
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetManifest:
    """Render every spec to a PGM file under out_dir and write a manifest.

    Specs are assigned to train/val/test in order, with counts from
    largest-remainder rounding of the split fractions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = split_counts(len(specs), splits)
    tags = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    entries = []
    for i, (spec, tag) in enumerate(zip(specs, tags)):
        rel = f"mask_{i:05d}.pgm"
        save_mask(gen_synthetic(spec), out_dir / rel)
        entries.append((rel, tag))
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def mixed_specs(count: int, seed: int, side: int = CANONICAL_SIDE) -> list[ShapeSpec]:
    """A deterministic corpus of specs cycling over the shape families."""
    kinds = ("ellipse", "rectangle", "polygon", "union-of-2")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [
        ShapeSpec(kind=kinds[i % len(kinds)], seed=int(seeds[i]), side=side)
        for i in range(count)
    ]
