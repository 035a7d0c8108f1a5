"""Stage-1 training loop: reconstruct masks from token prefixes at mixed
granularity levels.

All randomness (epoch order, crop augmentation, level sampling, parameter
init) is derived from (seed, stream, step), so a run is reproducible
bit-for-bit on one platform and a resumed run continues the exact
trajectory of an uninterrupted one.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import hierarchy, losses, maskdata
from .checkpoint import ConfigMismatchError, load_checkpoint, save_checkpoint
from .losses import LossWeights
from .model import MaskTokenizerModel, ModelConfig

# stream tags keeping the per-step RNG families disjoint
_STREAM_ORDER = 1
_STREAM_CROP = 2
_STREAM_LEVELS = 3

SCALAR_NAMES = ("total", "hml", "bce", "dice", "codebook", "commitment", "code_perplexity", "lr")


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/Inf; carries the offending term's name."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    schedule: str = "cosine"
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip_norm: float | None = 1.0
    checkpoint_every: int = 1000
    min_crop_fraction: float = 0.6
    codebook_bootstrap: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # 0 is allowed so a null update stays expressible
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")


def parse_flat_config(text: str) -> tuple[TrainConfig, ModelConfig]:
    """Parse a flat `key = value` file into train and model configs.

    Keys mirror the TrainConfig and ModelConfig field names (LossWeights
    fields appear flattened); unknown keys are an error.
    """
    train_fields = {f.name: f for f in fields(TrainConfig) if f.name != "loss_weights"}
    weight_fields = {f.name: f for f in fields(LossWeights)}
    model_fields = {f.name: f for f in fields(ModelConfig)}
    train_kw, weight_kw, model_kw = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
        elif "\t" in line:
            key, value = (part.strip() for part in line.split("\t", 1))
        else:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in train_fields:
            train_kw[key] = _coerce(value, key)
        elif key in weight_fields:
            weight_kw[key] = float(value)
        elif key in model_fields:
            model_kw[key] = _coerce(value, key)
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    train_cfg = TrainConfig(loss_weights=LossWeights(**weight_kw), **train_kw)
    return train_cfg, ModelConfig(**model_kw)


def _coerce(value: str, key: str):
    if value.lower() == "none":
        return None
    if key in ("schedule", "precision"):
        return value
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    try:
        return int(value)
    except ValueError:
        return float(value)


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Linear warmup then the configured schedule (0-based step index)."""
    lr = config.learning_rate
    if step < config.warmup_steps:
        return lr * (step + 1) / config.warmup_steps
    if config.schedule == "constant":
        return lr
    span = max(1, config.steps - config.warmup_steps)
    progress = (step - config.warmup_steps) / span
    return lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def build_optimizer(model: MaskTokenizerModel, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with embeddings, biases, and norm gains excluded from decay."""
    groups = model.parameter_groups()
    params = dict(model.named_parameters())
    return torch.optim.AdamW(
        [
            {"params": [params[n] for n in groups["decay"]], "weight_decay": config.weight_decay},
            {"params": [params[n] for n in groups["no_decay"]], "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
        betas=(0.9, 0.999),
    )


def sample_levels_for_step(step: int, config: TrainConfig, max_level: int) -> hierarchy.LevelSample:
    rng = np.random.default_rng([config.seed, _STREAM_LEVELS, step])
    return hierarchy.sample_partial_levels(rng, max_level=max_level)


def train_step(
    model: MaskTokenizerModel,
    optimizer: torch.optim.AdamW,
    batch: np.ndarray,
    step: int,
    config: TrainConfig,
) -> dict[str, float]:
    """One optimization step on a (B, H, W) batch; one shared LevelSample.

    Deterministic given (parameters, batch, seed, step). Raises
    NonFiniteLossError naming the first non-finite term.
    """
    if batch.ndim != 3 or batch.shape[0] < 1:
        raise ValueError(f"batch must be (B, H, W) with B >= 1, got {batch.shape}")
    levels = sample_levels_for_step(step, config, model.config.num_tokens)
    masks = torch.as_tensor(batch, dtype=model.config.dtype)
    labels = hierarchy.make_labels_batch(masks, levels)

    result = model(masks, levels)
    w = config.loss_weights
    hml_value, bce_sum, dice_sum = losses.hml_components(result.level_logits, labels, w)
    total = losses.total_loss(hml_value, result.codebook_loss, result.commitment_loss, w)
    for name, term in (
        ("bce", bce_sum),
        ("dice", dice_sum),
        ("hml", hml_value),
        ("codebook", result.codebook_loss),
        ("commitment", result.commitment_loss),
        ("total", total),
    ):
        if not torch.isfinite(term):
            raise NonFiniteLossError(f"step {step}: loss term {name!r} is non-finite")

    lr = learning_rate_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    optimizer.step()

    perplexity = quant_perplexity(result.indices, model.config.codebook_size)
    return {
        "total": total.item(),
        "hml": hml_value.item(),
        "bce": bce_sum.item(),
        "dice": dice_sum.item(),
        "codebook": result.codebook_loss.item(),
        "commitment": result.commitment_loss.item(),
        "code_perplexity": perplexity,
        "lr": lr,
    }


def quant_perplexity(indices: torch.Tensor, codebook_size: int) -> float:
    from .quantize import usage_stats

    return usage_stats([indices.reshape(-1).tolist()], codebook_size).perplexity


def _report_lines(step: int, record: dict[str, float]) -> list[str]:
    return [f"{step}\t{name}\t{record[name]!r}" for name in SCALAR_NAMES]


@dataclass
class TrainReport:
    scalars: list[dict[str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    final_checkpoint: str | None = None
    start_step: int = 0

    def write(self, path: str | os.PathLike) -> None:
        lines = []
        for offset, record in enumerate(self.scalars):
            lines.extend(_report_lines(self.start_step + offset, record))
        Path(path).write_text("\n".join(lines) + "\n")


class _BatchSource:
    """Deterministic shuffled-epoch batch assembly with crop augmentation."""

    def __init__(self, masks: list[np.ndarray], config: TrainConfig, workers: int):
        self.masks = masks
        self.config = config
        self.workers = workers
        self._perm_cache: dict[int, np.ndarray] = {}

    def _index_for_position(self, position: int) -> int:
        n = len(self.masks)
        epoch, offset = divmod(position, n)
        if epoch not in self._perm_cache:
            rng = np.random.default_rng([self.config.seed, _STREAM_ORDER, epoch])
            self._perm_cache[epoch] = rng.permutation(n)
        return int(self._perm_cache[epoch][offset])

    def _augment(self, args) -> np.ndarray:
        mask_index, child_seed = args
        rng = np.random.default_rng(child_seed)
        return maskdata.random_crop_resize(
            self.masks[mask_index], rng, self.config.min_crop_fraction
        )

    def batch(self, step: int) -> np.ndarray:
        b = self.config.batch_size
        positions = range(step * b, (step + 1) * b)
        indices = [self._index_for_position(p) for p in positions]
        seeds = [[self.config.seed, _STREAM_CROP, step, i] for i in range(b)]
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                crops = list(pool.map(self._augment, zip(indices, seeds)))
        else:
            crops = [self._augment(args) for args in zip(indices, seeds)]
        return np.stack(crops).astype(np.float32)


def default_workers() -> int:
    value = os.environ.get("MASKTOK_WORKERS")
    if value:
        return max(1, int(value))
    return min(4, os.cpu_count() or 1)


def fit(
    manifest: maskdata.DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
    workers: int | None = None,
) -> TrainReport:
    """Run the training loop over the manifest's train split.

    Masks are binarized at 0.5 on load and re-augmented per step with
    random crops. Checkpoints land in out_dir every checkpoint_every
    steps plus a final one; the per-step scalar report is written to
    out_dir/report.tsv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = manifest.paths("train")
    if not paths:
        raise ValueError("manifest has an empty train split")
    masks = [maskdata.binarize(maskdata.load_mask(p)).astype(np.uint8) for p in paths]
    for m in masks:
        if m.shape != (model_config.image_side, model_config.image_side):
            raise ValueError(
                f"training mask shape {m.shape} does not match configured side "
                f"{model_config.image_side}"
            )

    start_step = 0
    optimizer_tensors: dict[str, np.ndarray] = {}
    if resume_from is not None:
        model, header, optimizer_tensors = load_checkpoint(resume_from, expect_config=model_config)
        if "step" not in header:
            raise ConfigMismatchError(f"{resume_from}: checkpoint carries no step counter")
        start_step = int(header["step"])
    else:
        torch.manual_seed(train_config.seed)
        model = MaskTokenizerModel(model_config)
    model.train()

    optimizer = build_optimizer(model, train_config)
    if optimizer_tensors:
        _restore_optimizer_state(model, optimizer, optimizer_tensors)

    source = _BatchSource(masks, train_config, workers or default_workers())
    if resume_from is None and train_config.codebook_bootstrap:
        _bootstrap_codebook(model, source, train_config)
    report = TrainReport(start_step=start_step)
    started = time.monotonic()
    with open(out_dir / "report.tsv", "w") as stream:
        for step in range(start_step, train_config.steps):
            batch = source.batch(step)
            scalars = train_step(model, optimizer, batch, step, train_config)
            report.scalars.append(scalars)
            stream.write("\n".join(_report_lines(step, scalars)) + "\n")
            stream.flush()
            done = step + 1
            if train_config.checkpoint_every and done % train_config.checkpoint_every == 0 and done < train_config.steps:
                _write_checkpoint(model, optimizer, done, out_dir / f"ckpt_step{done:06d}.mtck", train_config)
    final_path = out_dir / "ckpt_final.mtck"
    _write_checkpoint(model, optimizer, train_config.steps, final_path, train_config)
    report.wall_clock = time.monotonic() - started
    report.final_checkpoint = str(final_path)
    return report


def _bootstrap_codebook(model: MaskTokenizerModel, source: _BatchSource, config: TrainConfig) -> None:
    """Seed the codebook from the untrained encoder's latents over the
    leading training batches (enough rows to cover the codebook)."""
    rows_per_batch = config.batch_size * model.config.num_tokens
    needed_batches = max(1, math.ceil(model.config.codebook_size / rows_per_batch))
    collected = []
    with torch.no_grad():
        for step in range(needed_batches):
            collected.append(model.encode(source.batch(step)))
    model.quantizer.bootstrap_from(torch.cat(collected, dim=0), seed=config.seed)


def _write_checkpoint(model, optimizer, step: int, path: Path, config: TrainConfig) -> None:
    save_checkpoint(
        model,
        path,
        step=step,
        optimizer_state=_optimizer_state_tensors(model, optimizer),
        extra={"train_seed": config.seed},
    )


def _optimizer_state_tensors(model, optimizer) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if not state:
                continue
            name = names[id(param)]
            for key, value in state.items():
                arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                out[f"{name}.{key}"] = arr
    return out


def _restore_optimizer_state(model, optimizer, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    per_param: dict[str, dict[str, torch.Tensor]] = {}
    for full, arr in tensors.items():
        name, key = full.rsplit(".", 1)
        per_param.setdefault(name, {})[key] = torch.from_numpy(arr.copy())
    for name, state in per_param.items():
        param = params[name]
        restored = {}
        for key, tensor in state.items():
            if key == "step":
                restored[key] = tensor.reshape(())
            else:
                restored[key] = tensor.to(param.dtype)
        optimizer.state[param] = restored
