"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    magic 'MTCK' | u32 format version | u32 header length | header JSON
    u32 record count | records...

Each record is: u16 name length, name UTF-8, u8 dtype-string length,
numpy dtype string (e.g. '<f4'), u8 ndim, u64 per dim, u64 payload bytes,
raw C-order payload, u32 CRC32 of the payload. The header JSON carries the
model config and any extra scalars (training step, seed), making the file
readable without the code that wrote it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or unreadable checkpoint file."""


class IntegrityError(CheckpointError):
    """A tensor record failed its checksum."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint config header disagrees with the requested config."""


def save_tensors(path: str | os.PathLike, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays with a JSON header; byte-stable for fixed input."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # preserves 0-dim: only reached when ndim > 1
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        payload = arr.tobytes()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", len(dtype_b)))
        chunks.append(dtype_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
        chunks.append(struct.pack("<I", zlib.crc32(payload)))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_tensors(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container back; verifies magic, version, and per-record CRC."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(r.take(header_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (dtype_len,) = r.unpack("<B")
        dtype = np.dtype(r.take(dtype_len).decode("ascii"))
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: record {name!r} payload size {nbytes} does not match shape {shape}"
            )
        payload = r.take(nbytes)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"{path}: checksum mismatch in record {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after records")
    return header, tensors


# ---------------------------------------------------------------------------
# Model-level wrappers


def save_checkpoint(
    model,
    path: str | os.PathLike,
    step: int | None = None,
    optimizer_state: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    """Persist model parameters (and optionally optimizer tensors)."""
    header = {"model_config": model.config.to_dict()}
    if step is not None:
        header["step"] = step
    if extra:
        header.update(extra)
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for name, arr in (optimizer_state or {}).items():
        tensors[f"opt.{name}"] = arr
    save_tensors(path, header, tensors)


def load_checkpoint(path: str | os.PathLike, expect_config=None):
    """Restore a model from a checkpoint.

    Returns (model, header, optimizer_tensors). When expect_config is
    given, any differing field raises ConfigMismatchError before weights
    are touched.
    """
    from .model import MaskTokenizerModel, ModelConfig

    header, tensors = load_tensors(path)
    config = ModelConfig.from_dict(header["model_config"])
    if expect_config is not None and config != expect_config:
        diffs = [
            f"{k}: checkpoint={v} requested={getattr(expect_config, k)}"
            for k, v in config.to_dict().items()
            if v != getattr(expect_config, k)
        ]
        raise ConfigMismatchError(f"{path}: config mismatch ({'; '.join(diffs)})")
    model = MaskTokenizerModel(config)
    state = {}
    opt_state = {}
    for name, arr in tensors.items():
        if name.startswith("model."):
            state[name[len("model.") :]] = torch.from_numpy(arr)
        elif name.startswith("opt."):
            opt_state[name[len("opt.") :]] = arr
    expected_shapes = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    for name, tensor in state.items():
        if name not in expected_shapes:
            raise CheckpointError(f"{path}: unexpected tensor record {name!r}")
        if tuple(tensor.shape) != expected_shapes[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(tensor.shape)}, "
                f"expected {expected_shapes[name]}"
            )
    missing = set(expected_shapes) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensor records {sorted(missing)}")
    model.load_state_dict(state)
    return model, header, opt_state
