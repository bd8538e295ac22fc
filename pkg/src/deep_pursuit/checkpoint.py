"""Binary checkpoint format.

Little-endian layout::

    b"DPCK" | u32 version | 32-byte topology hash | u64 seed | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u64 dim * ndim | float64 data

Tensors appear in parameter declaration order. The normalization mode is
implied by the presence of ``scale{j}`` tensors.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .model import ModelParams, init_model
from .network import NetworkSpec

MAGIC = b"DPCK"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQI")


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, params.spec.hash(), params.seed, len(params.arrays))]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def checkpoint_save(params: ModelParams, path) -> Path:
    """Write atomically: a failed save never leaves a half-written file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(blob: bytes, spec: NetworkSpec) -> ModelParams:
    r = _Reader(blob)
    magic, version, digest, seed, count = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    if digest != spec.hash():
        raise CheckpointError("checkpoint was written for a different network topology (spec hash mismatch)")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt tensor name") from exc
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in arrays:
            raise CheckpointError(f"duplicate tensor {name!r}")
        arrays[name] = data
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    norm = "bn" if any(k.startswith("scale") for k in arrays) else "pure"
    template = init_model(spec, 0, norm).arrays
    if list(template) != list(arrays) or any(template[k].shape != arrays[k].shape for k in arrays):
        raise CheckpointError("checkpoint tensors do not match the network layout")
    return ModelParams(spec, arrays, int(seed), norm)


def checkpoint_load(path, spec: NetworkSpec) -> ModelParams:
    """Load and validate; any format problem raises :class:`CheckpointError` before returning."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(blob, spec)
