"""Binary checkpoint format.

Layout (little-endian)::

    b"MEUN" | u32 version | u32 entry count
    per entry: u32 name length | name (utf-8) | u32 rank | u32 dims[rank] | f32 data

Batch-norm running statistics are stored as ordinary entries whose names end
in ``.running_mean`` / ``.running_var``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from meun.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

MAGIC = b"MEUN"
VERSION = 1


def model_state(model) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update(dict(model.named_buffers()))
    return state


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_state(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointMagicError("not a MEUN checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    count = r.u32("entry count")
    state = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        state[name] = data.astype(np.float32)
    return state


def checkpoint_save(model, path) -> None:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    data = encode_state(model_state(model))
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path, model):
    """Load into ``model``; the model is untouched unless every entry validates."""
    state = decode_state(Path(path).read_bytes())
    params = dict(model.named_parameters())
    buffers = {}
    for prefix_mod in _buffer_owners(model):
        buffers.update(prefix_mod)
    expected = set(params) | set(buffers)
    missing = sorted(expected - set(state))
    if missing:
        raise CheckpointShapeError(missing[0], "missing from checkpoint")
    extra = sorted(set(state) - expected)
    if extra:
        raise CheckpointShapeError(extra[0], "not present in the model")
    for name, arr in state.items():
        target = params[name].data if name in params else getattr(*buffers[name])
        if arr.shape != target.shape:
            raise CheckpointShapeError(name, f"checkpoint shape {arr.shape} != model shape {target.shape}")
    for name, arr in state.items():
        if name in params:
            params[name].data = arr.astype(params[name].dtype)
        else:
            owner, attr = buffers[name]
            setattr(owner, attr, arr.astype(getattr(owner, attr).dtype))
    return model


def _buffer_owners(model):
    """Yield {full name: (module, attribute)} for every buffer."""
    def walk(module, prefix):
        for attr in getattr(module, "_buffers", ()):
            yield {prefix + attr: (module, attr)}
        for name, child in module.named_children():
            yield from walk(child, f"{prefix}{name}.")

    yield from walk(model, "")


__all__ = ["CheckpointError", "checkpoint_load", "checkpoint_save", "decode_state", "encode_state"]
