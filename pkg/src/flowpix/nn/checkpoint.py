"""Binary parameter checkpoints.

Layout (little-endian)::

    magic b"FPCK" | u16 version | u32 parameter count
    repeated: u32 name length | name (utf-8) | u32 rank | u32 dims[rank] | f32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from flowpix.nn.tensor import Parameter

MAGIC = b"FPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(fh: BinaryIO, params: Sequence[Parameter]) -> None:
    fh.write(MAGIC + struct.pack("<HI", VERSION, len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        fh.write(struct.pack("<I", len(name)) + name)
        fh.write(struct.pack("<I", p.data.ndim))
        fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(10)
    if len(head) != 10 or head[:4] != MAGIC:
        raise CheckpointError("not a flowpix checkpoint (bad magic)")
    version, count = struct.unpack("<HI", head[4:])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = _unpack(fh, "<I")
        name = fh.read(n).decode("utf-8")
        (rank,) = _unpack(fh, "<I")
        dims = _unpack(fh, f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        raw = fh.read(4 * size)
        if len(raw) != 4 * size:
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    return out


def _unpack(fh: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def save(path: str | Path, params: Sequence[Parameter]) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, params)


def load_into(path: str | Path, params: Sequence[Parameter]) -> None:
    """Copy checkpoint values into ``params``, validating names and shapes."""
    with open(path, "rb") as fh:
        stored = read_checkpoint(fh)
    expected = {p.name for p in params}
    missing = expected - stored.keys()
    extra = stored.keys() - expected
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for p in params:
        arr = stored[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}: model {p.data.shape}, checkpoint {arr.shape}")
        p.data[...] = arr
