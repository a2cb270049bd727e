"""Parameter checkpoint I/O.

Binary layout: magic "RAMD", version u32, then per parameter in sorted name
order: name length u32, utf-8 name, rank u32, extents u32 each, raw
little-endian float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"RAMD"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(params):
            data = np.asarray(params[name].data, dtype="<f4", order="C")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", data.ndim))
            for ext in data.shape:
                f.write(struct.pack("<I", ext))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    params: dict[str, Tensor] = {}
    off = 8
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {off}")
        data = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape)
        off = end
        params[name] = Tensor(data.copy(), requires_grad=True)
    return params
