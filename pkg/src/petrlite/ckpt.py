"""
Binary tensor record files.

Layout (all integers little-endian u32, payload little-endian f64)::

    b"PETRCKPT" | version
    repeated:   name_len | name (utf-8) | rank | dims[rank] | payload[prod(dims)]

The same container holds model checkpoints and cached scene images.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"PETRCKPT"
VERSION = 1


def write_records(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ContractError(f"{path}: not a PETRCKPT file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            out[name] = data.reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ContractError(f"{path}: truncated record at byte {pos}") from exc
    return out
