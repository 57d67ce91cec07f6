"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"FCPS" (model parameters) or b"FCCV" (compression parameters)
    version    u16       currently 1
    repeated until EOF:
        name_len  u32
        name      name_len bytes of UTF-8
        rank      u32
        dims      rank x u32
        payload   prod(dims) x f64
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

PARAMS_MAGIC = b"FCPS"
CONV_MAGIC = b"FCCV"
TC_MAGIC = b"FCTC"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray], magic: bytes = PARAMS_MAGIC) -> bytes:
    parts = [magic, struct.pack("<H", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(raw: bytes, magic: bytes = PARAMS_MAGIC) -> dict[str, np.ndarray]:
    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 6:
        raise FormatError("truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 6
    out = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(raw):
                raise FormatError(f"record {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated record: {exc}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray], magic: bytes = PARAMS_MAGIC) -> Path:
    path = Path(path)
    path.write_bytes(dumps(tensors, magic))
    return path


def load(path, magic: bytes = PARAMS_MAGIC) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes(), magic)
