"""Binary tensor checkpoints.

Layout (little-endian)::

    magic   b"UFOT"
    version u32        1 = every tensor float32, 2 = per-tensor dtype byte
    count   u32
    per tensor:
        name_len u16, name utf-8
        rank u8, extents u32 * rank
        [version 2 only] dtype u8 (4 = float32, 8 = float64)
        raw values
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"UFOT"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    arrays = {k: np.asarray(getattr(v, "data", v)) for k, v in tensors.items()}
    wide = any(a.dtype == np.float64 for a in arrays.values())
    version = 2 if wide else 1
    chunks = [MAGIC, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        if version == 2:
            code = 8 if arr.dtype == np.float64 else 4
            chunks.append(struct.pack("<B", code))
            chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        else:
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_tensors(buf, source=os.fspath(path))


def parse_tensors(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version not in (1, 2):
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"{source}: truncated tensor name")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dtype = _DTYPES[4]
            if version == 2:
                (code,) = struct.unpack_from("<B", buf, off)
                off += 1
                if code not in _DTYPES:
                    raise FormatError(f"{source}: unknown dtype code {code} for {name}")
                dtype = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            nbytes = n * dtype.itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"{source}: truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"{source}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{source}: {len(buf) - off} trailing bytes")
    return out
