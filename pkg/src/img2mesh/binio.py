"""Versioned little-endian array containers used for checkpoints.

Layout: 4-byte magic, u32 version, u32 array count, then per array
u16 name length, utf-8 name, 1-byte dtype code, u8 ndim, u64 dims, raw data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_CODES = {b"f": "<f4", b"d": "<f8", b"i": "<i8"}
_KINDS = {"f": {4: b"f", 8: b"d"}, "i": {8: b"i"}, "u": {}, "b": {}}


class CheckpointError(ValueError):
    pass


def write_arrays(path: str | Path, magic: bytes, version: int, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be four bytes")
    chunks = [magic, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        code = _KINDS.get(arr.dtype.kind, {}).get(arr.dtype.itemsize)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + code + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path: str | Path, magic: bytes, version: int) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    got, count = struct.unpack_from("<II", buf, 4)
    if got != version:
        raise CheckpointError(f"{path}: version {got} unsupported (expected {version})")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode()
        pos += n
        code = buf[pos : pos + 1]
        (ndim,) = struct.unpack_from("<B", buf, pos + 1)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dtype = np.dtype(_CODES[code])
        size = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += size
    return out
