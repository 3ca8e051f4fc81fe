"""Reader/writer for the GRNT named-tensor container.

Layout (all integers little-endian)::

    b"GRNT" | u32 version (=1) | u32 entry count
    per entry: u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
               ndim x u64 dims, raw row-major payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"GRNT"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dtype for dtype, code in _CODES.items()}


class ContainerError(Exception):
    """Malformed, truncated or otherwise unreadable container."""


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<") if array.dtype.kind == "f" else array.dtype
        if dtype not in _CODES:
            raise TypeError(f"entry {name!r}: unsupported dtype {array.dtype}")
        if array.ndim > 255:
            raise ValueError(f"entry {name!r}: too many dimensions ({array.ndim})")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long ({len(raw_name)} bytes)")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> OrderedDict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container while reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError("bad magic, not a GRNT container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")

    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"entry {i}: name is not valid UTF-8") from exc
        if name in out:
            raise ContainerError(f"duplicate entry name {name!r}")
        code, ndim = struct.unpack("<BB", take(2, f"entry {name!r} header"))
        if code not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"entry {name!r} dims"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = take(nbytes, f"entry {name!r} payload")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def write(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> OrderedDict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
