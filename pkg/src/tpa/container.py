"""Portable named-tensor container used for every persisted artifact.

Layout, all little-endian:

    magic "TNSC" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 each
               | payload, float64 row-major

Payload length must equal the product of dims times 8; names are unique.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"TNSC"
VERSION = 1


class ContainerError(ValueError):
    """Malformed container file."""


def write_container(tensors: Mapping[str, "np.ndarray"], path) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ContainerError(f"entry {name!r} has rank {arr.ndim} > 255")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()

    view = memoryview(data)
    pos = 0

    def take(count: int, what: str) -> memoryview:
        nonlocal pos
        if pos + count > len(view):
            raise ContainerError(f"truncated container: ran out of bytes reading {what}")
        chunk = view[pos : pos + count]
        pos += count
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError(f"bad magic in {path!s}: not a tensor container")
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    count = struct.unpack("<I", take(4, "entry count"))[0]

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = struct.unpack("<H", take(2, f"entry {i} name length"))[0]
        name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        if name in out:
            raise ContainerError(f"duplicate entry name {name!r}")
        rank = struct.unpack("<B", take(1, f"entry {name!r} rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} dims"))
        numel = 1
        for d in dims:
            numel *= d
        payload = take(8 * numel, f"entry {name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after the last entry")
    return out
