"""Binary parameter container shared by encoder and training checkpoints.

Layout (all integers little-endian)::

    b"NSSL" | u32 version | u32 len | config text (UTF-8 JSON)
    u32 block count
    per block: u16 len | name | u8 ndim | ndim x u64 dims | float32 LE data
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"NSSL"
VERSION = 1


def dumps(meta: Mapping, blocks: Mapping[str, np.ndarray]) -> bytes:
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        bname = name.encode("utf-8")
        out.append(struct.pack("<H", len(bname)))
        out.append(bname)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, tlen = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    try:
        meta = json.loads(bytes(r.take(tlen, "config text")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config text is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I", "block count")
    blocks: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"block {i} name length")
        name = bytes(r.take(nlen, f"block {i} name")).decode("utf-8")
        (ndim,) = r.unpack("<B", f"block {name} ndim")
        shape = r.unpack(f"<{ndim}Q", f"block {name} shape")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(4 * n, f"block {name} data"), dtype="<f4")
        blocks[name] = data.astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last block")
    return meta, blocks


def save(path, meta: Mapping, blocks: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(meta, blocks))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
