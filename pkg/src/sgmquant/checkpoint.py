"""Byte-deterministic checkpoint container ("SGMC").

Layout, little-endian throughout::

    b"SGMC" | u16 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 array_count | per array: u16 name_len, name, u8 dtype, u8 rank,
      u32 dims..., raw row-major bytes
    | u32 CRC32 of everything before it

numpy's ``savez`` embeds zip timestamps, which breaks byte-identical reruns,
hence the hand-rolled framing.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SGMC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("i1"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def dumps(meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt).str not in {d.str for d in _DTYPES.values()}:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        code = _CODES[np.dtype(dt)]
        nb = name.encode()
        parts.append(struct.pack(f"<H{len(nb)}sBB{arr.ndim}I", len(nb), nb, code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(buf) < 14:
        raise CheckpointError("truncated payload")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version, meta_len = r.unpack("HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        code, rank = r.unpack("BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        dims = r.unpack(f"{rank}I")
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after arrays")
    return meta, arrays


def save(path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        return loads(Path(path).read_bytes())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
