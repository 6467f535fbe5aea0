"""Versioned binary container for named tensors.

Layout (all integers little-endian)::

    magic        8 bytes   b"MOEECKPT"
    version      uint16    FORMAT_VERSION
    endianness   1 byte    b"<"
    count        uint32    number of records
    record * count:
        name_len uint32, name (UTF-8 bytes)
        rank     uint8, dims uint64 * rank
        dtype    2 bytes   b"f4" | b"f8"
        payload  prod(dims) * itemsize bytes, little-endian, row-major

A JSON metadata blob may follow the records (uint32 length + UTF-8 bytes).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOEECKPT"
FORMAT_VERSION = 1
_DTYPES = {b"f4": np.dtype("<f4"), b"f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), b"<", struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype == np.float32:
            tag = b"f4"
        elif arr.dtype == np.float64:
            tag = b"f8"
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(tag)
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _loads(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc


def _loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    (version,) = struct.unpack_from("<H", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if buf[10:11] != b"<":
        raise CheckpointError("unsupported endianness tag")
    (count,) = struct.unpack_from("<I", buf, 11)
    off = 15
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        tag = bytes(buf[off:off + 2])
        off += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag!r}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise CheckpointError(f"{name}: payload runs past the end of the buffer")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        out[name] = arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    meta = {}
    if off < len(buf):
        (n,) = struct.unpack_from("<I", buf, off)
        if off + 4 + n != len(buf):
            raise CheckpointError("metadata length does not match the buffer")
        meta = json.loads(buf[off + 4:off + 4 + n].decode("utf-8"))
    return out, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
