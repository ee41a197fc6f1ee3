"""Named-record binary container for parameters and full training state.

Layout (little-endian)::

    8s  magic b"PIPACKPT"
    u32 version
    u32 record count
    then per record:
      u32 name length, name (utf-8), u8 dtype code, u32 rank, u32[rank] extents, payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PIPACKPT"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "u1"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_records(path, records: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4", copy=False)
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        code = _CODES[arr.dtype.str]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_records(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 16
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BI", raw, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(raw):
                raise CheckpointError(f"{path}: truncated record {name}")
            out[name] = np.frombuffer(raw, dtype=dt, count=size // dt.itemsize,
                                      offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def text_record(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def record_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
