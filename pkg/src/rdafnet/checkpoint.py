"""Binary checkpoint archive.

Layout (little-endian)::

    b"RDAF" | u32 version | u32 record count | records...
    record = u32 name length | UTF-8 name | u8 dtype tag | u8 rank | rank x u32 dims | raw values

Network parameters are stored under their module path, optimizer moments
under ``opt/``, and bookkeeping under ``meta/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDAF"
VERSION = 1

TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
DTYPE_TAGS = {(dt.kind, dt.itemsize): tag for tag, dt in TAG_DTYPES.items()}


class CheckpointError(ValueError):
    pass


def encode(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        tag = DTYPE_TAGS.get((arr.dtype.kind, arr.dtype.itemsize))
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        dt = TAG_DTYPES[tag]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"{name}: truncated record")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(records))


def load(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


def json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def json_from_record(arr: np.ndarray):
    return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))


def load_into(module, records: dict[str, np.ndarray]) -> None:
    """Copy parameter records into ``module``; mismatches are listed together."""
    problems = []
    params = dict(module.named_parameters())
    for name, p in params.items():
        if name not in records:
            problems.append(f"{name}: missing")
        elif records[name].shape != p.shape:
            problems.append(f"{name}: checkpoint {records[name].shape} vs network {p.shape}")
    extra = [k for k in records if "/" not in k and k not in params]
    problems.extend(f"{k}: not in network" for k in extra)
    if problems:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, p in params.items():
        p.data[...] = records[name]
