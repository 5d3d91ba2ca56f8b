"""Versioned binary checkpoint container.

Layout: magic ``CQRS``, format version (u32 LE), store seed (u64 LE),
JSON config block (u64 length + UTF-8 bytes), tensor count (u64), then per
tensor: name (u32 length + UTF-8), trainable flag (u8), dtype code (u8:
0=float64, 1=float32), ndim (u32), dims (u64 each), raw little-endian
payload. Round-trips are bit-exact.
"""

import json
import struct

import numpy as np

from .autodiff import ParamStore
from .errors import CheckpointError

MAGIC = b"CQRS"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_checkpoint(params: ParamStore, config: dict, path: str) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", params.seed))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        names = params.names()
        f.write(struct.pack("<Q", len(names)))
        for name in names:
            t = params[name]
            data = np.ascontiguousarray(t.data)
            code = _DTYPE_CODES[np.dtype(data.dtype)]
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 1 if t.requires_grad else 0, code))
            f.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<Q", d))
            f.write(data.astype(_DTYPES[code], copy=False).tobytes())


def _read(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        if _read(f, 4) != MAGIC:
            raise CheckpointError("bad magic bytes: not a checkpoint (version error)")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        (seed,) = struct.unpack("<Q", _read(f, 8))
        (blob_len,) = struct.unpack("<Q", _read(f, 8))
        try:
            config = json.loads(_read(f, blob_len).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt config block: {exc}") from exc
        (count,) = struct.unpack("<Q", _read(f, 8))
        store = ParamStore(seed=seed)
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, name_len).decode("utf-8")
            trainable, code = struct.unpack("<BB", _read(f, 2))
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
            (ndim,) = struct.unpack("<I", _read(f, 4))
            shape = tuple(struct.unpack("<Q", _read(f, 8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            payload = _read(f, n_items * _DTYPES[code].itemsize)
            arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
            t = store.add(name, shape, init="zeros", trainable=bool(trainable))
            t.data = arr.astype(store.dtype)
    return store, config
