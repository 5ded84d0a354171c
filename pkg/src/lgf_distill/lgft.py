"""Reader/writer for the ``LGFT`` binary tensor format.

Layout (little-endian)::

    b"LGFT" | version u32 | dtype u8 | ndim u8 | extents u64[ndim] | payload

Dtype codes: 0 = float32, 1 = float64, 2 = uint8 (masks).
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LGFT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}


class LGFTError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    native = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    code = CODES.get(native.str)
    if code is None:
        raise LGFTError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise LGFTError(f"unsupported rank {arr.ndim}")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise LGFTError("bad magic; not an LGFT file")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise LGFTError(f"unsupported LGFT version {version}")
    if code not in DTYPES:
        raise LGFTError(f"unknown dtype code {code}")
    off = 10
    if len(buf) < off + 8 * ndim:
        raise LGFTError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise LGFTError(f"payload is {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(arr))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
