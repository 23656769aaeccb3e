"""ELFT binary tensor files.

Layout: ``b"ELFT"``, u8 version (1), u8 dtype code (0=f32, 1=f64), u8 ndim,
``ndim`` little-endian u32 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"ELFT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"dtype: ELFT stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError(f"ndim: {arr.ndim} exceeds 255")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("header: file shorter than the 7-byte header")
    if buf[:4] != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"version: expected {VERSION}, got {version}")
    if code not in _DTYPES:
        raise FormatError(f"dtype: unknown code {code}")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise FormatError("dims: truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"payload: expected {expected} bytes for dims {dims}, got {len(buf) - off}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else t
    atomic_write_bytes(path, encode(data))


def load_array(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())


def load(path: str | os.PathLike) -> Tensor:
    arr = load_array(path)
    return Tensor(arr, dtype=arr.dtype)
