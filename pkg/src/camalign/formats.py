"""Tiny binary file formats: PPM/PGM images and a raw float64 tensor dump.

Everything here is written byte-for-byte deterministically so that
re-running a generator or trainer with the same seed produces identical
files.  Readers validate magic, header fields, and payload length and raise
``DataError`` naming the offending path.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

_FTEN_MAGIC = b"FTEN"


def write_ften(path, arr) -> None:
    """Dump a float64 array: magic, u32 rank, u32 dims, little-endian data."""
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_FTEN_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def read_ften(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FTEN_MAGIC:
        raise DataError(f"not a tensor file (bad magic): {path}")
    try:
        (rank,) = struct.unpack_from("<I", blob, 4)
        dims = struct.unpack_from(f"<{rank}I", blob, 8)
    except struct.error:
        raise DataError(f"truncated tensor header: {path}") from None
    count = 1
    for d in dims:
        count *= d
    payload = blob[8 + 4 * rank:]
    if len(payload) != 8 * count:
        raise DataError(
            f"tensor payload length {len(payload)} does not match dims {dims}: {path}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def _write_netpbm(path, magic, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"netpbm writer needs uint8 data, got {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, rgb_u8) -> None:
    """Binary P6, 8-bit RGB, rows top to bottom."""
    if rgb_u8.ndim != 3 or rgb_u8.shape[2] != 3:
        raise ValueError(f"PPM writer needs (H,W,3), got {rgb_u8.shape}")
    _write_netpbm(path, "P6", rgb_u8)


def write_pgm(path, gray_u8) -> None:
    """Binary P5, 8-bit grayscale."""
    if gray_u8.ndim != 2:
        raise ValueError(f"PGM writer needs (H,W), got {gray_u8.shape}")
    _write_netpbm(path, "P5", gray_u8)


def _read_netpbm(path, magic, channels):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image: {path} ({exc})") from None
    # Header = magic + three ascii integers separated by whitespace/comments,
    # then a single whitespace byte before the raw payload.
    if not blob.startswith(magic.encode("ascii")):
        raise DataError(f"not a {magic} file (bad magic): {path}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated {magic} header: {path}")
        try:
            fields.append(int(blob[start:pos]))
        except ValueError:
            raise DataError(f"malformed {magic} header: {path}") from None
    pos += 1  # the single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"unsupported {magic} maxval {maxval}: {path}")
    need = w * h * channels
    payload = blob[pos:]
    if len(payload) != need:
        raise DataError(
            f"{magic} payload length {len(payload)}, expected {need}: {path}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return arr.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, "P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, "P5", 1)
