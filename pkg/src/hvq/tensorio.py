"""ATQT dense-tensor container and calibration ingestion.

Layout (little-endian, no padding)::

    magic   b"ATQT"        4 bytes
    version u32 = 1
    dtype   u8             0 = fp64, 1 = fp32, 2 = fp16
    reserved u8 x 3        zero
    rows    u64
    cols    u64
    payload rows*cols elements, row-major

Matrices are always handed back as read-only float64 arrays, whatever the
storage precision.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CorruptionError, FormatError, PrecisionOverflowError, ValidationError

MAGIC = b"ATQT"
VERSION = 1
HEADER = struct.Struct("<4sIB3sQQ")

DTYPES = {"fp64": (0, np.dtype("<f8")), "fp32": (1, np.dtype("<f4")), "fp16": (2, np.dtype("<f2"))}
_CODE_TO_DTYPE = {code: dt for code, dt in DTYPES.values()}

# Largest magnitude that still rounds to a finite fp16; values in
# (65504, 65520] saturate to 65504 instead of becoming inf.
FP16_MAX = 65504.0
FP16_SATURATE = 65520.0


def _finite_matrix(data, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{what} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains NaN or Inf")
    return arr


def as_weight_matrix(data) -> np.ndarray:
    """Validate and return a read-only float64 copy of an N x M weight matrix."""
    arr = _finite_matrix(data, "weight matrix")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"weight matrix must be at least 1x1, got {arr.shape}")
    out = np.array(arr, dtype=np.float64, order="C")
    out.flags.writeable = False
    return out


def _cast_for_storage(arr: np.ndarray, precision: str) -> np.ndarray:
    if precision not in DTYPES:
        raise ValidationError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    dtype = DTYPES[precision][1]
    if precision == "fp16":
        peak = float(np.max(np.abs(arr))) if arr.size else 0.0
        if peak > FP16_SATURATE:
            raise PrecisionOverflowError(f"value {peak} overflows fp16 (max {FP16_MAX})")
        arr = np.clip(arr, -FP16_MAX, FP16_MAX)
    elif precision == "fp32":
        peak = float(np.max(np.abs(arr))) if arr.size else 0.0
        if peak > float(np.finfo(np.float32).max):
            raise PrecisionOverflowError(f"value {peak} overflows fp32")
    return arr.astype(dtype)


def encode_tensor(data, precision: str = "fp64") -> bytes:
    arr = _finite_matrix(data, "matrix")
    code = DTYPES.get(precision, (None,))[0]
    payload = _cast_for_storage(arr, precision)
    rows, cols = arr.shape
    return HEADER.pack(MAGIC, VERSION, code, b"\0\0\0", rows, cols) + payload.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse an ATQT byte string. Zero-sized matrices are allowed here."""
    if len(buf) < HEADER.size:
        raise FormatError(f"ATQT header needs {HEADER.size} bytes, got {len(buf)}")
    magic, version, code, _reserved, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported ATQT version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    expected = rows * cols * dtype.itemsize
    actual = len(buf) - HEADER.size
    if actual != expected:
        raise CorruptionError(
            f"payload is {actual} bytes but header declares {rows}x{cols} "
            f"{dtype.name} ({expected} bytes)"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=HEADER.size).astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("payload contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def store_matrix(m, path: str | os.PathLike, precision: str = "fp64") -> None:
    """Write ``m`` as an ATQT file.

    Raises:
        PrecisionOverflowError: a value exceeds the range of ``precision``.
        OSError: the file cannot be written.
    """
    blob = encode_tensor(m, precision)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    """Read an ATQT file as a validated, read-only float64 weight matrix."""
    arr = read_tensor(path)
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"weight matrix must be at least 1x1, got {arr.shape}")
    return arr


def ingest_calibration(path: str | os.PathLike, expected_dim: int | None = None) -> np.ndarray:
    """Load an S x M matrix of activation rows for Hessian accumulation.

    An empty batch is rejected: an unguided quantization is never produced
    silently.
    """
    batch = read_tensor(path)
    samples, dim = batch.shape
    if samples == 0:
        raise ValidationError("calibration batch is empty; at least one sample is required")
    if expected_dim is not None and dim != expected_dim:
        raise ValidationError(f"calibration dim {dim} does not match weight columns M={expected_dim}")
    return batch
