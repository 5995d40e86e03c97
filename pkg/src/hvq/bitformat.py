"""ATQZ container for quantized layers, dequantization, and bit accounting.

Layout (little-endian, no alignment padding)::

    magic b"ATQZ" | version u32 = 1 | N u64 | M u64 | d u16 | n u32 | k u32
    flags u8 (bit0 int8 codebook, bit1 low-rank) | r u32
    section table: 4 x (offset u64, length u64) for
        INDEX, CODEBOOK, LOWRANK_A, LOWRANK_B   (absent: offset 0, length 0)
    sections, back to back in table order

INDEX
    For each block of k rows: its rows' index entries, row-major, each
    ceil(log2 n) bits wide, packed LSB-first into bytes. Every row block
    starts on a fresh byte (zero padding at the end of each block).
CODEBOOK
    Codebooks in row-block-major, then column-group, entry, dimension order.
    fp16 values, or with the int8 flag: all u8 grids in that order followed by
    one (min fp16, max fp16) pair per codebook dimension in the same order.
LOWRANK_A / LOWRANK_B
    N x r and r x M fp16 matrices, row-major.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError
from .layer import (
    Int8Codebook,
    QuantConfig,
    QuantizedLayer,
    column_groups,
    dequantize_codebook_int8,
    row_blocks,
)

MAGIC = b"ATQZ"
VERSION = 1
HEAD = struct.Struct("<4sIQQHIIBI")
TABLE = struct.Struct("<8Q")
HEADER_BYTES = HEAD.size + TABLE.size
FLAG_INT8 = 0x1
FLAG_LOWRANK = 0x2
SECTIONS = ("INDEX", "CODEBOOK", "LOWRANK_A", "LOWRANK_B")

F16 = np.dtype("<f2")


@dataclass(frozen=True)
class BitReport:
    """Storage cost in bits per weight.

    With matrix dimensions the figures are exact for the file that
    :func:`serialize` writes: ``b_total * N * M / 8 + file_overhead_bytes``
    is its size in bytes. Without dimensions they are the asymptotic
    per-weight rates ``bits*n/k`` and ``ceil(log2 n)/d``.
    """

    b_c: float
    b_i: float
    b_lr: float
    b_total: float
    file_overhead_bytes: int
    exact: bool

    def as_dict(self) -> dict:
        return asdict(self)


def _section_bytes(cfg: QuantConfig, N: int, M: int, r: int) -> dict[str, int]:
    G = math.ceil(M / cfg.d)
    bw = cfg.index_bits
    blocks = row_blocks(N, cfg.k)
    index = sum(math.ceil((b.stop - b.start) * G * bw / 8) for b in blocks)
    values = cfg.n * M * len(blocks)
    if cfg.codebook_int8:
        codebook, ranges = values, 4 * M * len(blocks)
    else:
        codebook, ranges = 2 * values, 0
    return {
        "INDEX": index,
        "CODEBOOK": codebook + ranges,
        "CODEBOOK_RANGES": ranges,
        "LOWRANK_A": 2 * N * r,
        "LOWRANK_B": 2 * r * M,
    }


def bits_per_weight(cfg: QuantConfig, N: int | None = None, M: int | None = None) -> BitReport:
    """Bits per weight for ``cfg``, exact when ``N`` and ``M`` are given.

    Codebooks cost 16 bits per value (8 with int8 codebooks), indices
    ceil(log2 n) bits per d weights, low-rank factors 16 bits per value.
    The int8 per-dimension ranges, header and section table are counted in
    ``file_overhead_bytes`` rather than in the rates.
    """
    cb_bits = 8 if cfg.codebook_int8 else 16
    if N is None or M is None:
        if cfg.lowrank_r:
            raise ValidationError("low-rank bit cost needs the matrix dimensions")
        b_c = cb_bits * cfg.n / cfg.k
        b_i = cfg.index_bits / cfg.d
        return BitReport(b_c, b_i, 0.0, b_c + b_i, HEADER_BYTES, exact=False)
    cfg.check_shape(N, M)
    sizes = _section_bytes(cfg, N, M, cfg.lowrank_r)
    weights = N * M
    b_c = 8 * (sizes["CODEBOOK"] - sizes["CODEBOOK_RANGES"]) / weights
    b_i = 8 * sizes["INDEX"] / weights
    b_lr = 8 * (sizes["LOWRANK_A"] + sizes["LOWRANK_B"]) / weights
    return BitReport(b_c, b_i, b_lr, b_c + b_i + b_lr, HEADER_BYTES + sizes["CODEBOOK_RANGES"], exact=True)


def pack_indices(values: np.ndarray, width: int) -> bytes:
    if width == 0 or values.size == 0:
        return b""
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((values.astype(np.uint64)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_indices(buf: bytes, count: int, width: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * width]
    weights = np.left_shift(np.uint64(1), np.arange(width, dtype=np.uint64))
    return (bits.reshape(count, width).astype(np.uint64) @ weights).astype(np.int64)


def serialize(layer: QuantizedLayer) -> bytes:
    layer.validate()
    cfg = layer.config
    blocks = layer.blocks
    bw = cfg.index_bits

    index = b"".join(pack_indices(layer.index[b].ravel(), bw) for b in blocks)
    if cfg.codebook_int8:
        grids = b"".join(q.grid.tobytes() for row in layer.int8_params for q in row)
        ranges = b"".join(
            np.stack([q.mins, q.maxs], axis=1).astype(F16).tobytes()
            for row in layer.int8_params
            for q in row
        )
        codebook = grids + ranges
    else:
        codebook = b"".join(cb.astype(F16).tobytes() for row in layer.codebooks for cb in row)
    r = layer.lowrank_r
    A = layer.lowrank_A.astype(F16).tobytes() if r else b""
    B = layer.lowrank_B.astype(F16).tobytes() if r else b""

    flags = (FLAG_INT8 if cfg.codebook_int8 else 0) | (FLAG_LOWRANK if r else 0)
    head = HEAD.pack(MAGIC, VERSION, layer.N, layer.M, cfg.d, cfg.n, cfg.k, flags, r)
    table, offset = [], HEADER_BYTES
    for payload in (index, codebook, A, B):
        table += [offset, len(payload)] if payload else [0, 0]
        offset += len(payload)
    return head + TABLE.pack(*table) + index + codebook + A + B


def read_header(buf: bytes) -> tuple[QuantConfig, int, int, list[tuple[int, int]]]:
    """Parse the fixed header and section table without touching payloads."""
    if len(buf) < HEADER_BYTES:
        raise FormatError(f"ATQZ header needs {HEADER_BYTES} bytes, got {len(buf)}")
    magic, version, N, M, d, n, k, flags, r = HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported ATQZ version {version}")
    if flags & ~(FLAG_INT8 | FLAG_LOWRANK):
        raise FormatError(f"unknown flag bits 0x{flags:02x}")
    if N < 1 or M < 1:
        raise FormatError(f"invalid dimensions {N}x{M}")
    if bool(flags & FLAG_LOWRANK) != (r > 0):
        raise FormatError("low-rank flag and rank disagree")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = QuantConfig(d=d, n=n, k=k, codebook_int8=bool(flags & FLAG_INT8), lowrank_r=r)
        cfg.check_shape(N, M)
    except ValidationError as exc:
        raise FormatError(f"invalid header: {exc}") from None
    raw = TABLE.unpack_from(buf, HEAD.size)
    return cfg, N, M, list(zip(raw[0::2], raw[1::2]))


def deserialize(buf: bytes) -> QuantizedLayer:
    cfg, N, M, table = read_header(buf)
    sizes = _section_bytes(cfg, N, M, cfg.lowrank_r)
    offset = HEADER_BYTES
    payloads = {}
    for name, (off, length) in zip(SECTIONS, table):
        want = sizes[name]
        if want == 0:
            if (off, length) != (0, 0):
                raise CorruptionError(f"{name} section should be empty")
            payloads[name] = b""
            continue
        if off != offset or length != want:
            raise CorruptionError(f"{name} section at ({off}, {length}), expected ({offset}, {want})")
        if off + length > len(buf):
            raise CorruptionError(f"{name} section truncated")
        payloads[name] = buf[off : off + length]
        offset += length
    if offset != len(buf):
        raise CorruptionError(f"{len(buf) - offset} trailing bytes after last section")

    groups = column_groups(M, cfg.d)
    blocks = row_blocks(N, cfg.k)
    bw = cfg.index_bits
    index = np.empty((N, len(groups)), dtype=np.int64)
    pos = 0
    for b in blocks:
        count = (b.stop - b.start) * len(groups)
        nbytes = math.ceil(count * bw / 8)
        index[b] = unpack_indices(payloads["INDEX"][pos : pos + nbytes], count, bw).reshape(-1, len(groups))
        pos += nbytes
    if index.size and index.max() >= cfg.n:
        raise CorruptionError(f"index entry {int(index.max())} out of range for n={cfg.n}")

    data = payloads["CODEBOOK"]
    codebooks: list[list[np.ndarray]] = []
    int8_params = [] if cfg.codebook_int8 else None
    pos = 0
    if cfg.codebook_int8:
        range_pos = sizes["CODEBOOK"] - sizes["CODEBOOK_RANGES"]
        for _ in blocks:
            row, prow = [], []
            for cols in groups:
                w = len(cols)
                grid = np.frombuffer(data, np.uint8, cfg.n * w, pos).reshape(cfg.n, w).copy()
                pos += cfg.n * w
                pairs = np.frombuffer(data, F16, 2 * w, range_pos).astype(np.float64).reshape(w, 2)
                range_pos += 4 * w
                if not np.all(np.isfinite(pairs)) or np.any(pairs[:, 0] > pairs[:, 1]):
                    raise CorruptionError("invalid int8 codebook range")
                q = Int8Codebook(grid, pairs[:, 0].copy(), pairs[:, 1].copy())
                prow.append(q)
                row.append(dequantize_codebook_int8(q))
            codebooks.append(row)
            int8_params.append(prow)
    else:
        for _ in blocks:
            row = []
            for cols in groups:
                count = cfg.n * len(cols)
                cb = np.frombuffer(data, F16, count, pos).astype(np.float64).reshape(cfg.n, len(cols))
                pos += 2 * count
                if not np.all(np.isfinite(cb)):
                    raise CorruptionError("codebook contains NaN or Inf")
                row.append(cb)
            codebooks.append(row)

    A = B = None
    if cfg.lowrank_r:
        r = cfg.lowrank_r
        A = np.frombuffer(payloads["LOWRANK_A"], F16).astype(np.float64).reshape(N, r)
        B = np.frombuffer(payloads["LOWRANK_B"], F16).astype(np.float64).reshape(r, M)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise CorruptionError("low-rank factors contain NaN or Inf")
    return QuantizedLayer(N, M, cfg, index, codebooks, int8_params, A, B)


def dequantize(layer: QuantizedLayer, lowrank: bool = True) -> np.ndarray:
    """Rebuild the N x M matrix: ``W[i, d*j + l] = C[i // k][j][I[i, j], l]``, plus A @ B."""
    out = np.empty((layer.N, layer.M))
    for b, row in zip(layer.blocks, layer.codebooks):
        for j, (cols, cb) in enumerate(zip(layer.groups, row)):
            out[b, cols[0] : cols[-1] + 1] = cb[layer.index[b, j]]
    if lowrank and layer.lowrank_A is not None:
        out += layer.lowrank_A @ layer.lowrank_B
    return out


def layers_equal(a: QuantizedLayer, b: QuantizedLayer) -> bool:
    """Field-for-field equality of everything the file format stores."""
    ca, cb_ = a.config, b.config
    if (a.N, a.M, ca.d, ca.n, ca.k, ca.codebook_int8, a.lowrank_r) != (
        b.N, b.M, cb_.d, cb_.n, cb_.k, cb_.codebook_int8, b.lowrank_r,
    ):
        return False
    if not np.array_equal(a.index, b.index):
        return False
    for ra, rb in zip(a.codebooks, b.codebooks):
        if not all(np.array_equal(x, y) for x, y in zip(ra, rb)):
            return False
    if ca.codebook_int8:
        for ra, rb in zip(a.int8_params, b.int8_params):
            for qa, qb in zip(ra, rb):
                if not all(np.array_equal(x, y) for x, y in zip(qa, qb)):
                    return False
    if a.lowrank_r:
        return np.array_equal(a.lowrank_A, b.lowrank_A) and np.array_equal(a.lowrank_B, b.lowrank_B)
    return True
