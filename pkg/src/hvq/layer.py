"""Configuration and container types shared by the quantizer and the file format."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import PrecisionOverflowError, ValidationError
from .tensorio import FP16_MAX


@dataclass(frozen=True)
class QuantConfig:
    """Hyperparameters for one quantization job.

    ``(d, n, k)``: each codebook entry covers ``d`` consecutive columns, each
    codebook has ``n`` entries, and every block of ``k`` rows gets its own
    codebook per column group.
    """

    d: int = 2
    n: int = 64
    k: int = 1024
    damping_rel: float = 0.01
    codebook_int8: bool = False
    lowrank_r: int = 0
    seed: int = 0
    kmeans_max_iters: int = 100
    flip_passes: int = 10
    fast_order: bool = False

    def __post_init__(self):
        for name in ("d", "n", "k"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.n > self.k:
            raise ValidationError(f"n={self.n} must not exceed k={self.k}")
        if self.d > 0xFFFF or self.n > 0xFFFFFFFF or self.k > 0xFFFFFFFF:
            raise ValidationError("d, n or k too large for the file header")
        if self.lowrank_r < 0:
            raise ValidationError(f"lowrank_r must be >= 0, got {self.lowrank_r}")
        if not self.damping_rel > 0:
            raise ValidationError(f"damping_rel must be positive, got {self.damping_rel}")
        if self.kmeans_max_iters < 1 or self.flip_passes < 0:
            raise ValidationError("kmeans_max_iters must be >= 1 and flip_passes >= 0")
        if self.n & (self.n - 1):
            warnings.warn(f"n={self.n} is not a power of two; index bits are wasted", stacklevel=3)

    @property
    def index_bits(self) -> int:
        """Bits per index entry, ceil(log2 n)."""
        return (self.n - 1).bit_length()

    def check_shape(self, N: int, M: int) -> None:
        if self.lowrank_r > min(N, M):
            raise ValidationError(f"lowrank_r={self.lowrank_r} exceeds min(N, M)={min(N, M)}")


def default_lowrank_rank(N: int, M: int) -> int:
    return math.ceil(min(N, M) / 100)


def column_groups(M: int, d: int) -> list[np.ndarray]:
    """Consecutive width-d column groups; the last one is narrower when d does not divide M."""
    return [np.arange(s, min(s + d, M)) for s in range(0, M, d)]


def row_blocks(N: int, k: int) -> list[slice]:
    return [slice(s, min(s + k, N)) for s in range(0, N, k)]


class Int8Codebook(NamedTuple):
    grid: np.ndarray  # (n, w) uint8
    mins: np.ndarray  # (w,)
    maxs: np.ndarray  # (w,)


def quantize_codebook_int8(cb) -> Int8Codebook:
    """Map each codebook dimension linearly onto 0..255 using its min and max.

    A constant dimension (min == max) maps to all zeros.
    """
    cb = np.asarray(cb, dtype=np.float64)
    mins = cb.min(axis=0)
    maxs = cb.max(axis=0)
    span = maxs - mins
    safe = np.where(span > 0, span, 1.0)
    scaled = np.rint(255.0 * (cb - mins) / safe)
    grid = np.clip(np.where(span > 0, scaled, 0.0), 0, 255).astype(np.uint8)
    return Int8Codebook(grid, mins, maxs)


def dequantize_codebook_int8(q: Int8Codebook) -> np.ndarray:
    mins = np.asarray(q.mins, dtype=np.float64)
    span = np.asarray(q.maxs, dtype=np.float64) - mins
    return mins + q.grid.astype(np.float64) / 255.0 * span


def round_fp16(x, what: str = "value") -> np.ndarray:
    """Round to the nearest fp16 value, kept as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and float(np.max(np.abs(x))) > FP16_MAX:
        raise PrecisionOverflowError(f"{what} exceeds the fp16 range (max {FP16_MAX})")
    return x.astype(np.float16).astype(np.float64)


def _fp16_exact(x: np.ndarray) -> bool:
    return bool(np.array_equal(x, x.astype(np.float16).astype(np.float64)))


@dataclass
class QuantizedLayer:
    """Index matrix plus per-(row block, column group) codebooks.

    ``codebooks[b][g]`` is the (n, w_g) array of values used for
    reconstruction. With int8 codebooks these are the dequantized grid values
    and ``int8_params[b][g]`` holds the stored grid and per-dimension range.
    All stored reals (codebooks, int8 ranges, low-rank factors) are
    fp16-representable so the on-disk form loses nothing.
    """

    N: int
    M: int
    config: QuantConfig
    index: np.ndarray
    codebooks: list[list[np.ndarray]]
    int8_params: list[list[Int8Codebook]] | None = None
    lowrank_A: np.ndarray | None = None
    lowrank_B: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def groups(self) -> list[np.ndarray]:
        return column_groups(self.M, self.config.d)

    @property
    def blocks(self) -> list[slice]:
        return row_blocks(self.N, self.config.k)

    @property
    def lowrank_r(self) -> int:
        return 0 if self.lowrank_A is None else self.lowrank_A.shape[1]

    def validate(self) -> None:
        cfg = self.config
        groups, blocks = self.groups, self.blocks
        if self.index.shape != (self.N, len(groups)):
            raise ValidationError(f"index shape {self.index.shape} != ({self.N}, {len(groups)})")
        if self.index.size and (self.index.min() < 0 or self.index.max() >= cfg.n):
            raise ValidationError(f"index entries must lie in [0, {cfg.n})")
        if len(self.codebooks) != len(blocks) or any(len(row) != len(groups) for row in self.codebooks):
            raise ValidationError("codebook grid does not match row blocks x column groups")
        for row in self.codebooks:
            for cols, cb in zip(groups, row):
                if cb.shape != (cfg.n, len(cols)):
                    raise ValidationError(f"codebook shape {cb.shape} != ({cfg.n}, {len(cols)})")
                if not np.all(np.isfinite(cb)):
                    raise ValidationError("codebook contains NaN or Inf")
        if cfg.codebook_int8:
            if self.int8_params is None:
                raise ValidationError("int8 codebook flag set but no int8 parameters")
            for row, prow in zip(self.codebooks, self.int8_params):
                for cb, q in zip(row, prow):
                    if np.any(q.mins > q.maxs):
                        raise ValidationError("int8 codebook has min > max")
                    if not (_fp16_exact(q.mins) and _fp16_exact(q.maxs)):
                        raise ValidationError("int8 ranges must be fp16-representable")
                    if not np.array_equal(cb, dequantize_codebook_int8(q)):
                        raise ValidationError("codebook values disagree with their int8 grid")
        else:
            if self.int8_params is not None:
                raise ValidationError("int8 parameters present but flag not set")
            if not all(_fp16_exact(cb) for row in self.codebooks for cb in row):
                raise ValidationError("codebook values must be fp16-representable")
        if (self.lowrank_A is None) != (self.lowrank_B is None):
            raise ValidationError("low-rank factors must be given together")
        if self.lowrank_A is not None:
            r = self.lowrank_A.shape[1]
            if self.lowrank_A.shape != (self.N, r) or self.lowrank_B.shape != (r, self.M):
                raise ValidationError("low-rank factor shapes do not match N x r and r x M")
            if r == 0:
                raise ValidationError("empty low-rank factors; use None instead")
            if not (_fp16_exact(self.lowrank_A) and _fp16_exact(self.lowrank_B)):
                raise ValidationError("low-rank factors must be fp16-representable")
