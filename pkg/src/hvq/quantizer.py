"""Hessian-guided vector quantization of a weight matrix.

Columns are split into width-d groups. Each round, every unquantized group
gets a candidate quantization (k-means per block of k rows, under the
group's metric ``([Hinv]_QQ)^-1``). The candidate with the smallest
second-order loss is kept; the remaining columns are then compensated for
its error and the group is removed from the inverse Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from . import hessian as hs
from .bitformat import dequantize
from .errors import NumericalError, ValidationError
from .layer import (
    Int8Codebook,
    QuantConfig,
    QuantizedLayer,
    column_groups,
    dequantize_codebook_int8,
    quantize_codebook_int8,
    round_fp16,
    row_blocks,
)
from .rng import XorShift64Star
from .tensorio import as_weight_matrix
from .vq import flip_improve, weighted_kmeans

__all__ = [
    "GroupCandidate",
    "GroupPlan",
    "QuantStep",
    "build_candidate",
    "compensate",
    "group_loss",
    "make_plan",
    "proxy_loss",
    "quantize_codebook_int8",
    "quantize_matrix",
    "residual_lowrank",
    "rtn_baseline",
    "select_group",
]


@dataclass
class GroupPlan:
    column_groups: list[np.ndarray]
    remaining: set[int]


def make_plan(M: int, d: int) -> GroupPlan:
    groups = column_groups(M, d)
    return GroupPlan(groups, set(range(len(groups))))


@dataclass
class GroupCandidate:
    """Quantization of one column group across all row blocks."""

    gid: int
    cols: np.ndarray
    index: np.ndarray  # (N,)
    codebooks: list[np.ndarray]  # one (n, w) array per row block
    int8_params: list[Int8Codebook] | None
    What: np.ndarray  # (N, w) reconstruction
    loss: float


@dataclass
class QuantStep:
    """Snapshot passed to the ``on_step`` hook after each compensation."""

    step: int
    candidate: GroupCandidate
    W: np.ndarray
    state: hs.HessianState


def group_loss(W_Q, What_Q, G) -> float:
    """Sum over rows of ``0.5 * delta^T G delta`` with ``delta = W_Q - What_Q``."""
    delta = np.asarray(W_Q, dtype=np.float64) - np.asarray(What_Q, dtype=np.float64)
    return 0.5 * float(np.einsum("ri,ij,rj->", delta, np.asarray(G, dtype=np.float64), delta))


def _stream_seed(seed: int, gid: int, block: int) -> int:
    return XorShift64Star.derive(seed, gid, block).next_u64()


def build_candidate(
    W: np.ndarray,
    cols: np.ndarray,
    G: np.ndarray,
    cfg: QuantConfig,
    gid: int,
    warm: list[np.ndarray] | None = None,
) -> GroupCandidate:
    """Quantize columns ``cols`` of ``W`` with one codebook per row block.

    Codebook values are rounded to fp16 (and to the int8 grid when enabled)
    before the reconstruction is formed, so the candidate describes exactly
    what gets stored.
    """
    N = W.shape[0]
    w = len(cols)
    index = np.empty(N, dtype=np.int64)
    What = np.empty((N, w))
    codebooks, int8_params = [], ([] if cfg.codebook_int8 else None)
    for b, rows in enumerate(row_blocks(N, cfg.k)):
        pts = W[rows, cols[0] : cols[-1] + 1]
        init = None
        if warm is not None and warm[b].shape[1] == w:
            init = warm[b][: cfg.n]
        C, asg = weighted_kmeans(pts, G, cfg.n, _stream_seed(cfg.seed, gid, b), cfg.kmeans_max_iters, init)
        if cfg.flip_passes:
            C, asg = flip_improve(pts, G, C, asg, cfg.flip_passes, cfg.kmeans_max_iters)
        C = round_fp16(C, "codebook")
        if cfg.codebook_int8:
            q = quantize_codebook_int8(C)
            int8_params.append(q)
            C = dequantize_codebook_int8(q)
        codebooks.append(C)
        index[rows] = asg
        What[rows] = C[asg]
    loss = group_loss(W[:, cols[0] : cols[-1] + 1], What, G)
    return GroupCandidate(gid, cols, index, codebooks, int8_params, What, loss)


def select_group(
    W: np.ndarray,
    plan: GroupPlan,
    state: hs.HessianState,
    cfg: QuantConfig,
    warm: QuantizedLayer | None = None,
) -> GroupCandidate:
    """Build a candidate for every remaining group and return the one with the
    smallest group loss (lowest group id on ties)."""
    if not plan.remaining:
        raise ValidationError("no groups left to quantize")
    best = None
    for gid in sorted(plan.remaining):
        cols = plan.column_groups[gid]
        G = hs.group_metric(state, cols)
        cand = build_candidate(W, cols, G, cfg, gid, _warm_codebooks(warm, gid))
        if best is None or cand.loss < best.loss:
            best = cand
    return best


def compensate(W, Q, What_Q, state: hs.HessianState) -> np.ndarray:
    """Return ``W + dW`` where each row's update is the minimal-curvature change
    that moves columns Q onto ``What_Q``: ``dW = -(delta G) Hinv[Q, :]``."""
    W = np.asarray(W, dtype=np.float64)
    Q = hs.check_group(state, Q)
    G = hs.group_metric(state, Q)
    delta = W[:, Q] - np.asarray(What_Q, dtype=np.float64)
    return W - (delta @ G) @ state.Hinv[Q, :]


def _warm_codebooks(warm: QuantizedLayer | None, gid: int) -> list[np.ndarray] | None:
    if warm is None:
        return None
    return [row[gid] for row in warm.codebooks]


def quantize_matrix(
    W,
    state: hs.HessianState,
    cfg: QuantConfig,
    warm_start: QuantizedLayer | None = None,
    on_step: Callable[[QuantStep], None] | None = None,
) -> QuantizedLayer:
    """Quantize ``W`` (N x M) against the Hessian in ``state``.

    Args:
        W: weight matrix.
        state: freshly finalized Hessian state for the M input columns.
        cfg: quantization hyperparameters.
        warm_start: a layer with the same shape and d, k whose codebooks
            seed k-means (used for nested codebook-size sweeps).
        on_step: called after each group is compensated, before elimination.

    Returns:
        The quantized layer. ``meta`` records the group order and the proxy
        loss with and without the low-rank correction.
    """
    W0 = as_weight_matrix(W)
    N, M = W0.shape
    if state.dim != M:
        raise ValidationError(f"Hessian dim {state.dim} does not match weight columns M={M}")
    if state.eliminated:
        raise ValidationError("Hessian state already has eliminated columns")
    cfg.check_shape(N, M)
    if warm_start is not None and (
        (warm_start.N, warm_start.M, warm_start.config.d, warm_start.config.k) != (N, M, cfg.d, cfg.k)
    ):
        raise ValidationError("warm start layer must share N, M, d and k")

    plan = make_plan(M, cfg.d)
    blocks = row_blocks(N, cfg.k)
    index = np.empty((N, len(plan.column_groups)), dtype=np.int64)
    codebooks: list[list] = [[None] * len(plan.column_groups) for _ in blocks]
    int8_params = [[None] * len(plan.column_groups) for _ in blocks] if cfg.codebook_int8 else None

    Wk = np.array(W0)
    cur = state
    order = []
    while plan.remaining:
        if cfg.fast_order:
            gid = min(plan.remaining)
            cols = plan.column_groups[gid]
            cand = build_candidate(Wk, cols, hs.group_metric(cur, cols), cfg, gid, _warm_codebooks(warm_start, gid))
        else:
            cand = select_group(Wk, plan, cur, cfg, warm_start)
        gid = cand.gid
        index[:, gid] = cand.index
        for b in range(len(blocks)):
            codebooks[b][gid] = cand.codebooks[b]
            if int8_params is not None:
                int8_params[b][gid] = cand.int8_params[b]
        Wk = compensate(Wk, cand.cols, cand.What, cur)
        if on_step is not None:
            on_step(QuantStep(len(order), cand, Wk, cur))
        cur = hs.eliminate_group(cur, cand.cols)
        plan.remaining.discard(gid)
        order.append(gid)

    layer = QuantizedLayer(N, M, cfg, index, codebooks, int8_params)
    What = dequantize(layer)
    loss_before = proxy_loss(W0, What, state)
    layer.meta.update(order=order, proxy_loss_before_lowrank=loss_before, proxy_loss=loss_before)
    if cfg.lowrank_r:
        A, B = residual_lowrank(W0, What, state, cfg.lowrank_r)
        layer.lowrank_A = round_fp16(A, "low-rank factor A")
        layer.lowrank_B = round_fp16(B, "low-rank factor B")
        layer.meta["proxy_loss"] = proxy_loss(W0, dequantize(layer), state)
    return layer


def rtn_baseline(W, state: hs.HessianState, cfg: QuantConfig) -> np.ndarray:
    """Round-to-nearest-codebook reconstruction with the same codebook budget.

    Groups are taken left to right on the original weights, each with its
    metric from the un-eliminated Hessian; nothing is compensated.
    """
    W0 = as_weight_matrix(W)
    out = np.empty_like(W0)
    for gid, cols in enumerate(column_groups(W0.shape[1], cfg.d)):
        cand = build_candidate(W0, cols, hs.group_metric(state, cols), cfg, gid)
        out[:, cols[0] : cols[-1] + 1] = cand.What
    return out


def residual_lowrank(W, What, state: hs.HessianState, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r factors A (N x r), B (r x M) minimizing ``||(W - What - AB) U||_F``.

    With ``R U = u D v`` (thin SVD), ``A = u_r D_r`` and ``B = v_r U^-1``; the
    remaining weighted error is the sum of the discarded squared singular
    values of ``R U``.
    """
    R = np.asarray(W, dtype=np.float64) - np.asarray(What, dtype=np.float64)
    N, M = R.shape
    if not 0 <= r <= min(N, M):
        raise ValidationError(f"rank r={r} outside [0, {min(N, M)}]")
    if r == 0:
        return np.zeros((N, 0)), np.zeros((0, M))
    try:
        u, s, vt = np.linalg.svd(R @ state.U, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from None
    A = u[:, :r] * s[:r]
    B = scipy.linalg.solve_triangular(state.U, vt[:r].T, lower=True, trans="T").T
    return A, B


def proxy_loss(W, What_full, state: hs.HessianState) -> float:
    """``tr(R H R^T)`` with ``R = W - What_full``, evaluated as ``||R U||_F^2``."""
    RU = (np.asarray(W, dtype=np.float64) - np.asarray(What_full, dtype=np.float64)) @ state.U
    return float(np.sum(RU * RU))


def group_loss_breakdown(W, What_full, state: hs.HessianState, d: int) -> list[float]:
    """Per-column-group share of :func:`proxy_loss`.

    Group g gets ``sum over its columns of R * (R H)``, so the shares add up
    to the total (individual shares may be negative).
    """
    R = np.asarray(W, dtype=np.float64) - np.asarray(What_full, dtype=np.float64)
    per_col = np.sum(R * (R @ state.H), axis=0)
    return [float(per_col[c].sum()) for c in column_groups(R.shape[1], d)]
