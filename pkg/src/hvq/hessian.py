"""Layer Hessian from calibration activations, its inverse, and group elimination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError

COND_LIMIT = 1e12


@dataclass(frozen=True)
class HessianState:
    """Damped Hessian ``H``, its Cholesky factor ``U`` (H = U U^T, lower) and
    the running inverse ``Hinv`` with eliminated coordinates zeroed out.

    ``H`` and ``U`` never change after :func:`finalize`; only ``Hinv`` and
    ``eliminated`` move as groups are quantized.
    """

    H: np.ndarray
    Hinv: np.ndarray
    U: np.ndarray
    eliminated: frozenset[int] = field(default_factory=frozenset)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def surviving(self) -> np.ndarray:
        return np.array([i for i in range(self.dim) if i not in self.eliminated], dtype=np.intp)


def accumulate_hessian(batch) -> np.ndarray:
    """Return ``(2/S) * sum_s x_s x_s^T`` for the S activation rows of ``batch``."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("calibration batch must be a non-empty S x M matrix")
    if not np.all(np.isfinite(X)):
        raise ValidationError("calibration batch contains NaN or Inf")
    H = (2.0 / X.shape[0]) * (X.T @ X)
    return 0.5 * (H + H.T)


def finalize(H_raw, damping_rel: float = 0.01) -> HessianState:
    """Damp ``H_raw`` by ``damping_rel`` times its mean diagonal and factor it.

    When the mean diagonal is zero the damping is ``damping_rel * I``.
    """
    H_raw = np.asarray(H_raw, dtype=np.float64)
    if H_raw.ndim != 2 or H_raw.shape[0] != H_raw.shape[1] or H_raw.shape[0] == 0:
        raise ValidationError(f"Hessian must be a non-empty square matrix, got {H_raw.shape}")
    if not damping_rel > 0:
        raise ValidationError(f"damping_rel must be positive, got {damping_rel}")
    if not np.all(np.isfinite(H_raw)):
        raise ValidationError("Hessian contains NaN or Inf")
    scale = float(np.mean(np.diag(H_raw)))
    lam = damping_rel * scale if scale > 0 else damping_rel
    H = 0.5 * (H_raw + H_raw.T) + lam * np.eye(H_raw.shape[0])
    try:
        U = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(H)[0])
        raise NumericalError(
            f"Cholesky failed after damping; smallest eigenvalue estimate {smallest:.3e}"
        ) from None
    Hinv = scipy.linalg.cho_solve((U, True), np.eye(H.shape[0]))
    Hinv = 0.5 * (Hinv + Hinv.T)
    return HessianState(H=H, Hinv=Hinv, U=U)


def check_group(state: HessianState, Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.intp).ravel()
    if Q.size == 0:
        raise ValidationError("group must be non-empty")
    if np.any(np.diff(Q) <= 0):
        raise ValidationError(f"group indices must be strictly increasing: {Q.tolist()}")
    if Q[0] < 0 or Q[-1] >= state.dim:
        raise ValidationError(f"group indices out of range [0, {state.dim})")
    clash = state.eliminated.intersection(Q.tolist())
    if clash:
        raise ValidationError(f"columns {sorted(clash)} are already eliminated")
    return Q


def _inverse_block(block: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(block)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"inverse-Hessian block is singular (condition {cond:.3e})")
    try:
        c = scipy.linalg.cho_factor(block, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("inverse-Hessian block is not positive definite") from None
    inv = scipy.linalg.cho_solve(c, np.eye(block.shape[0]))
    return 0.5 * (inv + inv.T)


def group_metric(state: HessianState, Q) -> np.ndarray:
    """The d x d metric ``([Hinv]_QQ)^-1`` used as the k-means distance for group Q."""
    Q = check_group(state, Q)
    return _inverse_block(state.Hinv[np.ix_(Q, Q)])


def eliminate_group(state: HessianState, Q) -> HessianState:
    """Remove columns Q from the inverse Hessian.

    ``Hinv - Hinv[:, Q] ([Hinv]_QQ)^-1 Hinv[Q, :]``; the surviving block then
    equals the inverse of H restricted to the surviving indices. Rows and
    columns Q are set to exactly zero.
    """
    Q = check_group(state, Q)
    G = _inverse_block(state.Hinv[np.ix_(Q, Q)])
    cols = state.Hinv[:, Q]
    Hinv = state.Hinv - cols @ G @ cols.T
    Hinv = 0.5 * (Hinv + Hinv.T)
    Hinv[Q, :] = 0.0
    Hinv[:, Q] = 0.0
    return HessianState(
        H=state.H, Hinv=Hinv, U=state.U, eliminated=state.eliminated | frozenset(Q.tolist())
    )
