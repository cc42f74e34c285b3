"""Baseline canonical polyadic decomposition by alternating least squares.

Kept deliberately plain: it is the comparison point that shows why an
unconstrained decomposition of a Jacobian stack, although numerically
exact, scatters the third factor instead of tracing smooth curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor3 import FactorSet, khatri_rao, matricize, residual

# Singular values below this fraction of the largest are truncated when
# inverting the r x r Gram matrices.
GRAM_PINV_RCOND = 1e-12


@dataclass(frozen=True)
class AlsOptions:
    max_iterations: int = 500
    tolerance: float = 1e-10   # relative change of the squared residual
    seed: int | None = None
    restarts: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass(frozen=True, eq=False)
class AlsResult:
    factors: FactorSet
    trace: np.ndarray        # squared residual after every sweep
    relative_percent: float
    iterations: int
    restart_index: int


def als_update(T: np.ndarray, factors: FactorSet, mode: int) -> np.ndarray:
    """Exact least-squares update of one factor, the other two fixed.

    Uses the Gram-Hadamard identity so only an r x r matrix is
    (pseudo-)inverted; near-singular Gram matrices fall back to a
    truncated pseudoinverse.
    """
    W, V, H = factors.W, factors.V, factors.third
    if mode == 1:
        rhs = np.einsum("jkl,li,ki->ji", T, H, V)
        gram = (H.T @ H) * (V.T @ V)
    elif mode == 2:
        rhs = np.einsum("jkl,li,ji->ki", T, H, W)
        gram = (H.T @ H) * (W.T @ W)
    elif mode == 3:
        rhs = np.einsum("jkl,ki,ji->li", T, V, W)
        gram = (V.T @ V) * (W.T @ W)
    else:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return rhs @ np.linalg.pinv(gram, rcond=GRAM_PINV_RCOND, hermitian=True)


def _normalized(W: np.ndarray, V: np.ndarray, H: np.ndarray):
    """Push the column scales of W and V into H (fixes the scaling drift)."""
    wn = np.linalg.norm(W, axis=0)
    vn = np.linalg.norm(V, axis=0)
    wn = np.where(wn > 0, wn, 1.0)
    vn = np.where(vn > 0, vn, 1.0)
    return W / wn, V / vn, H * (wn * vn)


def cpd_als(T: np.ndarray, r: int, opts: AlsOptions = AlsOptions()) -> AlsResult:
    """Best-of-restarts ALS fit of a rank-r model to a third-order tensor."""
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3:
        raise ValueError("expected a third-order tensor")
    if r < 1:
        raise ValueError("rank r must be at least 1")
    if not np.all(np.isfinite(T)):
        raise ValueError("tensor entries must be finite")

    n, m, N = T.shape
    # Once the residual is this far below the data scale the factors are
    # exact for every practical purpose; iterating further only churns.
    sq_floor = (1e-14 * np.linalg.norm(T)) ** 2
    root = np.random.SeedSequence(opts.seed)
    best: AlsResult | None = None
    for restart, child in enumerate(root.spawn(opts.restarts)):
        rng = np.random.default_rng(child)
        W = rng.uniform(-1.0, 1.0, size=(n, r))
        V = rng.uniform(-1.0, 1.0, size=(m, r))
        H = rng.uniform(-1.0, 1.0, size=(N, r))

        trace = []
        prev = None
        for sweep in range(opts.max_iterations):
            W = als_update(T, FactorSet(W, V, H), 1)
            V = als_update(T, FactorSet(W, V, H), 2)
            H = als_update(T, FactorSet(W, V, H), 3)
            W, V, H = _normalized(W, V, H)
            sq = residual(T, FactorSet(W, V, H)).squared_frobenius
            trace.append(sq)
            if sq <= sq_floor:
                break
            if prev is not None and abs(prev - sq) <= opts.tolerance * max(prev, 1e-300):
                break
            prev = sq

        factors = FactorSet(W, V, H, tag="H")
        rep = residual(T, factors)
        result = AlsResult(factors, np.asarray(trace), rep.relative_percent,
                           len(trace), restart)
        if best is None or result.trace[-1] < best.trace[-1]:
            best = result
    return best
