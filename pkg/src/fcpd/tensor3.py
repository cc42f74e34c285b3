"""Dense third-order tensor algebra: matricizations, Khatri-Rao products,
rank-one reconstruction, and residual norms.

The unfolding convention is pinned so that a rank-r tensor built from
factors (W, V, T3) satisfies, exactly,

    matricize(T, 1) = W @ khatri_rao(T3, V).T       (n  x mN)
    matricize(T, 2) = V @ khatri_rao(T3, W).T       (m  x nN)
    matricize(T, 3) = T3 @ khatri_rao(V, W).T       (N  x nm)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FactorSet:
    """CP factors W (n x r), V (m x r) and a third factor (N x r).

    ``tag`` records the meaning of the third factor: "H" when it holds
    derivative samples, "G" when it holds function samples.
    """

    W: np.ndarray
    V: np.ndarray
    third: np.ndarray
    tag: str = "H"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        T3 = np.asarray(self.third, dtype=np.float64)
        if W.ndim != 2 or V.ndim != 2 or T3.ndim != 2:
            raise ValueError("factors must be 2-d arrays")
        if not (W.shape[1] == V.shape[1] == T3.shape[1]):
            raise ValueError("factors must share the column count r")
        if W.shape[1] < 1:
            raise ValueError("rank r must be at least 1")
        if self.tag not in ("H", "G"):
            raise ValueError("tag must be 'H' or 'G'")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "third", T3)

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.W.shape[0], self.V.shape[0], self.third.shape[0])


def _check_tensor(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3:
        raise ValueError("expected a third-order tensor")
    return T


def matricize(T: np.ndarray, mode: int) -> np.ndarray:
    """Unfold an (n, m, N) tensor along the given mode (1, 2 or 3)."""
    T = _check_tensor(T)
    n, m, N = T.shape
    if mode == 1:
        return T.reshape(n, m * N, order="F")
    if mode == 2:
        return T.transpose(1, 0, 2).reshape(m, n * N, order="F")
    if mode == 3:
        return T.transpose(2, 0, 1).reshape(N, n * m, order="F")
    raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")


def khatri_rao(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product of A (I x r) and B (J x r) -> (IJ x r)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("khatri_rao needs matching column counts")
    I, r = A.shape
    J = B.shape[0]
    return (A[:, None, :] * B[None, :, :]).reshape(I * J, r)


def reconstruct(factors: FactorSet) -> np.ndarray:
    """Assemble the rank-r tensor sum_i W[:,i] o V[:,i] o third[:,i]."""
    return np.einsum("ji,ki,li->jkl", factors.W, factors.V, factors.third)


@dataclass(frozen=True)
class ResidualReport:
    squared_frobenius: float
    relative_percent: float  # NaN when the reference tensor is zero

    @property
    def relative_defined(self) -> bool:
        return not math.isnan(self.relative_percent)


def residual(T: np.ndarray, factors: FactorSet) -> ResidualReport:
    """Squared Frobenius misfit of the factors, plus the percentage form
    ||T - [[W,V,T3]]||_F / ||T||_F * 100 (NaN for a zero reference)."""
    T = _check_tensor(T)
    if T.shape != factors.shape:
        raise ValueError(f"tensor {T.shape} and factors {factors.shape} disagree")
    diff = T - reconstruct(factors)
    sq = float(np.sum(diff * diff))
    ref = float(np.linalg.norm(T))
    rel = math.sqrt(sq) / ref * 100.0 if ref > 0.0 else math.nan
    return ResidualReport(sq, rel)
