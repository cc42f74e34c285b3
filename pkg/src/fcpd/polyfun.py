"""Multivariate polynomials in the monomial basis: evaluation, analytic
Jacobians, operating-point sampling, and the stacked Jacobian array."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MonomialFunction:
    """A coupled polynomial map f: R^m -> R^n, stored term by term.

    ``exponents`` has one row per monomial (the powers of p_1..p_m) and
    ``coeffs`` the matching per-output coefficient rows, so

        f_i(p) = sum_t coeffs[t, i] * prod_j p_j ** exponents[t, j].

    Terms are kept sorted by exponent tuple, which makes equality a
    row-by-row comparison.
    """

    input_dim: int
    output_dim: int
    exponents: np.ndarray  # (T, m) non-negative ints
    coeffs: np.ndarray     # (T, n) floats

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        exps = np.asarray(self.exponents, dtype=np.int64)
        cofs = np.asarray(self.coeffs, dtype=np.float64)
        if exps.ndim != 2 or exps.shape[1] != self.input_dim:
            raise ValueError(f"exponents must be (T, {self.input_dim})")
        if exps.shape[0] == 0:
            raise ValueError("at least one term is required")
        if np.any(exps < 0):
            raise ValueError("exponents must be non-negative")
        if cofs.shape != (exps.shape[0], self.output_dim):
            raise ValueError(
                f"coeffs must be ({exps.shape[0]}, {self.output_dim})")
        order = np.lexsort(exps.T[::-1])
        exps = exps[order]
        cofs = cofs[order]
        if exps.shape[0] > 1 and np.any(np.all(np.diff(exps, axis=0) == 0, axis=1)):
            raise ValueError("exponent vectors must be pairwise distinct")
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "coeffs", cofs)
        self.exponents.setflags(write=False)
        self.coeffs.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, MonomialFunction):
            return NotImplemented
        return (self.input_dim == other.input_dim
                and self.output_dim == other.output_dim
                and self.exponents.shape == other.exponents.shape
                and np.array_equal(self.exponents, other.exponents)
                and np.array_equal(self.coeffs, other.coeffs))

    def scaled(self, alpha: float) -> "MonomialFunction":
        """Return alpha * f (coefficient scaling)."""
        return MonomialFunction(self.input_dim, self.output_dim,
                                self.exponents.copy(), alpha * self.coeffs)


@dataclass(frozen=True, eq=False)
class OperatingPointSet:
    """N sample locations in R^m, stored as the columns of ``points``."""

    points: np.ndarray  # (m, N)
    bounds: tuple[float, float]
    seed: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-d array (m, N)")
        if pts.shape[1] < 2:
            raise ValueError("at least 2 operating points are required")
        lo, hi = self.bounds
        if not (pts.min() >= lo and pts.max() <= hi):
            raise ValueError("points fall outside the declared bounds")
        object.__setattr__(self, "points", pts)
        self.points.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.points.shape[0]

    @property
    def count(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class JacobianTensor:
    """Dense n x m x N stack of Jacobian matrices of f at the given points."""

    data: np.ndarray  # (n, m, N)
    points: OperatingPointSet = field(repr=False)

    def __post_init__(self):
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _check_point(f: MonomialFunction, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (f.input_dim,):
        raise ValueError(f"point must have length {f.input_dim}, got {p.shape}")
    return p


def eval_poly(f: MonomialFunction, p) -> np.ndarray:
    """Evaluate f at a single point, returning a length-n vector."""
    p = _check_point(f, p)
    monos = np.prod(p[None, :] ** f.exponents, axis=1)
    return f.coeffs.T @ monos


def eval_poly_batch(f: MonomialFunction, P: np.ndarray) -> np.ndarray:
    """Evaluate f at every column of P (m x N), returning n x N."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] != f.input_dim:
        raise ValueError(f"points must have {f.input_dim} rows")
    monos = np.prod(P[None, :, :] ** f.exponents[:, :, None], axis=1)
    return f.coeffs.T @ monos


def eval_jacobian(f: MonomialFunction, p) -> np.ndarray:
    """Analytic Jacobian of f at a single point (n x m)."""
    p = _check_point(f, p)
    return build_jacobian_stack(f, p[:, None])[:, :, 0]


def build_jacobian_stack(f: MonomialFunction, P: np.ndarray) -> np.ndarray:
    """Analytic Jacobians at every column of P, stacked as n x m x N.

    Each partial derivative reduces the exponent of one variable by one
    and multiplies by the old exponent; terms with a zero exponent drop
    out, so 0**0 never produces spurious values at the origin.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] != f.input_dim:
        raise ValueError(f"points must have {f.input_dim} rows")
    n, m = f.output_dim, f.input_dim
    N = P.shape[1]
    exps = f.exponents
    out = np.zeros((n, m, N))
    for j in range(m):
        e_j = exps[:, j]
        red = exps.copy()
        red[:, j] = np.maximum(e_j - 1, 0)
        monos = np.prod(P[None, :, :] ** red[:, :, None], axis=1)  # (T, N)
        monos *= e_j[:, None]
        out[:, j, :] = f.coeffs.T @ monos
    return out


def build_jacobian_tensor(f: MonomialFunction, pts: OperatingPointSet) -> JacobianTensor:
    """Stack the analytic Jacobians of f at all operating points.

    Built point by point so every slice is bit-identical to
    :func:`eval_jacobian` at that point.
    """
    if pts.input_dim != f.input_dim:
        raise ValueError("operating points and function disagree on m")
    slices = [build_jacobian_stack(f, pts.points[:, k:k + 1])
              for k in range(pts.count)]
    return JacobianTensor(np.concatenate(slices, axis=2), pts)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_points(m: int, N: int, bounds: tuple[float, float],
                  seed: int | None = None) -> OperatingPointSet:
    """Draw N i.i.d. uniform points in R^m within ``bounds``.

    Deterministic for a fixed seed.  Exactly coincident columns are
    redrawn: downstream finite-difference filters divide by pairwise
    projected distances, so duplicated points must never survive.
    """
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("bounds must satisfy lo < hi")
    if N < 2:
        raise ValueError("N must be at least 2")
    rng = np.random.default_rng(seed)
    P = rng.uniform(lo, hi, size=(m, N))
    while True:
        _, first = np.unique(P.T, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(N), first)
        if dup.size == 0:
            break
        P[:, dup] = rng.uniform(lo, hi, size=(m, dup.size))
    return OperatingPointSet(P, (float(lo), float(hi)), seed)


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def function_to_dict(f: MonomialFunction) -> dict:
    return {
        "m": f.input_dim,
        "n": f.output_dim,
        "terms": [
            {"exponents": [int(e) for e in exp], "coeffs": [float(c) for c in cof]}
            for exp, cof in zip(f.exponents, f.coeffs)
        ],
    }


def function_from_dict(d: dict) -> MonomialFunction:
    try:
        m = int(d["m"])
        n = int(d["n"])
        terms = d["terms"]
        exps = np.array([t["exponents"] for t in terms], dtype=np.int64)
        cofs = np.array([t["coeffs"] for t in terms], dtype=np.float64)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"malformed function description: {exc}") from exc
    return MonomialFunction(m, n, exps, cofs)


def load_function(path) -> MonomialFunction:
    with open(path) as fh:
        return function_from_dict(json.load(fh))


def save_function(f: MonomialFunction, path) -> None:
    with open(path, "w") as fh:
        json.dump(function_to_dict(f), fh, indent=2)
        fh.write("\n")
