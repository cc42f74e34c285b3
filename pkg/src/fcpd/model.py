"""Parametric decoupled models: univariate branch fitting, evaluation of
W g(V^T p), and scoring against the original coupled function."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import Polynomial

from .polyfun import MonomialFunction, OperatingPointSet, eval_poly_batch


class BranchFitError(ValueError):
    def __init__(self, branch: int, reason: str):
        self.branch = branch
        super().__init__(f"branch {branch}: {reason}")


@dataclass(frozen=True, eq=False)
class DecoupledModel:
    """W g(V^T p) with one univariate polynomial per branch.

    ``branches[i]`` holds ascending-power coefficients of g_i.
    """

    W: np.ndarray                  # (n, r)
    V: np.ndarray                  # (m, r)
    branches: tuple[np.ndarray, ...]

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if W.ndim != 2 or V.ndim != 2 or W.shape[1] != V.shape[1]:
            raise ValueError("W and V must be 2-d with a shared column count")
        coeffs = tuple(np.asarray(c, dtype=np.float64) for c in self.branches)
        if len(coeffs) != W.shape[1]:
            raise ValueError("one coefficient vector per branch is required")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "branches", coeffs)

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def input_dim(self) -> int:
        return self.V.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W.shape[0]

    def branch_values(self, Z: np.ndarray) -> np.ndarray:
        """Evaluate g_i over column i of Z (pointwise, any leading shape)."""
        return np.column_stack([
            np.polynomial.polynomial.polyval(Z[:, i], self.branches[i])
            for i in range(self.rank)])


def eval_decoupled(model: DecoupledModel, p) -> np.ndarray:
    """Evaluate the decoupled model at one point."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (model.input_dim,):
        raise ValueError(f"point must have length {model.input_dim}")
    return eval_decoupled_batch(model, p[:, None])[:, 0]


def eval_decoupled_batch(model: DecoupledModel, P: np.ndarray) -> np.ndarray:
    """Evaluate the decoupled model at every column of P (m x N) -> n x N."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] != model.input_dim:
        raise ValueError(f"points must have {model.input_dim} rows")
    Z = P.T @ model.V                      # (N, r)
    return model.W @ model.branch_values(Z).T


# ---------------------------------------------------------------------------
# Branch fitting
# ---------------------------------------------------------------------------

def fit_branches(Z: np.ndarray, G: np.ndarray, degree: int):
    """Least-squares polynomial fit of every (z_i, g_i) branch.

    The fit runs on an axis affinely mapped to [-1, 1] (raw monomial
    Vandermonde matrices on wide axes are badly conditioned) and the
    coefficients are mapped back to the plain power basis.  Returns the
    ascending-power coefficients and the rms fit residual per branch.
    """
    Z = np.asarray(Z, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Z.shape != G.shape:
        raise ValueError("axes and samples must have matching shapes")
    if degree < 1:
        raise ValueError("degree must be at least 1")
    N, r = Z.shape
    if N <= degree:
        raise ValueError(f"need more than degree={degree} samples, got {N}")
    coeffs = []
    residuals = np.empty(r)
    for i in range(r):
        z, g = Z[:, i], G[:, i]
        span = np.ptp(z)
        if span <= 1e-12 * max(1.0, float(np.abs(z).max())):
            raise BranchFitError(i, "axis range collapsed, cannot fit")
        poly = Polynomial.fit(z, g, deg=degree)
        c = poly.convert().coef
        c = np.pad(c, (0, degree + 1 - c.size))
        coeffs.append(c)
        err = np.polynomial.polynomial.polyval(z, c) - g
        residuals[i] = math.sqrt(float(err @ err) / N)
    return coeffs, residuals


def calibrate_offsets(model: DecoupledModel, f: MonomialFunction,
                      pts: OperatingPointSet) -> DecoupledModel:
    """Pin down the branch constants against the coupled function.

    Derivative data fixes each branch only up to an additive constant
    (every filter and every Jacobian entry annihilates constants), so
    the assembled model can be offset from f by W c for some c.  A
    single least-squares solve over the sample mean removes it.
    """
    F = eval_poly_batch(f, pts.points)
    R = F - eval_decoupled_batch(model, pts.points)
    target = R.mean(axis=1)
    c = np.linalg.lstsq(model.W, target, rcond=None)[0]
    adjusted = []
    for i, coef in enumerate(model.branches):
        coef = coef.copy()
        coef[0] += c[i]
        adjusted.append(coef)
    return replace(model, branches=tuple(adjusted))


# ---------------------------------------------------------------------------
# Error metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ErrorReport:
    """Per-output relative rms errors, in percent, plus run context."""

    errors_percent: np.ndarray          # (n,), NaN where undefined
    undefined_outputs: tuple[int, ...]  # outputs with zero reference rms
    tensor_relative_percent: float | None = None
    lambda_used: float | None = None
    branch_fit_rms: np.ndarray | None = None

    @property
    def max_error_percent(self) -> float:
        vals = self.errors_percent[np.isfinite(self.errors_percent)]
        return float(vals.max()) if vals.size else math.nan


def relative_error(f: MonomialFunction, model: DecoupledModel,
                   pts: OperatingPointSet) -> ErrorReport:
    """Relative rms mismatch of model vs f over the points, per output:

        e_i = rms(f_i - f_model_i) / rms(f_i) * 100
    """
    if f.input_dim != model.input_dim or f.output_dim != model.output_dim:
        raise ValueError("function and model dimensions disagree")
    F = eval_poly_batch(f, pts.points)
    Fd = eval_decoupled_batch(model, pts.points)
    num = np.sqrt(np.mean((F - Fd) ** 2, axis=1))
    den = np.sqrt(np.mean(F ** 2, axis=1))
    errors = np.full(f.output_dim, math.nan)
    defined = den > 0.0
    errors[defined] = num[defined] / den[defined] * 100.0
    undefined = tuple(int(i) for i in np.flatnonzero(~defined))
    return ErrorReport(errors, undefined)


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------

def model_to_dict(model: DecoupledModel) -> dict:
    return {
        "W": [[float(x) for x in row] for row in model.W],
        "V": [[float(x) for x in row] for row in model.V],
        "branches": [{"coeffs": [float(c) for c in coef]}
                     for coef in model.branches],
    }


def model_from_dict(d: dict) -> DecoupledModel:
    try:
        W = np.array(d["W"], dtype=np.float64)
        V = np.array(d["V"], dtype=np.float64)
        branches = tuple(np.array(b["coeffs"], dtype=np.float64)
                         for b in d["branches"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model description: {exc}") from exc
    return DecoupledModel(W, V, branches)


def load_model(path) -> DecoupledModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def save_model(model: DecoupledModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")
