"""Finite-difference filters on non-equidistant axes.

A filter differentiates samples g(z) along an arbitrary (unsorted,
non-uniform) axis z in three steps: sort by z, apply banded
Lagrange-interpolation derivative weights, unsort.  Window placement
relative to the evaluation point distinguishes the schemes:

    left     k-point window ending at the evaluation point
    central  k-point window centred on the evaluation point
    right    k-point window starting at the evaluation point
    forward2 2-point window starting at the evaluation point

Rows whose preferred window would leave the axis fall back to the
nearest admissible window, so boundary rows become one-sided.  Every row
annihilates constants and differentiates polynomials of degree <= k-1
exactly at its evaluation point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SCHEMES = ("left", "central", "right", "forward2")

# Two points closer than this fraction of the axis range make the
# interpolation weights blow up; treat the axis as degenerate.
MIN_SEPARATION_FRACTION = 1e-12


class DegenerateAxisError(ValueError):
    """An axis contains (near-)coincident points, so no filter exists.

    ``indices`` are positions (in the original ordering) of an offending
    pair; ``branch`` is filled in when the axis came from projecting
    operating points onto a factor column.
    """

    def __init__(self, indices, branch: int | None = None):
        self.indices = tuple(int(i) for i in indices)
        self.branch = branch
        where = f" for branch {branch}" if branch is not None else ""
        super().__init__(
            f"coincident axis points at indices {self.indices}{where}")

    def with_branch(self, branch: int) -> "DegenerateAxisError":
        return DegenerateAxisError(self.indices, branch)


# ---------------------------------------------------------------------------
# Lagrange derivative weights
# ---------------------------------------------------------------------------

_EYE_CACHE: dict[int, np.ndarray] = {}


def _eye(k: int) -> np.ndarray:
    if k not in _EYE_CACHE:
        _EYE_CACHE[k] = np.eye(k, dtype=bool)
    return _EYE_CACHE[k]


def _fd_weights(X: np.ndarray, e_idx: np.ndarray) -> np.ndarray:
    """First-derivative interpolation weights for a batch of windows.

    X holds one window of k node positions per row and e_idx the offset
    of the evaluation node.  Row output w satisfies
    sum_a w[a] * g(X[a]) = g'(X[e]) exactly for polynomials of degree
    <= k-1.  Uses the closed forms

        w_a = prod_{i != a,e}(x_e - x_i) / prod_{i != a}(x_a - x_i)   a != e
        w_e = sum_{s != e} 1 / (x_e - x_s)
    """
    N, k = X.shape
    rows = np.arange(N)
    xe = X[rows, e_idx]
    mask_e = np.zeros((N, k), dtype=bool)
    mask_e[rows, e_idx] = True

    diff_e = np.where(mask_e, 1.0, xe[:, None] - X)   # x_e - x_i, 1 at i=e
    eye = _eye(k)
    pair = np.where(eye[None, :, :], 1.0, X[:, :, None] - X[:, None, :])

    num = diff_e.prod(axis=1)[:, None] / diff_e       # prod_{i != a,e}(x_e - x_i)
    den = pair.prod(axis=2)                           # prod_{i != a}(x_a - x_i)
    w = num / den
    inv = np.where(mask_e, 0.0, 1.0 / diff_e)
    w[rows, e_idx] = inv.sum(axis=1)
    return w


def _fd_weight_jacobian(X: np.ndarray, e_idx: np.ndarray) -> np.ndarray:
    """d(weights)/d(node positions) for a batch of windows: (N, k, k).

    Entry (row, a, b) is the derivative of weight a with respect to node
    b of the same window.  Off-evaluation weights are differentiated via
    their logarithmic derivative (they are nonzero products of node
    differences); the evaluation weight is a plain sum of reciprocals.
    """
    N, k = X.shape
    rows = np.arange(N)
    xe = X[rows, e_idx]
    mask_e = np.zeros((N, k), dtype=bool)
    mask_e[rows, e_idx] = True

    diff_e = np.where(mask_e, 1.0, xe[:, None] - X)
    inv = np.where(mask_e, 0.0, 1.0 / diff_e)         # 1/(x_e - x_i), 0 at e
    eye = _eye(k)
    pair = np.where(eye[None, :, :], 1.0, X[:, :, None] - X[:, None, :])
    invpair = np.where(eye[None, :, :], 0.0, 1.0 / pair)

    W = _fd_weights(X, e_idx)

    # a != e: dw_a/dx_b = w_a * (dlog num - dlog den)
    dlog_num = np.where(mask_e[:, None, :],
                        (inv.sum(axis=1)[:, None] - inv)[:, :, None],
                        -inv[:, None, :])
    dlog_num = dlog_num * ~eye[None, :, :]            # no x_a in the numerator
    dlog_den = -invpair.copy()
    dlog_den[:, np.arange(k), np.arange(k)] = invpair.sum(axis=2)
    dW = W[:, :, None] * (dlog_num - dlog_den)

    # a == e: dw_e/dx_b = 1/(x_e - x_b)^2, dw_e/dx_e = -sum of those
    inv2 = inv * inv
    row_e = inv2.copy()
    row_e[rows, e_idx] = -inv2.sum(axis=1)
    return np.where(mask_e[:, :, None], row_e[:, None, :], dW)


def lagrange_weights(z_window, eval_index: int) -> np.ndarray:
    """Derivative weights on one window of pairwise-distinct nodes.

    Returns w such that sum_j w[j] * g(z_window[j]) equals the exact
    derivative g'(z_window[eval_index]) for every polynomial g of degree
    <= len(z_window) - 1.  ``eval_index`` is 0-based.
    """
    z_window = np.asarray(z_window, dtype=np.float64)
    k = z_window.size
    if not 0 <= eval_index < k:
        raise ValueError(f"eval_index must be in [0, {k}), got {eval_index}")
    span = np.ptp(z_window)
    gaps = np.abs(z_window[:, None] - z_window[None, :])
    gaps[np.diag_indices(k)] = np.inf
    bad = np.argwhere(gaps <= MIN_SEPARATION_FRACTION * span)
    if span == 0.0 or bad.size:
        pair = tuple(bad[0]) if bad.size else (0, 1)
        raise DegenerateAxisError(pair)
    return _fd_weights(z_window[None, :], np.array([eval_index]))[0]


# ---------------------------------------------------------------------------
# Filter construction
# ---------------------------------------------------------------------------

def _window_layout(N: int, k: int, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Window start positions and evaluation offsets for every sorted row."""
    rows = np.arange(N)
    if scheme == "central":
        starts = np.clip(rows - (k - 1) // 2, 0, N - k)
    elif scheme == "left":
        starts = np.clip(rows - (k - 1), 0, N - k)
    elif scheme in ("right", "forward2"):
        starts = np.clip(rows, 0, N - k)
    else:
        raise ValueError(f"scheme must be one of {_SCHEMES}, got {scheme!r}")
    return starts, rows - starts


@dataclass(frozen=True, eq=False)
class FilterStructure:
    """The axis-independent part of a filter: sorting permutation plus
    window placement.  Holding this fixed while the axis values move
    makes the filtered output a smooth function of the axis."""

    perm: np.ndarray       # (N,) positions sorting the original axis
    windows: np.ndarray    # (N, k) window positions, permuted ordering
    offsets: np.ndarray    # (N,) evaluation offset within each window
    scheme: str
    k: int

    @property
    def size(self) -> int:
        return self.perm.size

    def materialize(self, z) -> "FilterMatrix":
        """Compute weights for axis values z under this fixed structure."""
        z = np.asarray(z, dtype=np.float64)
        zs = z[self.perm]
        X = zs[self.windows]
        span = float(np.ptp(z))
        limit = MIN_SEPARATION_FRACTION * span
        gap = np.abs(X[:, :, None] - X[:, None, :])
        gap[:, _eye(self.k)] = np.inf
        if span == 0.0 or gap.min() <= limit:
            row, a, b = np.unravel_index(np.argmin(gap), gap.shape)
            raise DegenerateAxisError(
                (self.perm[self.windows[row, a]], self.perm[self.windows[row, b]]))
        return FilterMatrix(self, z, _fd_weights(X, self.offsets))


def build_structure(z, scheme: str, k: int = 3) -> FilterStructure:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("axis must be a 1-d array")
    if scheme == "forward2":
        k = 2
    if k < 2:
        raise ValueError("window length k must be at least 2")
    N = z.size
    if N < k:
        raise ValueError(f"axis has {N} points but the window needs {k}")
    perm = np.argsort(z, kind="stable")
    starts, offsets = _window_layout(N, k, scheme)
    windows = starts[:, None] + np.arange(k)[None, :]
    return FilterStructure(perm, windows, offsets, scheme, k)


@dataclass(eq=False)
class FilterMatrix:
    """A materialized filter F = S^-1 D S for one axis.

    S is kept as the index vector ``structure.perm`` and D as banded
    per-row weights, so application costs O(kN) instead of O(N^2).
    """

    structure: FilterStructure
    z: np.ndarray          # (N,) original-order axis values
    weights: np.ndarray    # (N, k) derivative weights per sorted row
    _dense: np.ndarray | None = None

    @property
    def scheme(self) -> str:
        return self.structure.scheme

    @property
    def size(self) -> int:
        return self.z.size

    def apply(self, g) -> np.ndarray:
        """F @ g: sort, take banded weighted sums, unsort."""
        g = np.asarray(g, dtype=np.float64)
        s = self.structure
        hs = np.einsum("ij,ij->i", self.weights, g[s.perm][s.windows])
        h = np.empty_like(hs)
        h[s.perm] = hs
        return h

    def matrix(self) -> np.ndarray:
        """Dense N x N form of the operator (for small-system solves);
        built once and cached."""
        if self._dense is None:
            s = self.structure
            N = self.size
            D = np.zeros((N, N))
            D[np.arange(N)[:, None], s.windows] = self.weights
            F = np.empty((N, N))
            F[np.ix_(s.perm, s.perm)] = D
            self._dense = F
        return self._dense

    def axis_jacobian(self, g) -> np.ndarray:
        """d(F(z) @ g)/dz as a dense N x N matrix, structure held fixed.

        Row p gives the sensitivity of the filtered value at original
        position p to each original axis entry.
        """
        g = np.asarray(g, dtype=np.float64)
        s = self.structure
        zs = self.z[s.perm]
        X = zs[s.windows]
        dW = _fd_weight_jacobian(X, s.offsets)         # (N, k, k)
        contrib = np.einsum("lab,la->lb", dW, g[s.perm][s.windows])
        N = self.size
        A = np.zeros((N, N))
        A[np.arange(N)[:, None], s.windows] = contrib  # permuted coordinates
        out = np.empty((N, N))
        out[np.ix_(s.perm, s.perm)] = A
        return out


def build_filter(z, scheme: str, k: int = 3) -> FilterMatrix:
    """Build a finite-difference filter for one axis."""
    return build_structure(z, scheme, k).materialize(z)


# ---------------------------------------------------------------------------
# Filter banks over projected axes
# ---------------------------------------------------------------------------

def _points_array(points) -> np.ndarray:
    pts = getattr(points, "points", points)
    return np.asarray(pts, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FilterBank:
    """One filter per branch, each built on the axis z_i = P^T v_i."""

    filters: tuple[FilterMatrix, ...]
    scheme: str
    axes: np.ndarray  # (N, r)

    @property
    def rank(self) -> int:
        return len(self.filters)

    def apply(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, dtype=np.float64)
        if G.shape != self.axes.shape:
            raise ValueError(
                f"expected samples of shape {self.axes.shape}, got {G.shape}")
        return np.column_stack(
            [flt.apply(G[:, i]) for i, flt in enumerate(self.filters)])


def build_filter_bank(V, points, scheme: str, k: int = 3) -> FilterBank:
    """Build the per-branch filters for the projected axes P^T V."""
    V = np.asarray(V, dtype=np.float64)
    P = _points_array(points)
    if V.ndim != 2 or P.shape[0] != V.shape[0]:
        raise ValueError("V must be m x r with m matching the points")
    Z = P.T @ V
    filters = []
    for i in range(V.shape[1]):
        try:
            filters.append(build_filter(Z[:, i], scheme, k))
        except DegenerateAxisError as exc:
            raise exc.with_branch(i) from None
    return FilterBank(tuple(filters), scheme, Z)


def apply_bank(bank: FilterBank, G: np.ndarray) -> np.ndarray:
    """Filter every column of G with its branch filter."""
    return bank.apply(G)


def _rms(v: np.ndarray) -> float:
    return float(np.linalg.norm(v)) / np.sqrt(v.size)


def branch_rms_floor(flt: FilterMatrix, g: np.ndarray) -> float:
    """Threshold under which a filtered branch counts as constant.

    A truly constant branch filters to roundoff noise rather than exact
    zeros; anything at that level must not be rms-normalized.
    """
    return 1e-12 * _rms(g) * float(np.abs(flt.weights).max())


def smoothness_penalty(bank_l: FilterBank, bank_r: FilterBank,
                       G: np.ndarray) -> float:
    """Sum over branches of || h_L/rms(h_L) - h_R/rms(h_R) ||^2.

    h_L and h_R are the left- and right-filtered branch samples.  Smooth
    branches make the two derivative estimates agree, so the penalty is
    near zero; scattered branches drive it up.  Branches that filter to
    (numerical) zero are constant and contribute nothing.
    """
    G = np.asarray(G, dtype=np.float64)
    total = 0.0
    for i in range(bank_l.rank):
        g = G[:, i]
        h_l = bank_l.filters[i].apply(g)
        h_r = bank_r.filters[i].apply(g)
        rms_l, rms_r = _rms(h_l), _rms(h_r)
        floor = max(branch_rms_floor(bank_l.filters[i], g),
                    branch_rms_floor(bank_r.filters[i], g))
        if rms_l <= floor or rms_r <= floor:
            continue
        d = h_l / rms_l - h_r / rms_r
        total += float(d @ d)
    return total
