"""Smoothness-filtered CP decomposition of a Jacobian stack.

Decomposes an (n, m, N) stack of Jacobians into factors (W, V, G) such
that the rank-r model [[W, V, F_C(V) o G]] matches the stack, where
F_C(V) are central finite-difference filters on the projected axes
z_i = P^T v_i and "o" filters G column by column.  G then holds samples
of the univariate branch functions themselves rather than of their
derivatives, and a penalty on the disagreement between left- and
right-filtered G steers the iteration towards smooth, parameterizable
branches.

The joint objective, for penalty weight lam, is

    || J - [[W, V, F_C(V) o G]] ||_F^2
        + lam * sum_i || h_Li/rms(h_Li) - h_Ri/rms(h_Ri) ||^2

with h_si the s-scheme filtered column i of G.  One sweep updates W
(closed form), V (inner Gauss-Newton with backtracking on the frozen-
permutation objective), and G (closed form; the rms normalizers are
frozen at the incumbent G so the solve stays linear).  Every step is
accepted only if the joint objective does not increase, which keeps the
trace monotone regardless of the frozen-quantity approximations.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cpd import GRAM_PINV_RCOND
from .findiff import (
    MIN_SEPARATION_FRACTION,
    DegenerateAxisError,
    FilterBank,
    branch_rms_floor,
    build_filter_bank,
    smoothness_penalty,
    _fd_weights,
    _fd_weight_jacobian,
    _points_array,
    _rms,
    _window_layout,
)
from .model import (
    BranchFitError,
    DecoupledModel,
    ErrorReport,
    calibrate_offsets,
    fit_branches,
    relative_error,
)
from .polyfun import MonomialFunction, OperatingPointSet
from .tensor3 import FactorSet, khatri_rao, matricize, reconstruct

WINDOW = 3  # filter window length used throughout

# Relative singular-value cutoff for the stacked G solve.  Filter
# spectra carry near-null directions beyond the exact constant one
# (tight point pairs); admitting them blows branch samples up by the
# inverse cutoff, so truncate well above roundoff.
STACKED_LSTSQ_RCOND = 1e-10

_SCHEMES = ("central", "left", "right")
_EYE_K = np.eye(WINDOW, dtype=bool)


@dataclass(frozen=True)
class FcpdOptions:
    """Knobs for the filtered decomposition.

    ``lambda_grid`` is only consulted by :func:`lambda_search`; a single
    solve takes its weight explicitly.
    """

    max_sweeps: int = 200
    outer_tolerance: float = 1e-8
    seed: int | None = None
    restarts: int = 5
    lambda_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
    inner_max_iterations: int = 50
    inner_gradient_tolerance: float = 1e-8
    branch_degree: int = 3
    # Hard per-restart budget on joint (V, G) trial solves; the phase
    # falls back to plain alternating steps once it is spent, which
    # bounds the runtime of a restart deterministically.
    max_lookaheads: int = 250

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not self.outer_tolerance > 0:
            raise ValueError("outer_tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if len(self.lambda_grid) == 0:
            raise ValueError("lambda_grid must be non-empty")
        if any(not lam > 0 for lam in self.lambda_grid):
            raise ValueError("lambda_grid entries must be positive")
        if self.inner_max_iterations < 1:
            raise ValueError("inner_max_iterations must be at least 1")
        if self.branch_degree < 1:
            raise ValueError("branch_degree must be at least 1")


@dataclass(eq=False)
class _Banks:
    center: FilterBank
    left: FilterBank
    right: FilterBank


def _build_banks(V: np.ndarray, P) -> _Banks:
    return _Banks(*(build_filter_bank(V, P, s, WINDOW) for s in _SCHEMES))


def joint_objective(T: np.ndarray, W: np.ndarray, V: np.ndarray,
                    G: np.ndarray, lam: float, banks: _Banks):
    """(joint, tensor term, penalty term) with self-consistent rms
    normalization; this is the quantity reported to callers."""
    H = banks.center.apply(G)
    diff = T - reconstruct(FactorSet(W, V, H))
    tensor_term = float(np.sum(diff * diff))
    pen = smoothness_penalty(banks.left, banks.right, G)
    return tensor_term + lam * pen, tensor_term, pen


def _frozen_objective(T, W, V, G, lam, banks: _Banks, norms):
    """(joint, tensor, penalty) with the rms normalizers frozen.

    This is the objective each sweep actually descends; at convergence
    the frozen and self-consistent values coincide.
    """
    H = banks.center.apply(G)
    diff = T - reconstruct(FactorSet(W, V, H))
    tensor_term = float(np.sum(diff * diff))
    pen = 0.0
    for i, norm_i in enumerate(norms):
        if norm_i is None:
            continue
        h_l = banks.left.filters[i].apply(G[:, i])
        h_r = banks.right.filters[i].apply(G[:, i])
        d = h_l / norm_i[0] - h_r / norm_i[1]
        pen += float(d @ d)
    return tensor_term + lam * pen, tensor_term, pen


# ---------------------------------------------------------------------------
# W update (closed form)
# ---------------------------------------------------------------------------

def update_w(T: np.ndarray, V: np.ndarray, G: np.ndarray,
             bank_center: FilterBank) -> np.ndarray:
    """Exact minimizer of the tensor term over W, everything else fixed."""
    H = bank_center.apply(G)
    rhs = np.einsum("jkl,li,ki->ji", T, H, V)
    gram = (H.T @ H) * (V.T @ V)
    return rhs @ np.linalg.pinv(gram, rcond=GRAM_PINV_RCOND, hermitian=True)


# ---------------------------------------------------------------------------
# G update (closed form via the stacked linear system)
# ---------------------------------------------------------------------------

def frozen_normalizers(banks: _Banks, G_ref: np.ndarray):
    """Per-branch (rms_L, rms_R) of the filtered reference G, or None for
    branches whose reference column is constant (no penalty applies).

    Freezing these during a sweep is what keeps the G solve linear and
    makes each update provably non-increasing for the sweep objective.
    """
    norms = []
    for i in range(banks.center.rank):
        g = G_ref[:, i]
        fl, fr = banks.left.filters[i], banks.right.filters[i]
        rms_l, rms_r = _rms(fl.apply(g)), _rms(fr.apply(g))
        floor = max(branch_rms_floor(fl, g), branch_rms_floor(fr, g))
        if rms_l <= floor or rms_r <= floor:
            norms.append(None)
        else:
            norms.append((rms_l, rms_r))
    return norms


def update_g(T: np.ndarray, W: np.ndarray, V: np.ndarray, lam: float,
             banks: _Banks, norms) -> np.ndarray:
    """Exact minimizer of the joint objective over G at frozen rms
    normalizers (see :func:`frozen_normalizers`).

    Solves the stacked least-squares system

        [ (khatri_rao(V, W) kron I_N) blkdiag(F_C) ]            [vec(J3)]
        [ sqrt(lam) (blkdiag(F_L/rms) - blkdiag(F_R/rms)) ] x = [   0   ]

    assembled blockwise (never via explicit Kronecker products).  The
    system is always rank-deficient (a constant added to any branch is
    invisible to every term), so the minimum-norm solution is taken.
    Solving the stacked form rather than its normal equations matters:
    filter matrices carry weights of order 1/min-gap, and squaring them
    costs more precision than the downstream tolerances allow.
    """
    n, m, N = T.shape
    r = W.shape[1]
    M = khatri_rao(V, W)                          # (nm, r)
    nm = M.shape[0]
    fc = [flt.matrix() for flt in banks.center.filters]

    K = np.zeros(((nm + r) * N, r * N))
    for a in range(nm):
        rows = slice(a * N, (a + 1) * N)
        for i in range(r):
            if M[a, i] != 0.0:
                K[rows, i * N:(i + 1) * N] = M[a, i] * fc[i]
    sqrt_lam = np.sqrt(lam)
    for i in range(r):
        if norms[i] is None:
            continue
        rms_l, rms_r = norms[i]
        rows = slice((nm + i) * N, (nm + i + 1) * N)
        K[rows, i * N:(i + 1) * N] = sqrt_lam * (
            banks.left.filters[i].matrix() / rms_l
            - banks.right.filters[i].matrix() / rms_r)

    rhs = np.zeros((nm + r) * N)
    rhs[:nm * N] = matricize(T, 3).ravel(order="F")
    vec_g = scipy.linalg.lstsq(K, rhs, cond=STACKED_LSTSQ_RCOND,
                               lapack_driver="gelsy", check_finite=False)[0]
    return vec_g.reshape(N, r, order="F")


# ---------------------------------------------------------------------------
# V update (inner Gauss-Newton on the frozen-permutation objective)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _FrozenScheme:
    """Frozen sort orders and window layout for one scheme, all branches.

    The window layout (starts and evaluation offsets) depends only on
    (N, k, scheme), so it is shared across branches; only the sorting
    permutation is per branch.
    """

    perms: np.ndarray      # (N, r) column i sorts axis i
    windows: np.ndarray    # (N, k)
    offsets: np.ndarray    # (N,)
    k: int

    def filtered(self, Z, G, spans, want_grad):
        """Filter every column of G along its frozen-order axis.

        Returns (H, per-branch max |weight|, chain-rule contributions or
        None).  Raises on coincident window nodes.
        """
        N, r = Z.shape
        k = self.k
        Zs = np.take_along_axis(Z, self.perms, axis=0)    # (N, r)
        X = Zs[self.windows]                              # (N, k, r)
        gap = np.abs(X[:, :, None, :] - X[:, None, :, :])
        gap[:, _EYE_K, :] = np.inf
        worst = gap.min(axis=(0, 1))                      # (r,)
        bad = np.flatnonzero(worst <= MIN_SEPARATION_FRACTION * spans)
        if bad.size:
            i = int(bad[0])
            row, a, b = np.unravel_index(np.argmin(gap[..., i]), gap[..., i].shape)
            pair = (self.perms[self.windows[row, a], i],
                    self.perms[self.windows[row, b], i])
            raise DegenerateAxisError(pair, branch=i)

        Xf = X.transpose(2, 0, 1).reshape(r * N, k)
        e_idx = np.tile(self.offsets, r)
        Wts = _fd_weights(Xf, e_idx).reshape(r, N, k)     # (r, N, k)
        max_w = np.abs(Wts).max(axis=(1, 2))              # (r,)
        Gs = np.take_along_axis(G, self.perms, axis=0)
        Gwin = Gs[self.windows]                           # (N, k, r)
        hs = np.einsum("ink,nki->ni", Wts, Gwin)          # (N, r) sorted order
        H = np.empty_like(hs)
        np.put_along_axis(H, self.perms, hs, axis=0)
        if not want_grad:
            return H, max_w, None
        dW = _fd_weight_jacobian(Xf, e_idx).reshape(r, N, k, k)
        # contrib[n, b, i] = d h_sorted[n, i] / d z_sorted[window[n, b], i]
        contrib = np.einsum("inab,nai->nbi", dW, Gwin)
        return H, max_w, contrib

    def axis_chain(self, contrib, PT):
        """Turn d h/d z_sorted window contributions into d h/d v_i.

        PT is P^T (N, m); result is (r, N, m) with block i equal to
        d(F_i g_i)/d v_i under the frozen structure.
        """
        N, m = PT.shape
        r = contrib.shape[2]
        PTs = PT[self.perms.T]                 # (r, N, m) rows permuted per branch
        PTwin = PTs[:, self.windows, :]        # (r, N, k, m)
        rows = np.einsum("nbi,inbc->nic", contrib, PTwin)   # sorted order
        out = np.empty((N, r, m))
        np.put_along_axis(out, self.perms[:, :, None], rows, axis=0)
        return out.transpose(1, 0, 2)


@dataclass(eq=False)
class AxisStructures:
    """Frozen sorting permutations and window layouts for all schemes."""

    center: _FrozenScheme
    left: _FrozenScheme
    right: _FrozenScheme


def freeze_structures(V: np.ndarray, points) -> AxisStructures:
    """Capture the sort order of every projected axis at the current V."""
    P = _points_array(points)
    Z = P.T @ np.asarray(V, dtype=np.float64)
    N, r = Z.shape
    perms = np.argsort(Z, axis=0, kind="stable")
    schemes = {}
    for scheme in _SCHEMES:
        starts, offsets = _window_layout(N, WINDOW, scheme)
        windows = starts[:, None] + np.arange(WINDOW)[None, :]
        schemes[scheme] = _FrozenScheme(perms, windows, offsets, WINDOW)
    return AxisStructures(schemes["central"], schemes["left"], schemes["right"])


def _v_parts(T, W, G, V, lam, P, structs, norms, want_jacobian):
    """Residuals (and optionally their Jacobian w.r.t. V) of the sweep
    objective with frozen permutations and frozen rms normalizers.

    Residual layout: the raveled tensor misfit followed by the r
    penalty residual vectors scaled by sqrt(lam); the squared norm of
    the stack is exactly the objective value.
    """
    n, m, N = T.shape
    r = V.shape[1]
    Z = P.T @ V
    spans = np.ptp(Z, axis=0)

    H, _, contrib_c = structs.center.filtered(Z, G, spans, want_jacobian)
    HL, _, contrib_l = structs.left.filtered(Z, G, spans, want_jacobian)
    HR, _, contrib_r = structs.right.filtered(Z, G, spans, want_jacobian)

    E = reconstruct(FactorSet(W, V, H)) - T

    sqrt_lam = np.sqrt(lam)
    pen_res = np.zeros((r, N))
    for i in range(r):
        if norms[i] is None:
            continue
        pen_res[i] = sqrt_lam * (HL[:, i] / norms[i][0] - HR[:, i] / norms[i][1])

    res = np.concatenate([E.ravel(), pen_res.ravel()])
    if not want_jacobian:
        return res, None

    PT = P.T
    ap_c = structs.center.axis_chain(contrib_c, PT)      # (r, N, m)
    jac_tensor = (np.einsum("ji,li,kc->jklci", W, H, np.eye(m))
                  + np.einsum("ji,ki,ilc->jklci", W, V, ap_c))
    jac_tensor = jac_tensor.reshape(n * m * N, m * r)

    ap_l = structs.left.axis_chain(contrib_l, PT)
    ap_r = structs.right.axis_chain(contrib_r, PT)
    jac_pen = np.zeros((r, N, m, r))
    for i in range(r):
        if norms[i] is None:
            continue
        jac_pen[i, :, :, i] = sqrt_lam * (ap_l[i] / norms[i][0]
                                          - ap_r[i] / norms[i][1])
    jac = np.vstack([jac_tensor, jac_pen.reshape(r * N, m * r)])
    return res, jac


def v_objective(T, W, G, V, lam, points, structs: AxisStructures, norms) -> float:
    """Sweep objective as a function of V: frozen permutations, frozen
    rms normalizers (see :func:`frozen_normalizers`)."""
    P = _points_array(points)
    res, _ = _v_parts(np.asarray(T, dtype=np.float64), W, G,
                      np.asarray(V, dtype=np.float64), lam, P, structs,
                      norms, False)
    return float(res @ res)


def v_gradient(T, W, G, V, lam, points, structs: AxisStructures,
               norms) -> np.ndarray:
    """Analytic gradient of :func:`v_objective` w.r.t. V, shape (m, r)."""
    P = _points_array(points)
    V = np.asarray(V, dtype=np.float64)
    res, jac = _v_parts(np.asarray(T, dtype=np.float64), W, G, V, lam, P,
                        structs, norms, True)
    return (2.0 * (jac.T @ res)).reshape(V.shape)


def update_v(T, W, G, V_current, lam, points, opts: FcpdOptions,
             norms=None) -> np.ndarray:
    """Descend the sweep objective in V at fixed G; never returns a
    worse iterate.

    Gauss-Newton steps on the frozen-permutation residuals with Armijo
    backtracking (gradient-direction fallback); permutations are
    refrozen after every accepted step.  Candidate iterates are ranked
    by the objective under their own fresh permutations, so the result
    cannot be worse than V_current.
    """
    P = _points_array(points)
    V = np.asarray(V_current, dtype=np.float64)
    structs = freeze_structures(V, P)
    if norms is None:
        try:
            norms = frozen_normalizers(_build_banks(V, P), G)
        except DegenerateAxisError:
            return V

    def value_at(Vx, structs_x):
        try:
            return v_objective(T, W, G, Vx, lam, P, structs_x, norms)
        except DegenerateAxisError:
            return np.inf

    best_v = V
    best_val = value_at(V, structs)
    if not np.isfinite(best_val):
        return V

    value = best_val
    alpha_init = 1.0
    for _ in range(opts.inner_max_iterations):
        try:
            res, jac = _v_parts(T, W, G, V, lam, P, structs, norms, True)
        except DegenerateAxisError:
            break
        grad = 2.0 * (jac.T @ res)
        if np.linalg.norm(grad) <= opts.inner_gradient_tolerance * (1.0 + value):
            break
        gn_step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        directions = [gn_step] if float(grad @ gn_step) < 0.0 else []
        directions.append(-grad)

        accepted = False
        for step in directions:
            slope = float(grad @ step)
            if slope >= 0.0:
                continue
            alpha = alpha_init
            for _ in range(30):
                trial = V + alpha * step.reshape(V.shape)
                try:
                    r_t, _ = _v_parts(T, W, G, trial, lam, P, structs,
                                      norms, False)
                    trial_val = float(r_t @ r_t)
                except DegenerateAxisError:
                    trial_val = np.inf
                if trial_val <= value + 1e-4 * alpha * slope:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
        if not accepted:
            break
        alpha_init = min(1.0, 2.0 * alpha)  # warm start the next search
        V = V + alpha * step.reshape(V.shape)
        structs = freeze_structures(V, P)
        prev_value = value
        value = value_at(V, structs)
        if not np.isfinite(value):
            break
        if value < best_val:
            best_val, best_v = value, V
        if prev_value - value <= 1e-10 * max(prev_value, 1.0):
            break
    return best_v


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FcpdSolution:
    factors: FactorSet            # G-tagged
    lambda_used: float
    axes: np.ndarray              # (N, r) projected axes P^T V
    trace: np.ndarray             # (sweeps, 4): sweep, tensor, penalty, joint
    step_trace: tuple             # (sweep, step name, joint value) triples
    tensor_relative_percent: float
    penalty: float
    joint: float
    sweeps: int
    restart_index: int
    degenerate_retries: int

    @property
    def W(self) -> np.ndarray:
        return self.factors.W

    @property
    def V(self) -> np.ndarray:
        return self.factors.V

    @property
    def G(self) -> np.ndarray:
        return self.factors.third


def _init_banks(V, P, rng, max_retries=3):
    """Build banks at V, nudging columns that project onto coincident
    axis points.  Returns (V, banks, retries used)."""
    retries = 0
    for _ in range(max_retries + 1):
        try:
            return V, _build_banks(V, P), retries
        except DegenerateAxisError as exc:
            if retries >= max_retries:
                raise
            retries += 1
            col = exc.branch if exc.branch is not None else 0
            scale = np.linalg.norm(V[:, col]) or 1.0
            V = V.copy()
            V[:, col] += 1e-8 * scale * rng.standard_normal(V.shape[0])
    raise AssertionError("unreachable")


def _normalize_columns(W, V, G):
    """Re-gauge: unit W and V columns (scales folded into G) and
    zero-mean G columns.

    The tensor term is invariant (stretching v_i rescales the filter
    weights reciprocally) and the penalty is rms-normalized, so this is
    objective-neutral.  Centering G matters: a branch constant is
    invisible to every filter, so left unchecked it can drift until it
    swamps the actual branch variation (and with it the constant-branch
    detection threshold); the model's constants are recovered later by
    calibration against the coupled function.
    """
    vn = np.linalg.norm(V, axis=0)
    vn = np.where(vn > 0, vn, 1.0)
    wn = np.linalg.norm(W, axis=0)
    wn = np.where(wn > 0, wn, 1.0)
    G = G * wn
    return W / wn, V / vn, G - G.mean(axis=0)


def _linear_v_candidate(T, W, H):
    """Classic alternating-least-squares move for V at fixed filtered
    factor H: the exact minimizer of the tensor term treating H as data.

    Reinterpreting the branch samples on the new axes is left to the
    subsequent G solve; as a joint (V, G) move this mimics the dynamics
    of an unconstrained decomposition and jumps across the plateaus
    where pure descent in V stalls.
    """
    rhs = np.einsum("jkl,li,ji->ki", T, H, W)
    gram = (H.T @ H) * (W.T @ W)
    return rhs @ np.linalg.pinv(gram, rcond=GRAM_PINV_RCOND, hermitian=True)


_V_PHASE_PASSES = 8


def _v_phase(T, W, V, G, lam, banks, P, opts, joint, state):
    """Joint (V, G) descent with G eliminated through its linear solve.

    The branch samples G only have meaning relative to the axes P^T V,
    so descending in V at fixed G cannot follow the valley of good
    solutions; each V candidate is therefore scored after re-solving G
    on its axes (variable projection).  Moves per pass: the
    alternating-least-squares jump of :func:`_linear_v_candidate`, a
    backtracking gradient step on the reduced objective, and (as a
    rescue when neither helps) the fixed-G descent of :func:`update_v`.
    Acceptance is always measured on the self-consistent joint
    objective, so the phase is monotone.

    ``state`` carries the warm-started line-search step across sweeps.
    """

    def lookahead(V_cand, norms):
        # Full response of both linear blocks: G on the new axes, then
        # W against the refreshed filtered factor.
        state["lookaheads"] = state.get("lookaheads", 0) + 1
        banks_cand = _build_banks(V_cand, P)
        G_cand = update_g(T, W, V_cand, lam, banks_cand, norms)
        W_cand = update_w(T, V_cand, G_cand, banks_cand.center)
        val = joint_objective(T, W_cand, V_cand, G_cand, lam, banks_cand)[0]
        return val, banks_cand, G_cand, W_cand

    for _ in range(_V_PHASE_PASSES):
        if state.get("lookaheads", 0) >= opts.max_lookaheads:
            break
        improved = False
        norms = frozen_normalizers(banks, G)

        # Re-solving (G, W) on the incumbent axes under freshly
        # recomputed normalizers is the smoothing ratchet: as G gets
        # smoother its filtered rms drops and the penalty stiffens.
        try:
            val, banks_cand, G_cand, W_cand = lookahead(V, norms)
            if val < joint:
                banks, G, W, joint = banks_cand, G_cand, W_cand, val
                improved = True
        except DegenerateAxisError:
            pass

        # ALS jump: the big mover while the tensor term dominates.
        V_jump = _linear_v_candidate(T, W, banks.center.apply(G))
        try:
            val, banks_cand, G_cand, W_cand = lookahead(V_jump, norms)
            if val < joint:
                V, banks, G, W, joint = V_jump, banks_cand, G_cand, W_cand, val
                improved = True
        except DegenerateAxisError:
            pass

        # Gradient of the reduced objective (envelope: G re-solved per
        # trial), with a warm-started backtracking line search.
        norms = frozen_normalizers(banks, G)
        try:
            grad = v_gradient(T, W, G, V, lam, P,
                              freeze_structures(V, P), norms)
        except DegenerateAxisError:
            grad = None
        gnorm = float(np.linalg.norm(grad)) if grad is not None else 0.0
        if gnorm > 0:
            alpha = 0.5 * max(np.linalg.norm(V), 1e-12) / gnorm
            for _ in range(12):
                try:
                    val, banks_cand, G_cand, W_cand = lookahead(
                        V - alpha * grad, norms)
                except DegenerateAxisError:
                    alpha *= 0.5
                    continue
                if val < joint:
                    V = V - alpha * grad
                    banks, G, W, joint = banks_cand, G_cand, W_cand, val
                    improved = True
                    break
                alpha *= 0.5

        if improved:
            continue

        # Rescue: fixed-G descent, then re-solve G on the new axes.
        V_cand = update_v(T, W, G, V, lam, P, opts, norms)
        if V_cand is not V:
            try:
                val, banks_cand, G_cand, W_cand = lookahead(V_cand, norms)
            except DegenerateAxisError:
                break
            if val < joint:
                V, banks, G, W, joint = V_cand, banks_cand, G_cand, W_cand, val
                improved = True
        if not improved:
            break
    return W, V, banks, G, joint


def _single_restart(T, P, r, lam, opts, restart, init, tensor_norm):
    """One full sweep schedule from one initialization.

    ``init`` is either a SeedSequence (random start) or a (W, V, G)
    triple to warm-start from.  Returns an FcpdSolution or raises
    DegenerateAxisError when no usable axes could be found.
    """
    n, m, N = T.shape
    if isinstance(init, np.random.SeedSequence):
        rng = np.random.default_rng(init)
        W = rng.uniform(-1.0, 1.0, size=(n, r))
        V = rng.uniform(-1.0, 1.0, size=(m, r))
        G = rng.uniform(-1.0, 1.0, size=(N, r))
    else:
        W, V, G = (np.array(x, dtype=np.float64, copy=True) for x in init)
        rng = np.random.default_rng(np.random.SeedSequence(opts.seed))
    V, banks, retries = _init_banks(V, P, rng)

    trace = []
    steps = []
    prev_joint = None
    stalled = 0
    search_state = {}
    joint = joint_objective(T, W, V, G, lam, banks)[0]
    for sweep in range(opts.max_sweeps):
        W_new = update_w(T, V, G, banks.center)
        cand = joint_objective(T, W_new, V, G, lam, banks)
        if cand[0] <= joint:
            W, joint = W_new, cand[0]
        steps.append((sweep, "W", joint))

        W, V, banks, G, joint = _v_phase(T, W, V, G, lam, banks, P,
                                         opts, joint, search_state)
        steps.append((sweep, "V", joint))

        G_plus = update_g(T, W, V, lam, banks, frozen_normalizers(banks, G))
        for alpha in (1.0, 0.5, 0.25, 0.1):
            cand = joint_objective(T, W, V, G + alpha * (G_plus - G),
                                   lam, banks)
            if cand[0] <= joint:
                G = G + alpha * (G_plus - G)
                joint = cand[0]
                break
        steps.append((sweep, "G", joint))

        joint, tensor_term, pen = joint_objective(T, W, V, G, lam, banks)
        trace.append((sweep, tensor_term, pen, joint))

        # Re-gauging to unit W/V columns and mean-free G is objective-
        # neutral in exact arithmetic, but a sort order can flip when
        # two projected points sit closer than the rescaling wobble;
        # skip the re-gauge rather than absorb the jump.
        W_n, V_n, G_n = _normalize_columns(W, V, G)
        try:
            banks_n = _build_banks(V_n, P)
            cand = joint_objective(T, W_n, V_n, G_n, lam, banks_n)
            if cand[0] <= joint + 1e-12 * max(1.0, joint):
                W, V, G, banks = W_n, V_n, G_n, banks_n
                joint = cand[0]
        except DegenerateAxisError:
            pass

        if prev_joint is not None and abs(prev_joint - joint) <= \
                opts.outer_tolerance * max(prev_joint, 1e-300):
            stalled += 1
            if stalled >= 3:  # three quiet sweeps in a row
                break
        else:
            stalled = 0
        prev_joint = joint

    joint, tensor_term, pen = joint_objective(T, W, V, G, lam, banks)
    rel = (np.sqrt(tensor_term) / tensor_norm * 100.0
           if tensor_norm > 0 else np.nan)
    return FcpdSolution(
        factors=FactorSet(W, V, G, tag="G"),
        lambda_used=float(lam),
        axes=P.T @ V,
        trace=np.asarray(trace),
        step_trace=tuple(steps),
        tensor_relative_percent=float(rel),
        penalty=pen,
        joint=joint,
        sweeps=len(trace),
        restart_index=restart,
        degenerate_retries=retries,
    )


def fcpd_solve(T, points, r: int, lam: float,
               opts: FcpdOptions = FcpdOptions(), initial=None,
               max_workers: int = 1) -> FcpdSolution:
    """Best-of-restarts filtered decomposition at a fixed penalty weight.

    Restarts draw their factors uniformly from (-1, 1); when ``initial``
    (a FactorSet or (W, V, G) triple) is given it replaces the first
    restart, which lets a caller chain solutions across penalty
    weights.  Restarts are independent, so ``max_workers`` > 1 runs
    them concurrently; the best final joint objective wins either way.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3:
        raise ValueError("expected a third-order tensor")
    if not np.all(np.isfinite(T)):
        raise ValueError("tensor entries must be finite")
    if r < 1:
        raise ValueError("rank r must be at least 1")
    if not lam > 0:
        raise ValueError("the penalty weight must be positive")
    P = _points_array(points)
    n, m, N = T.shape
    if P.shape != (m, N):
        raise ValueError(f"points must be {m} x {N}, got {P.shape}")

    tensor_norm = float(np.linalg.norm(T))
    inits = list(np.random.SeedSequence(opts.seed).spawn(opts.restarts))
    if initial is not None:
        if isinstance(initial, FactorSet):
            initial = (initial.W, initial.V, initial.third)
        inits[0] = tuple(initial)

    def attempt(item):
        restart, init = item
        try:
            return _single_restart(T, P, r, lam, opts, restart, init,
                                   tensor_norm)
        except DegenerateAxisError as exc:
            return exc

    tasks = list(enumerate(inits))
    if max_workers > 1 and len(tasks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as ex:
            outcomes = list(ex.map(attempt, tasks))
    else:
        outcomes = [attempt(t) for t in tasks]

    best: FcpdSolution | None = None
    failure: DegenerateAxisError | None = None
    for outcome in outcomes:
        if isinstance(outcome, DegenerateAxisError):
            failure = outcome
            continue
        if best is None or outcome.joint < best.joint:
            best = outcome
    if best is None:
        raise failure if failure is not None else RuntimeError("no restarts ran")
    return best


def factor_smoothness(V: np.ndarray, T3: np.ndarray, points) -> float:
    """Left/right smoothness penalty of any third factor on the axes
    defined by V.  Infinite when an axis has coincident projections
    (maximally non-smooth for this purpose)."""
    try:
        bank_l = build_filter_bank(V, points, "left", WINDOW)
        bank_r = build_filter_bank(V, points, "right", WINDOW)
    except DegenerateAxisError:
        return np.inf
    return smoothness_penalty(bank_l, bank_r, np.asarray(T3, dtype=np.float64))


# ---------------------------------------------------------------------------
# Penalty-weight line search
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LambdaRun:
    lambda_value: float
    status: str                       # "ok" or "failed"
    solution: FcpdSolution | None
    model: DecoupledModel | None
    report: ErrorReport | None
    detail: str = ""

    @property
    def max_error_percent(self) -> float:
        if self.report is None:
            return np.inf
        return self.report.max_error_percent


@dataclass(frozen=True, eq=False)
class LambdaSearchResult:
    best: LambdaRun
    runs: tuple[LambdaRun, ...]

    @property
    def best_lambda(self) -> float:
        return self.best.lambda_value


def _fit_solution_model(solution: FcpdSolution, f: MonomialFunction,
                        pts: OperatingPointSet, degree: int) -> tuple[DecoupledModel, np.ndarray]:
    coeffs, fit_rms = fit_branches(solution.axes, solution.G, degree)
    model = DecoupledModel(solution.W, solution.V, tuple(coeffs))
    return calibrate_offsets(model, f, pts), fit_rms


def _run_single_lambda(T, pts, r, lam, opts, f, val_pts, initial=None,
                       max_workers: int = 1) -> LambdaRun:
    try:
        solution = fcpd_solve(T, pts, r, lam, opts, initial=initial,
                              max_workers=max_workers)
        model, fit_rms = _fit_solution_model(solution, f, pts, opts.branch_degree)
    except (DegenerateAxisError, BranchFitError) as exc:
        return LambdaRun(float(lam), "failed", None, None, None, str(exc))
    report = relative_error(f, model, val_pts)
    report = ErrorReport(
        errors_percent=report.errors_percent,
        undefined_outputs=report.undefined_outputs,
        tensor_relative_percent=solution.tensor_relative_percent,
        lambda_used=float(lam),
        branch_fit_rms=fit_rms,
    )
    return LambdaRun(float(lam), "ok", solution, model, report)


def lambda_search(T, points, r: int, grid, opts: FcpdOptions,
                  f: MonomialFunction, val_points=None,
                  max_workers: int = 1) -> LambdaSearchResult:
    """Solve once per penalty weight and keep the one whose fitted model
    reproduces f best (max per-output relative rms error, validated on
    ``val_points`` or, failing that, on the training points)."""
    grid = tuple(float(g) for g in grid)
    if len(grid) == 0:
        raise ValueError("the penalty-weight grid must be non-empty")
    if any(not g > 0 for g in grid):
        raise ValueError("penalty weights must be positive")
    pts = points
    val_pts = val_points if val_points is not None else pts

    # Work through the grid from the strongest penalty down, seeding
    # each weight's first restart with the best factors found so far:
    # heavily smoothed solutions park near the branch structure, and
    # relaxing the penalty then refines the tensor fit.  Every weight
    # still runs its own independent random restarts.
    order = sorted(range(len(grid)), key=lambda i: -grid[i])
    runs: list[LambdaRun | None] = [None] * len(grid)
    carry = None
    for i in order:
        run = _run_single_lambda(T, pts, r, grid[i], opts, f, val_pts,
                                 initial=carry, max_workers=max_workers)
        runs[i] = run
        if run.status == "ok":
            carry = run.solution.factors

    ok = [run for run in runs if run.status == "ok"]
    if not ok:
        raise RuntimeError("every penalty weight failed with degenerate axes")
    best = min(ok, key=lambda run: (run.max_error_percent, run.lambda_value))
    return LambdaSearchResult(best, tuple(runs))
