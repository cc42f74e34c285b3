import numpy as np
import pytest
import scipy.linalg

import fcpd
from fcpd import toy
from fcpd.findiff import DegenerateAxisError, build_filter_bank
from fcpd.polyfun import sample_points
from fcpd.solver import (
    FcpdOptions,
    _build_banks,
    _frozen_objective,
    factor_smoothness,
    fcpd_solve,
    freeze_structures,
    frozen_normalizers,
    joint_objective,
    lambda_search,
    update_g,
    update_v,
    update_w,
    v_gradient,
    v_objective,
    STACKED_LSTSQ_RCOND,
    WINDOW,
)
from fcpd.tensor3 import FactorSet, khatri_rao, matricize, reconstruct


def smooth_problem(rng, n=2, m=2, N=24, r=2, bounds=(-1.5, 1.5)):
    """Synthetic exact instance: T = [[W*, V*, F_C(V*) o G*]] with
    polynomial branch samples."""
    pts = sample_points(m, N, bounds, seed=int(rng.integers(0, 2**31)))
    W = rng.uniform(-1, 1, (n, r))
    V = rng.uniform(-1, 1, (m, r))
    banks = _build_banks(V, pts)
    Z = pts.points.T @ V
    G = np.column_stack([
        np.polynomial.polynomial.polyval(Z[:, i], rng.uniform(-1, 1, 4))
        for i in range(r)])
    H = banks.center.apply(G)
    T = reconstruct(FactorSet(W, V, H))
    return T, pts, W, V, G, banks


def dense_g_oracle(T, W, V, lam, banks, norms):
    """Independent dense solve of the stacked system: explicit Kronecker
    product and block-diagonal filters, minimum-norm least squares."""
    n, m, N = T.shape
    r = W.shape[1]
    M = khatri_rao(V, W)
    top = np.kron(M, np.eye(N)) @ scipy.linalg.block_diag(
        *[f.matrix() for f in banks.center.filters])
    blocks = []
    for i in range(r):
        if norms[i] is None:
            blocks.append(np.zeros((N, N)))
        else:
            blocks.append(banks.left.filters[i].matrix() / norms[i][0]
                          - banks.right.filters[i].matrix() / norms[i][1])
    bottom = np.sqrt(lam) * scipy.linalg.block_diag(*blocks)
    K = np.vstack([top, bottom])
    rhs = np.concatenate([matricize(T, 3).ravel(order="F"),
                          np.zeros(r * N)])
    vec_g = np.linalg.lstsq(K, rhs, rcond=STACKED_LSTSQ_RCOND)[0]
    return vec_g.reshape(N, r, order="F")


class TestUpdateW:
    def test_recovers_true_w(self):
        rng = np.random.default_rng(0)
        T, pts, W, V, G, banks = smooth_problem(rng)
        recovered = update_w(T, V, G, banks.center)
        assert np.abs(recovered - W).max() < 1e-9

    def test_zero_tensor_zero_w(self):
        rng = np.random.default_rng(1)
        T, pts, W, V, G, banks = smooth_problem(rng)
        out = update_w(np.zeros_like(T), V, G, banks.center)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_matches_dense_least_squares(self):
        rng = np.random.default_rng(2)
        T, pts, W, V, G, banks = smooth_problem(rng)
        T = T + 0.01 * rng.standard_normal(T.shape)
        out = update_w(T, V, G, banks.center)
        design = khatri_rao(banks.center.apply(G), V)
        ref = np.linalg.lstsq(design, matricize(T, 1).T, rcond=None)[0].T
        np.testing.assert_allclose(out, ref, atol=1e-10)


class TestUpdateG:
    def test_recovers_filtered_factor(self):
        rng = np.random.default_rng(3)
        T, pts, W, V, G, banks = smooth_problem(rng)
        norms = frozen_normalizers(banks, G)
        out = update_g(T, W, V, 1e-12, banks, norms)
        # branch samples are free up to a constant; compare filtered values
        np.testing.assert_allclose(banks.center.apply(out),
                                   banks.center.apply(G),
                                   atol=1e-9 * max(1.0, np.abs(G).max()))

    def test_zero_tensor_zero_solution(self):
        rng = np.random.default_rng(4)
        T, pts, W, V, G, banks = smooth_problem(rng)
        norms = frozen_normalizers(banks, G)
        out = update_g(np.zeros_like(T), W, V, 10.0, banks, norms)
        val = _frozen_objective(np.zeros_like(T), W, V, out, 10.0, banks, norms)
        assert val[0] <= 1e-12

    def test_exact_minimizer_of_frozen_objective(self):
        rng = np.random.default_rng(5)
        T, pts, W, V, G, banks = smooth_problem(rng)
        T = T + 0.05 * rng.standard_normal(T.shape)
        norms = frozen_normalizers(banks, G)
        out = update_g(T, W, V, 3.0, banks, norms)
        base = _frozen_objective(T, W, V, out, 3.0, banks, norms)[0]
        for _ in range(10):
            probe = out + 1e-4 * rng.standard_normal(out.shape)
            assert _frozen_objective(T, W, V, probe, 3.0, banks, norms)[0] >= base

    def test_matches_dense_stacked_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            n = int(rng.integers(2, 4))
            m = int(rng.integers(2, 4))
            N = int(rng.integers(12, 31))
            r = int(rng.integers(1, 4))
            T, pts, W, V, G, banks = smooth_problem(rng, n=n, m=m, N=N, r=r)
            T = T + 0.02 * rng.standard_normal(T.shape)
            lam = float(10.0 ** rng.integers(-2, 3))
            norms = frozen_normalizers(banks, G)
            mine = update_g(T, W, V, lam, banks, norms)
            ref = dense_g_oracle(T, W, V, lam, banks, norms)
            scale = max(1.0, np.abs(ref).max())
            assert np.abs(mine - ref).max() < 1e-8 * scale


class TestVObjectiveGradient:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 20:
            T, pts, W, V, G, banks = smooth_problem(rng)
            T = T + 0.05 * rng.standard_normal(T.shape)
            V0 = V + 0.1 * rng.standard_normal(V.shape)
            try:
                banks0 = _build_banks(V0, pts)
            except DegenerateAxisError:
                continue
            # tight projected pairs give the weights huge curvature,
            # which only degrades the difference quotient, not the
            # analytic gradient; keep the check on benign instances
            Z = pts.points.T @ V0
            gaps = np.diff(np.sort(Z, axis=0), axis=0)
            if gaps.min() < 1e-3 * np.ptp(Z, axis=0).max():
                continue
            lam = float(10.0 ** rng.integers(-1, 3))
            norms = frozen_normalizers(banks0, G)
            structs = freeze_structures(V0, pts.points)
            grad = v_gradient(T, W, G, V0, lam, pts.points, structs, norms)
            fd = np.zeros_like(V0)
            h = 1e-5
            for c in range(V0.shape[0]):
                for i in range(V0.shape[1]):
                    Vp, Vm = V0.copy(), V0.copy()
                    Vp[c, i] += h
                    Vm[c, i] -= h
                    fd[c, i] = (v_objective(T, W, G, Vp, lam, pts.points,
                                            structs, norms)
                                - v_objective(T, W, G, Vm, lam, pts.points,
                                              structs, norms)) / (2 * h)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-30)
            assert rel < 1e-5
            checked += 1

    def test_update_v_descends_toward_truth(self):
        rng = np.random.default_rng(8)
        T, pts, W, V, G, banks = smooth_problem(rng)
        V0 = V + 0.02 * rng.standard_normal(V.shape)
        opts = FcpdOptions(seed=0)
        out = update_v(T, W, G, V0, 1e-8, pts.points, opts)
        before = joint_objective(T, W, V0, G, 1e-8, _build_banks(V0, pts))[0]
        after = joint_objective(T, W, out, G, 1e-8, _build_banks(out, pts))[0]
        assert after < before

    def test_update_v_never_worse(self):
        rng = np.random.default_rng(9)
        T, pts, W, V, G, banks = smooth_problem(rng)
        T = T + 0.1 * rng.standard_normal(T.shape)
        opts = FcpdOptions(seed=0)
        for _ in range(5):
            V0 = V + rng.standard_normal(V.shape)
            try:
                before = joint_objective(T, W, V0, G, 5.0,
                                         _build_banks(V0, pts))[0]
            except DegenerateAxisError:
                continue
            norms = frozen_normalizers(_build_banks(V0, pts), G)
            out = update_v(T, W, G, V0, 5.0, pts.points, opts, norms)
            after = v_objective(T, W, G, out, 5.0, pts.points,
                                freeze_structures(out, pts.points), norms)
            base = v_objective(T, W, G, V0, 5.0, pts.points,
                               freeze_structures(V0, pts.points), norms)
            assert after <= base + 1e-12 * max(1.0, base)


class TestFcpdSolve:
    def test_input_validation(self, toy_tensor, toy_points):
        with pytest.raises(ValueError):
            fcpd_solve(toy_tensor.data, toy_points, 0, 1.0)
        with pytest.raises(ValueError):
            fcpd_solve(toy_tensor.data, toy_points, 3, 0.0)
        bad = toy_tensor.data.copy()
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            fcpd_solve(bad, toy_points, 3, 1.0)

    def test_single_smooth_branch(self):
        rng = np.random.default_rng(10)
        T, pts, W, V, G, banks = smooth_problem(rng, r=1, N=40)
        sol = fcpd_solve(T, pts, 1, 1.0,
                         FcpdOptions(seed=0, restarts=2, max_sweeps=60))
        assert sol.tensor_relative_percent < 1.0
        assert sol.penalty < 1e-2

    def test_monotone_step_trace(self):
        rng = np.random.default_rng(11)
        T, pts, W, V, G, banks = smooth_problem(rng)
        T = T + 0.05 * rng.standard_normal(T.shape)
        sol = fcpd_solve(T, pts, 2, 10.0,
                         FcpdOptions(seed=1, restarts=1, max_sweeps=40))
        vals = [v for _, _, v in sol.step_trace]
        for a, b in zip(vals, vals[1:]):
            assert b - a <= 1e-10 * max(1.0, a)

    def test_small_lambda_tracks_unconstrained_baseline(self):
        # with a vanishing penalty the filtered solver should fit a
        # noisy low-rank tensor about as well as plain ALS
        rng = np.random.default_rng(12)
        T, pts, W, V, G, banks = smooth_problem(rng, N=40)
        T = T + 0.005 * np.linalg.norm(T) / np.sqrt(T.size) \
            * rng.standard_normal(T.shape)
        baseline = fcpd.cpd_als(T, 2, fcpd.AlsOptions(seed=3, restarts=2))
        sol = fcpd_solve(T, pts, 2, 1e-9,
                         FcpdOptions(seed=3, restarts=2, max_sweeps=80))
        assert sol.tensor_relative_percent <= \
            10.0 * max(baseline.relative_percent, 1e-12)

    def test_warm_start_is_used(self):
        rng = np.random.default_rng(13)
        T, pts, W, V, G, banks = smooth_problem(rng)
        opts = FcpdOptions(seed=2, restarts=1, max_sweeps=30)
        warm = fcpd_solve(T, pts, 2, 1.0, opts,
                          initial=FactorSet(W, V, G, tag="G"))
        # a single restart from the generating factors stays in their
        # basin: near-exact fit, near-zero penalty
        assert warm.tensor_relative_percent < 1.0
        assert warm.penalty < 0.1

    def test_deterministic(self, toy_tensor, toy_points):
        opts = FcpdOptions(seed=5, restarts=1, max_sweeps=8)
        a = fcpd_solve(toy_tensor.data, toy_points, 3, 100.0, opts)
        b = fcpd_solve(toy_tensor.data, toy_points, 3, 100.0, opts)
        np.testing.assert_array_equal(a.G, b.G)
        assert a.joint == b.joint


class TestFactorSmoothness:
    def test_smooth_branches_far_below_scattered(self):
        # cubic branches carry the honest truncation-level penalty of
        # 3-point windows; scattering the same samples must cost orders
        # of magnitude more
        rng = np.random.default_rng(14)
        T, pts, W, V, G, banks = smooth_problem(rng)
        smooth = factor_smoothness(V, G, pts)
        scattered = factor_smoothness(V, G[rng.permutation(G.shape[0])], pts)
        assert smooth < 0.1
        assert scattered > 100.0 * smooth

    def test_degenerate_axis_is_infinite(self):
        pts = sample_points(2, 20, (-1, 1), seed=15)
        V = np.zeros((2, 1))
        assert factor_smoothness(V, np.ones((20, 1)), pts) == np.inf


class TestLambdaSearch:
    def test_grid_validation(self, toy_tensor, toy_points, toy_function):
        opts = FcpdOptions(seed=0, restarts=1, max_sweeps=5)
        with pytest.raises(ValueError):
            lambda_search(toy_tensor.data, toy_points, 3, [], opts,
                          toy_function)
        with pytest.raises(ValueError):
            lambda_search(toy_tensor.data, toy_points, 3, [-1.0], opts,
                          toy_function)

    def test_single_entry_grid_selected(self):
        rng = np.random.default_rng(16)
        T, pts, W, V, G, banks = smooth_problem(rng)
        f = _as_function(rng, W, V)
        opts = FcpdOptions(seed=0, restarts=1, max_sweeps=15, branch_degree=3)
        res = lambda_search(T, pts, 2, [10.0], opts, f)
        assert res.best_lambda == 10.0
        assert len(res.runs) == 1


def _as_function(rng, W, V):
    """A stand-in coupled function (the search only needs something to
    score models against)."""
    from conftest import random_polynomial
    return random_polynomial(rng, m=V.shape[0], n=W.shape[0], max_degree=3)
