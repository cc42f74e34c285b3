import numpy as np
import pytest

from fcpd import toy
from fcpd.model import (
    BranchFitError,
    DecoupledModel,
    calibrate_offsets,
    eval_decoupled,
    eval_decoupled_batch,
    fit_branches,
    load_model,
    model_from_dict,
    model_to_dict,
    relative_error,
    save_model,
)
from fcpd.polyfun import OperatingPointSet, eval_poly_batch, sample_points


class TestFitBranches:
    def test_recovers_exact_cubic(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-2, 2, size=(60, 1))
        g = z**3 + 0.5 * z**2
        coeffs, res = fit_branches(z, g, 3)
        np.testing.assert_allclose(coeffs[0], [0.0, 0.0, 0.5, 1.0], atol=1e-8)
        assert res[0] < 1e-10

    def test_zero_samples_zero_polynomials(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-1, 1, size=(30, 2))
        coeffs, res = fit_branches(z, np.zeros((30, 2)), 3)
        for c in coeffs:
            np.testing.assert_allclose(c, 0.0, atol=1e-14)
        np.testing.assert_allclose(res, 0.0, atol=1e-14)

    def test_underfit_has_positive_residual(self):
        rng = np.random.default_rng(2)
        z = rng.uniform(-1, 1, size=(40, 1))
        g = z**2
        _, res = fit_branches(z, g, 1)
        assert res[0] > 1e-3

    def test_wide_axis_conditioning(self):
        # the internal affine rescale keeps wide axes workable
        rng = np.random.default_rng(3)
        z = rng.uniform(900.0, 1100.0, size=(80, 1))
        g = 2.0 + 0.5 * z + 0.25 * z**2 + 0.01 * z**3
        coeffs, res = fit_branches(z, g, 3)
        fit = np.polynomial.polynomial.polyval(z[:, 0], coeffs[0])
        np.testing.assert_allclose(fit, g[:, 0], rtol=1e-9)

    def test_collapsed_axis_names_branch(self):
        z = np.column_stack([np.linspace(0, 1, 20), np.full(20, 2.0)])
        g = np.ones((20, 2))
        with pytest.raises(BranchFitError) as err:
            fit_branches(z, g, 3)
        assert err.value.branch == 1

    def test_degree_bounds(self):
        z = np.linspace(0, 1, 3).reshape(-1, 1)
        with pytest.raises(ValueError):
            fit_branches(z, z, 3)
        with pytest.raises(ValueError):
            fit_branches(z, z, 0)


class TestEvalDecoupled:
    def test_toy_model_matches_coupled(self, toy_model):
        np.testing.assert_allclose(eval_decoupled(toy_model, [1.0, 0.0]),
                                   [35.125, 130.125], rtol=1e-12)

    def test_zero_w_gives_zero(self):
        model = DecoupledModel(np.zeros((2, 1)), np.ones((2, 1)),
                               (np.array([0.0, 1.0]),))
        assert not eval_decoupled(model, [3.0, 4.0]).any()

    def test_identity_branch(self):
        model = DecoupledModel(np.array([[1.0]]), np.array([[1.0], [0.0]]),
                               (np.array([0.0, 1.0]),))
        np.testing.assert_allclose(eval_decoupled(model, [0.7, 9.9]), [0.7])

    def test_dimension_mismatch(self, toy_model):
        with pytest.raises(ValueError):
            eval_decoupled(toy_model, [1.0, 2.0, 3.0])

    def test_axis_rescaling_indeterminacy(self, toy_model):
        # stretching v_i and refitting the branch on the stretched axis
        # leaves the model output unchanged
        rng = np.random.default_rng(4)
        alpha = 2.5
        V2 = toy_model.V.copy()
        V2[:, 0] *= alpha
        z = np.linspace(-4, 4, 50)
        g = np.polynomial.polynomial.polyval(z, toy_model.branches[0])
        coeffs, _ = fit_branches((z * alpha).reshape(-1, 1),
                                 g.reshape(-1, 1), 3)
        model2 = DecoupledModel(toy_model.W, V2,
                                (coeffs[0],) + toy_model.branches[1:])
        P = rng.uniform(-1.5, 1.5, size=(2, 64))
        np.testing.assert_allclose(eval_decoupled_batch(model2, P),
                                   eval_decoupled_batch(toy_model, P),
                                   atol=1e-10 * 400)


class TestRelativeError:
    def test_exact_model_near_zero(self, toy_function, toy_model, toy_points):
        rep = relative_error(toy_function, toy_model, toy_points)
        assert rep.max_error_percent < 1e-6

    def test_zero_model_is_100_percent(self, toy_function, toy_points):
        model = DecoupledModel(np.zeros((2, 3)), toy_model_V(), tuple(
            np.zeros(4) for _ in range(3)))
        rep = relative_error(toy_function, model, toy_points)
        np.testing.assert_allclose(rep.errors_percent, 100.0, rtol=1e-12)

    def test_zero_reference_output_flagged(self):
        from fcpd.polyfun import MonomialFunction
        f = MonomialFunction(1, 2, np.array([[1]]), np.array([[1.0, 0.0]]))
        model = DecoupledModel(np.array([[1.0], [0.0]]), np.array([[1.0]]),
                               (np.array([0.0, 1.0]),))
        pts = sample_points(1, 10, (-1.0, 1.0), seed=5)
        rep = relative_error(f, model, pts)
        assert rep.undefined_outputs == (1,)
        assert np.isnan(rep.errors_percent[1])

    def test_invariant_under_point_permutation(self, toy_function, toy_model,
                                               toy_points):
        rng = np.random.default_rng(6)
        shuffled = OperatingPointSet(
            toy_points.points[:, rng.permutation(100)], toy_points.bounds)
        a = relative_error(toy_function, toy_model, toy_points)
        b = relative_error(toy_function, toy_model, shuffled)
        np.testing.assert_allclose(a.errors_percent, b.errors_percent,
                                   rtol=1e-12)

    def test_dimension_mismatch(self, toy_function):
        model = DecoupledModel(np.ones((3, 1)), np.ones((2, 1)),
                               (np.array([0.0, 1.0]),))
        pts = sample_points(2, 5, (-1.0, 1.0), seed=7)
        with pytest.raises(ValueError):
            relative_error(toy_function, model, pts)


def toy_model_V():
    return toy.TOY_V.copy()


class TestCalibrateOffsets:
    def test_restores_dropped_constants(self, toy_function, toy_points):
        # shift every branch by a constant; calibration undoes the shift
        shifted = tuple(np.array(c, copy=True) for c in toy.TOY_BRANCHES)
        for c in shifted:
            c[0] += 2.0
        model = DecoupledModel(toy.TOY_W, toy.TOY_V, shifted)
        fixed = calibrate_offsets(model, toy_function, toy_points)
        rep = relative_error(toy_function, fixed, toy_points)
        assert rep.max_error_percent < 1e-8

    def test_noop_on_exact_model(self, toy_function, toy_model, toy_points):
        fixed = calibrate_offsets(toy_model, toy_function, toy_points)
        for a, b in zip(fixed.branches, toy_model.branches):
            np.testing.assert_allclose(a, b, atol=1e-9)


class TestModelIO:
    def test_round_trip_evaluates_identically(self, toy_model, tmp_path):
        path = tmp_path / "model.json"
        save_model(toy_model, path)
        again = load_model(path)
        rng = np.random.default_rng(8)
        P = rng.uniform(-1.5, 1.5, size=(2, 32))
        np.testing.assert_array_equal(eval_decoupled_batch(again, P),
                                      eval_decoupled_batch(toy_model, P))

    def test_schema_shape(self, toy_model):
        d = model_to_dict(toy_model)
        assert set(d) == {"W", "V", "branches"}
        assert all(set(b) == {"coeffs"} for b in d["branches"])
        rebuilt = model_from_dict(d)
        np.testing.assert_array_equal(rebuilt.W, toy_model.W)

    def test_malformed_rejected(self):
        with pytest.raises(ValueError):
            model_from_dict({"W": [[1.0]], "V": [[1.0]]})
