"""Configuration-driven pipeline runner.

Loads a polynomial from a JSON function file, samples operating points,
builds the Jacobian stack, runs the requested decomposition, and writes
report.json / model.json / branches.csv / trace.csv into the output
directory.  Runs are deterministic for a fixed config and seed; floats
in artifacts are rendered with 17 significant digits so reports are
byte-identical across runs.

Exit codes: 0 success, 2 invalid config or inputs, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import jsonio
from .cpd import AlsOptions, cpd_als
from .findiff import DegenerateAxisError
from .model import (
    BranchFitError,
    DecoupledModel,
    eval_decoupled_batch,
    fit_branches,
    load_model,
    model_to_dict,
    relative_error,
)
from .polyfun import build_jacobian_tensor, load_function, sample_points
from .solver import FcpdOptions, factor_smoothness, lambda_search

_MODES = ("cpd", "fcpd", "compare")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


@dataclass(frozen=True)
class RunConfig:
    function_file: Path
    mode: str = "fcpd"
    rank: int = 3
    n_points: int = 100
    bounds: tuple[float, float] = (-1.5, 1.5)
    seed: int = 0
    lambda_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
    restarts: int = 5
    max_sweeps: int = 200
    outer_tolerance: float = 1e-8
    inner_max_iterations: int = 50
    inner_gradient_tolerance: float = 1e-8
    branch_degree: int = 3
    out_dir: Path = Path("fcpd_out")
    validate_on_training: bool = False
    dump_filters: bool = False
    model_a: Path | None = None
    model_b: Path | None = None

    def solver_options(self) -> FcpdOptions:
        return FcpdOptions(
            max_sweeps=self.max_sweeps,
            outer_tolerance=self.outer_tolerance,
            seed=self.seed,
            restarts=self.restarts,
            lambda_grid=self.lambda_grid,
            inner_max_iterations=self.inner_max_iterations,
            inner_gradient_tolerance=self.inner_gradient_tolerance,
            branch_degree=self.branch_degree,
        )


_CONFIG_KEYS = {
    "function_file", "mode", "r", "N", "bounds", "seed", "lambda_grid",
    "restarts", "max_sweeps", "outer_tolerance", "inner_max_iterations",
    "inner_gradient_tolerance", "branch_degree", "out_dir",
    "validate_on_training", "model_a", "model_b",
}


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Input paths are resolved relative to the config file; the output
    directory is resolved relative to the working directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")

    base = path.parent

    def _path(key, required):
        val = raw.get(key)
        if val is None:
            if required:
                raise ConfigError(key, "is required")
            return None
        p = Path(val)
        if not p.is_absolute():
            p = base / p
        if not p.is_file():
            raise ConfigError(key, f"file not found: {p}")
        return p

    def _pos_int(key, default):
        val = raw.get(key, default)
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise ConfigError(key, f"must be a positive integer, got {val!r}")
        return val

    def _pos_float(key, default):
        val = raw.get(key, default)
        if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
            raise ConfigError(key, f"must be a positive number, got {val!r}")
        return float(val)

    mode = raw.get("mode", "fcpd")
    if mode not in _MODES:
        raise ConfigError("mode", f"must be one of {_MODES}, got {mode!r}")

    bounds = raw.get("bounds", (-1.5, 1.5))
    if (not isinstance(bounds, (list, tuple)) or len(bounds) != 2
            or not all(isinstance(b, (int, float)) for b in bounds)
            or not bounds[0] < bounds[1]):
        raise ConfigError("bounds", f"must be [lo, hi] with lo < hi, got {bounds!r}")

    grid = raw.get("lambda_grid", [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0])
    if (not isinstance(grid, (list, tuple)) or len(grid) == 0
            or not all(isinstance(g, (int, float)) and g > 0 for g in grid)):
        raise ConfigError("lambda_grid", "must be a non-empty list of positive numbers")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", f"must be an integer, got {seed!r}")

    validate_on_training = raw.get("validate_on_training", False)
    if not isinstance(validate_on_training, bool):
        raise ConfigError("validate_on_training", "must be a boolean")

    return RunConfig(
        function_file=_path("function_file", required=True),
        mode=mode,
        rank=_pos_int("r", 3),
        n_points=_pos_int("N", 100),
        bounds=(float(bounds[0]), float(bounds[1])),
        seed=seed,
        lambda_grid=tuple(float(g) for g in grid),
        restarts=_pos_int("restarts", 5),
        max_sweeps=_pos_int("max_sweeps", 200),
        outer_tolerance=_pos_float("outer_tolerance", 1e-8),
        inner_max_iterations=_pos_int("inner_max_iterations", 50),
        inner_gradient_tolerance=_pos_float("inner_gradient_tolerance", 1e-8),
        branch_degree=_pos_int("branch_degree", 3),
        out_dir=Path(raw.get("out_dir", "fcpd_out")),
        validate_on_training=validate_on_training,
        model_a=_path("model_a", required=(mode == "compare")),
        model_b=_path("model_b", required=(mode == "compare")),
    )


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                _fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _write_trace_csv(path: Path, trace: np.ndarray) -> None:
    rows = [(int(it), float(t), float(p), float(j)) for it, t, p, j in trace]
    _write_csv(path, ["iteration", "tensor_term", "penalty_term",
                      "joint_objective"], rows)


def _write_branches_csv(path: Path, axes: np.ndarray, samples: np.ndarray,
                        fitted: np.ndarray) -> None:
    rows = []
    for i in range(axes.shape[1]):
        order = np.argsort(axes[:, i])
        for k in order:
            rows.append((i, float(axes[k, i]), float(samples[k, i]),
                         float(fitted[k, i])))
    _write_csv(path, ["branch_index", "z", "g_sample", "g_fit"], rows)


def _error_payload(report) -> dict:
    return {
        "errors_percent": [float(e) for e in report.errors_percent],
        "max_error_percent": float(report.max_error_percent),
        "undefined_outputs": list(report.undefined_outputs),
    }


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def _thread_count() -> int:
    env = os.environ.get("FCPD_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("FCPD_THREADS", f"must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _run_fcpd(config: RunConfig, out: Path) -> int:
    f = load_function(config.function_file)
    pts = sample_points(f.input_dim, config.n_points, config.bounds, config.seed)
    tensor = build_jacobian_tensor(f, pts)
    val_pts = pts if config.validate_on_training else sample_points(
        f.input_dim, config.n_points, config.bounds, config.seed + 1)

    search = lambda_search(tensor.data, pts, config.rank, config.lambda_grid,
                           config.solver_options(), f, val_points=val_pts,
                           max_workers=_thread_count())
    best = search.best
    solution = best.solution

    table = []
    for run in search.runs:
        entry = {"lambda": run.lambda_value, "status": run.status}
        if run.status == "ok":
            entry.update({
                "tensor_relative_percent": run.solution.tensor_relative_percent,
                "penalty": run.solution.penalty,
                "joint_objective": run.solution.joint,
                "sweeps": run.solution.sweeps,
                **_error_payload(run.report),
            })
        else:
            entry["detail"] = run.detail
        entry["selected"] = run.lambda_value == best.lambda_value
        table.append(entry)

    report = {
        "mode": "fcpd",
        "function_file": str(config.function_file),
        "r": config.rank,
        "N": config.n_points,
        "bounds": [config.bounds[0], config.bounds[1]],
        "seed": config.seed,
        "validation_points": "training" if config.validate_on_training else "fresh",
        "selected_lambda": best.lambda_value,
        **_error_payload(best.report),
        "tensor_relative_percent": solution.tensor_relative_percent,
        "smoothness_penalty": solution.penalty,
        "joint_objective": solution.joint,
        "sweeps": solution.sweeps,
        "branch_fit_rms": [float(x) for x in best.report.branch_fit_rms],
        "lambda_table": table,
    }
    jsonio.dump(report, out / "report.json")
    jsonio.dump(model_to_dict(best.model), out / "model.json")
    fitted = best.model.branch_values(solution.axes)
    _write_branches_csv(out / "branches.csv", solution.axes, solution.G, fitted)
    _write_trace_csv(out / "trace.csv", solution.trace)
    if config.dump_filters:
        _dump_filters(out / "filters.csv", solution.V, pts)
    return 0


def _dump_filters(path: Path, V: np.ndarray, pts) -> None:
    from .findiff import build_filter_bank
    rows = []
    k = 3
    for scheme in ("left", "central", "right"):
        bank = build_filter_bank(V, pts, scheme, k)
        for i, flt in enumerate(bank.filters):
            zs = flt.z[flt.structure.perm]
            for row in range(flt.size):
                rows.append((i, scheme, row, float(zs[row]),
                             int(flt.structure.perm[row]),
                             *[float(w) for w in flt.weights[row]]))
    _write_csv(path, ["branch", "scheme", "row", "z_sorted", "perm",
                      "w0", "w1", "w2"], rows)


def _run_cpd(config: RunConfig, out: Path) -> int:
    f = load_function(config.function_file)
    pts = sample_points(f.input_dim, config.n_points, config.bounds, config.seed)
    tensor = build_jacobian_tensor(f, pts)
    opts = AlsOptions(max_iterations=config.max_sweeps, seed=config.seed,
                      restarts=config.restarts)
    result = cpd_als(tensor.data, config.rank, opts)

    V, H = result.factors.V, result.factors.third
    penalty = factor_smoothness(V, H, pts)
    axes = pts.points.T @ V
    coeffs, _ = fit_branches(axes, H, config.branch_degree)
    fitted = np.column_stack([
        np.polynomial.polynomial.polyval(axes[:, i], coeffs[i])
        for i in range(config.rank)])

    report = {
        "mode": "cpd",
        "function_file": str(config.function_file),
        "r": config.rank,
        "N": config.n_points,
        "bounds": [config.bounds[0], config.bounds[1]],
        "seed": config.seed,
        "tensor_relative_percent": float(result.relative_percent),
        "tensor_relative": float(result.relative_percent) / 100.0,
        "squared_residual": float(result.trace[-1]),
        "iterations": result.iterations,
        "smoothness_penalty": penalty,
    }
    jsonio.dump(report, out / "report.json")
    _write_branches_csv(out / "branches.csv", axes, H, fitted)
    rows = [(i, float(sq), 0.0, float(sq)) for i, sq in enumerate(result.trace)]
    _write_csv(out / "trace.csv", ["iteration", "tensor_term", "penalty_term",
                                   "joint_objective"], rows)
    return 0


def _run_compare(config: RunConfig, out: Path) -> int:
    f = load_function(config.function_file)
    model_a = load_model(config.model_a)
    model_b = load_model(config.model_b)
    for name, model in (("model_a", model_a), ("model_b", model_b)):
        if model.input_dim != f.input_dim or model.output_dim != f.output_dim:
            raise ConfigError(name, "model dimensions do not match the function")
    pts = sample_points(f.input_dim, config.n_points, config.bounds, config.seed)
    rep_a = relative_error(f, model_a, pts)
    rep_b = relative_error(f, model_b, pts)
    dev = float(np.abs(eval_decoupled_batch(model_a, pts.points)
                       - eval_decoupled_batch(model_b, pts.points)).max())
    report = {
        "mode": "compare",
        "function_file": str(config.function_file),
        "N": config.n_points,
        "bounds": [config.bounds[0], config.bounds[1]],
        "seed": config.seed,
        "model_a": {"path": str(config.model_a), **_error_payload(rep_a)},
        "model_b": {"path": str(config.model_b), **_error_payload(rep_b)},
        "max_pointwise_deviation": dev,
    }
    jsonio.dump(report, out / "report.json")
    return 0


def run(config: RunConfig) -> int:
    """Execute one configured run, writing artifacts into its out_dir."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if config.mode == "fcpd":
        return _run_fcpd(config, out)
    if config.mode == "cpd":
        return _run_cpd(config, out)
    return _run_compare(config, out)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _error_json(kind: str, exc: Exception) -> str:
    payload = {"error": kind, "detail": str(exc)}
    field = getattr(exc, "field", None)
    if field is not None:
        payload["field"] = field
    return json.dumps(payload)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fcpd",
        description="Decouple a coupled polynomial map into univariate "
                    "branches via a filtered CP decomposition of its "
                    "sampled Jacobians.")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--mode", choices=_MODES, help="override the config mode")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--dump-filters", action="store_true",
                        help="also write filters.csv (axis, permutation, row weights)")
    parser.add_argument("--validate-on-training", action="store_true",
                        help="score the model on the training points instead "
                             "of a fresh validation set")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        overrides = {}
        if args.mode is not None:
            overrides["mode"] = args.mode
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = Path(args.out)
        if args.dump_filters:
            overrides["dump_filters"] = True
        if args.validate_on_training:
            overrides["validate_on_training"] = True
        if overrides:
            config = replace(config, **overrides)
        if config.mode == "compare" and (config.model_a is None or config.model_b is None):
            raise ConfigError("model_a", "compare mode needs model_a and model_b")
    except (ConfigError, ValueError) as exc:
        print(_error_json("invalid-config", exc), file=sys.stderr)
        return 2

    try:
        return run(config)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (DegenerateAxisError, BranchFitError)):
            print(_error_json("solver-failure", exc), file=sys.stderr)
            return 3
        print(_error_json("invalid-input", exc), file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(_error_json("solver-failure", exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
