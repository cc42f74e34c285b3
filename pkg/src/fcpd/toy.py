"""The built-in two-input / two-output cubic demo problem.

A coupled cubic polynomial map and the equivalent three-branch decoupled
form it was expanded from.  The pair doubles as the canonical test
fixture: both representations must evaluate identically (up to rounding
in the expanded coefficients), which validates every evaluation path
before any solver runs.
"""

from __future__ import annotations

import numpy as np

from .model import DecoupledModel
from .polyfun import MonomialFunction

# Coupled form: rows are the two outputs, columns follow TOY_EXPONENTS.
TOY_EXPONENTS = np.array([
    [2, 0],
    [1, 1],
    [0, 2],
    [3, 0],
    [2, 1],
    [1, 2],
    [0, 3],
], dtype=np.int64)

TOY_COUPLED_COEFFS = np.array([
    [5.25, 0.0, -20.5, 29.875, 42.75, 31.5, -2.0],
    [20.75, 41.0, 85.0, 109.375, 120.75, 88.5, 93.0],
])

# Decoupled form: W g(V^T p) with three cubic branches.
TOY_W = np.array([
    [3.0, 0.5, -1.0],
    [1.0, 2.0, 3.0],
])

TOY_V = np.array([
    [1.0, 3.0, 0.5],
    [2.0, 1.0, 3.0],
])

# Ascending powers: z^3 + 0.5 z^2, 2 z^3 + z^2, z^3 + 3 z^2.
TOY_BRANCHES = (
    np.array([0.0, 0.0, 0.5, 1.0]),
    np.array([0.0, 0.0, 1.0, 2.0]),
    np.array([0.0, 0.0, 3.0, 1.0]),
)

TOY_BOUNDS = (-1.5, 1.5)
TOY_RANK = 3


def toy_coupled() -> MonomialFunction:
    """The coupled monomial-basis form of the demo function."""
    return MonomialFunction(2, 2, TOY_EXPONENTS, TOY_COUPLED_COEFFS.T)


def toy_decoupled() -> DecoupledModel:
    """The ground-truth decoupled form of the demo function."""
    return DecoupledModel(TOY_W, TOY_V, TOY_BRANCHES)
