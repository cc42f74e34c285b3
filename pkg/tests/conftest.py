from pathlib import Path

import numpy as np
import pytest

from fcpd import toy
from fcpd.polyfun import MonomialFunction, build_jacobian_tensor, sample_points

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def repo_data_dir():
    return REPO_ROOT / "data"


@pytest.fixture(scope="session")
def toy_function():
    return toy.toy_coupled()


@pytest.fixture(scope="session")
def toy_model():
    return toy.toy_decoupled()


@pytest.fixture(scope="session")
def toy_points(toy_function):
    return sample_points(toy_function.input_dim, 100, toy.TOY_BOUNDS, seed=7)


@pytest.fixture(scope="session")
def toy_tensor(toy_function, toy_points):
    return build_jacobian_tensor(toy_function, toy_points)


def random_polynomial(rng, m=None, n=None, max_degree=4, n_terms=None):
    """A random monomial-basis polynomial with distinct exponent rows."""
    m = m or int(rng.integers(1, 4))
    n = n or int(rng.integers(1, 4))
    n_terms = n_terms or int(rng.integers(1, 7))
    n_terms = min(n_terms, (max_degree + 1) ** m)
    seen = set()
    while len(seen) < n_terms:
        seen.add(tuple(int(e) for e in rng.integers(0, max_degree + 1, size=m)))
    exps = np.array(sorted(seen), dtype=np.int64)
    coeffs = rng.standard_normal((exps.shape[0], n))
    return MonomialFunction(m, n, exps, coeffs)
