import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pertpinn import kernels

pytestmark = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not installed")


@pytest.fixture
def both():
    """Run a kernel under each backend and restore the original choice."""
    original = kernels.backend() == "numba"

    def run(fn, *args):
        out = []
        for flag in (False, True):
            kernels.use_numba(flag)
            out.append(fn(*args))
        kernels.use_numba(original)
        return out

    yield run
    kernels.use_numba(original)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_source_sum_agrees(seed):
    rng = np.random.default_rng(seed)
    n_orders, n_terms = rng.integers(1, 6), rng.integers(0, 12)
    u = rng.uniform(-1.5, 1.5, size=(n_orders, 50))
    coeffs = rng.normal(size=n_terms)
    exps = rng.integers(0, 4, size=(n_terms, n_orders))
    original = kernels.backend() == "numba"
    try:
        kernels.use_numba(False)
        a = kernels.source_sum(u, coeffs, exps)
        kernels.use_numba(True)
        b = kernels.source_sum(u, coeffs, exps)
    finally:
        kernels.use_numba(original)
    direct = sum(c * np.prod(u ** e[:, None], axis=0) for c, e in zip(coeffs, exps)) if n_terms else 0 * u[0]
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    assert np.allclose(a, direct, rtol=1e-12, atol=1e-12)


def test_horner_agrees(both):
    rng = np.random.default_rng(0)
    c, u = rng.normal(size=6), rng.uniform(-2, 2, size=(7, 9))
    a, b = both(kernels.horner, c, u)
    assert a.shape == u.shape
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)
    assert np.allclose(a, np.polynomial.polynomial.polyval(u, c), rtol=1e-12)


def test_laplacian_rhs_agrees(both):
    rng = np.random.default_rng(1)
    u = rng.normal(size=40)
    f = rng.normal(size=40)
    pc = np.array([0.0, 1.0, -1.0])
    a, b = both(kernels.laplacian_rhs, u, 0.3, -0.2, 0.05, 0.1, 0.2, -0.1, 0.5, pc, f)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)


def test_laplacian_rhs_quadratic_exact(both):
    # u = x^2 has u_x = 2x and u_xx = 2 exactly under central differences
    x = np.linspace(0, 1, 21)
    h = x[1] - x[0]
    for r in both(kernels.laplacian_rhs, x[1:-1] ** 2, 0.0, 1.0, h, 0.0, 1.0, 1.0, 0.0, np.zeros(1),
                  np.zeros(19)):
        assert np.allclose(r, -(2 * x[1:-1] + 2), atol=1e-10)


def test_switch_reported():
    original = kernels.backend()
    kernels.use_numba(False)
    assert kernels.backend() == "numpy"
    kernels.use_numba(True)
    assert kernels.backend() == "numba"
    kernels.use_numba(original == "numba")


@pytest.mark.parametrize("value,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag(value, expected):
    import os
    import subprocess
    import sys
    env = {**os.environ, "PERTPINN_NUMBA": value}
    out = subprocess.run([sys.executable, "-c", "from pertpinn import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
