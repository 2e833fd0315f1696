"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``PERTPINN_NUMBA`` is not set
to ``0``/``false``/``off``. Both paths compute the same quantities; results
agree to rounding (the test suite checks this). Use :func:`backend` to see
which one is active and :func:`use_numba` to switch at runtime.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

__all__ = [
    "backend",
    "use_numba",
    "source_sum",
    "horner",
    "laplacian_rhs",
    "NUMBA_AVAILABLE",
]

NUMBA_AVAILABLE = numba is not None
_ENABLED = NUMBA_AVAILABLE and os.environ.get("PERTPINN_NUMBA", "1").lower() not in ("0", "false", "off", "no")


def backend() -> str:
    return "numba" if _ENABLED else "numpy"


def use_numba(flag: bool) -> None:
    """Select the kernel backend; raises if numba is requested but missing."""
    global _ENABLED
    if flag and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _ENABLED = bool(flag)


def _njit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, fastmath=False)(func)


# ---------------------------------------------------------------------------
# sum_terms coeff * prod_i u_i ** k_i   (cascade source terms)


def _source_sum_numpy(u, coeffs, exps):
    n_orders, n = u.shape
    out = np.zeros(n)
    if coeffs.size == 0:
        return out
    max_k = int(exps.max()) if exps.size else 0
    # powers[i, k] = u_i ** k, built by repeated multiplication
    powers = np.ones((n_orders, max_k + 1, n))
    for k in range(1, max_k + 1):
        powers[:, k] = powers[:, k - 1] * u
    for c, ks in zip(coeffs, exps):
        term = np.full(n, c)
        for i in np.flatnonzero(ks):
            term = term * powers[i, ks[i]]
        out += term
    return out


@_njit
def _source_sum_numba(u, coeffs, exps):
    n_orders, n = u.shape
    n_terms = coeffs.shape[0]
    out = np.zeros(n)
    max_k = 0
    for a in range(n_terms):
        for i in range(n_orders):
            if exps[a, i] > max_k:
                max_k = exps[a, i]
    powers = np.ones((n_orders, max_k + 1))
    for p in range(n):
        for i in range(n_orders):
            for k in range(1, max_k + 1):
                powers[i, k] = powers[i, k - 1] * u[i, p]
        acc = 0.0
        for a in range(n_terms):
            term = coeffs[a]
            for i in range(n_orders):
                k = exps[a, i]
                if k:
                    term = term * powers[i, k]
            acc += term
        out[p] = acc
    return out


def source_sum(u: np.ndarray, coeffs: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_a coeffs[a] * prod_i u[i] ** exps[a, i]`` pointwise.

    ``u`` has shape ``(n_orders, n_points)``; ``exps`` is an integer array of
    shape ``(n_terms, n_orders)``. Terms are accumulated in their given order.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    exps = np.ascontiguousarray(exps, dtype=np.int64).reshape(coeffs.shape[0], u.shape[0])
    if _ENABLED:
        return _source_sum_numba(u, coeffs, exps)
    return _source_sum_numpy(u, coeffs, exps)


# ---------------------------------------------------------------------------
# Horner evaluation on arrays


def _horner_numpy(coeffs, u):
    acc = np.zeros_like(u)
    for c in coeffs[::-1]:
        acc = acc * u + c
    return acc


@_njit
def _horner_numba(coeffs, u):
    out = np.empty_like(u)
    m = coeffs.shape[0]
    for p in range(u.shape[0]):
        acc = 0.0
        for l in range(m - 1, -1, -1):
            acc = acc * u[p] + coeffs[l]
        out[p] = acc
    return out


def horner(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    flat = np.ascontiguousarray(u.ravel())
    out = _horner_numba(coeffs, flat) if _ENABLED else _horner_numpy(coeffs, flat)
    return out.reshape(u.shape)


# ---------------------------------------------------------------------------
# Semi-discrete spatial operator for the method of lines:
#   r = f - a0 u - a1 u_x - a2 u_xx - eps P(u)      on interior nodes,
# with second-order central differences and pinned boundary values.


def _laplacian_rhs_numpy(u_int, left, right, h, a0, a1, a2, eps, pcoeffs, forcing):
    u = np.concatenate(([left], u_int, [right]))
    ux = (u[2:] - u[:-2]) / (2.0 * h)
    uxx = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (h * h)
    return forcing - a0 * u_int - a1 * ux - a2 * uxx - eps * _horner_numpy(pcoeffs, u_int)


@_njit
def _laplacian_rhs_numba(u_int, left, right, h, a0, a1, a2, eps, pcoeffs, forcing):
    n = u_int.shape[0]
    out = np.empty(n)
    m = pcoeffs.shape[0]
    inv2h = 1.0 / (2.0 * h)
    invh2 = 1.0 / (h * h)
    for i in range(n):
        um = left if i == 0 else u_int[i - 1]
        up = right if i == n - 1 else u_int[i + 1]
        ui = u_int[i]
        ux = (up - um) * inv2h
        uxx = (up - 2.0 * ui + um) * invh2
        acc = 0.0
        for l in range(m - 1, -1, -1):
            acc = acc * ui + pcoeffs[l]
        out[i] = forcing[i] - a0 * ui - a1 * ux - a2 * uxx - eps * acc
    return out


def laplacian_rhs(u_int, left, right, h, a0, a1, a2, eps, pcoeffs, forcing):
    """Residual of the non-time part of the operator on interior nodes.

    Returns ``f - a0 u - a1 u_x - a2 u_xx - eps P(u)``; the caller divides by
    the leading time coefficient.
    """
    if _ENABLED:
        return _laplacian_rhs_numba(u_int, float(left), float(right), float(h), float(a0),
                                    float(a1), float(a2), float(eps), pcoeffs, forcing)
    return _laplacian_rhs_numpy(u_int, left, right, h, a0, a1, a2, eps, pcoeffs, forcing)
