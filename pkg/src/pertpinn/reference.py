"""Method-of-lines reference solutions for the full nonlinear problem.

Space is discretised with second-order central differences on a uniform
grid with Dirichlet values pinned at both ends; time is integrated with the
embedded Dormand-Prince 5(4) pair under a PI step-size controller. Output is
sampled onto a :class:`~pertpinn.grid.Grid` at accepted steps that are cut
to land on the output times (linear interpolation in space when the node
sets differ).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .grid import Grid, GridField
from .problem import PdeProblem

__all__ = [
    "MolConfig",
    "ErrorReport",
    "StiffnessError",
    "dopri5",
    "solve_parabolic_mol",
    "solve_hyperbolic_fd",
    "solve_reference",
    "relative_error",
]


class StiffnessError(RuntimeError):
    """Step size underflow in the explicit integrator."""


@dataclass(frozen=True)
class MolConfig:
    n_x: int = 201
    rtol: float = 1e-8
    atol: float = 1e-8
    grid: Grid | None = None
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.n_x < 16:
            raise ValueError("n_x must be at least 16")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class ErrorReport:
    relative_l2: float
    max_abs: float
    grid: Grid

    def to_dict(self) -> dict:
        return {"relative_l2": self.relative_l2, "max_abs": self.max_abs,
                "grid": [self.grid.n_x, self.grid.n_t]}


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _initial_step(rhs, t0, y0, f0, t_end, rtol, atol) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_end - t0)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end - t0)


def dopri5(rhs: Callable[[float, np.ndarray], np.ndarray], y0: np.ndarray, t_end: float,
           out_times: np.ndarray, rtol: float = 1e-8, atol: float = 1e-8, max_steps: int = 2_000_000,
           on_step: Callable[[float, np.ndarray], None] | None = None, land_on_output: bool = True):
    """Integrate ``y' = rhs(t, y)`` from 0 to ``t_end``.

    Returns states at ``out_times`` with shape ``(len(out_times), len(y0))``
    and a stats dict. Steps are shortened to land on each output time; with
    ``land_on_output=False`` outputs are linearly interpolated between
    accepted steps instead.
    """
    beta = 0.04
    expo = 0.2 - 0.75 * beta
    safe, fac_min, fac_max = 0.9, 0.2, 10.0
    t, y = 0.0, np.array(y0, dtype=float)
    out_times = np.asarray(out_times, dtype=float)
    out = np.empty((out_times.size, y.size))
    k_out = 0
    while k_out < out_times.size and out_times[k_out] <= 0.0:
        out[k_out] = y
        k_out += 1

    k = np.empty((7, y.size))
    k[0] = rhs(t, y)
    h = _initial_step(rhs, t, y, k[0], t_end, rtol, atol)
    err_old = 1e-4
    n_acc = n_rej = 0
    while t < t_end:
        if n_acc + n_rej >= max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t:.6g}")
        if h < 1e-14 * max(1.0, abs(t)):
            raise StiffnessError(f"step size underflow (h={h:.3e}) at t={t:.6g}; problem may be stiff")
        h = min(h, t_end - t)
        if land_on_output and k_out < out_times.size and t + h > out_times[k_out]:
            h = out_times[k_out] - t
        for s in range(1, 7):
            ys = y + h * (np.asarray(_A[s]) @ k[:s])
            k[s] = rhs(t + _C[s] * h, ys)
        y_new = ys  # stage 7 is evaluated at the 5th-order solution (FSAL)
        err_vec = h * (_E @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
        if not math.isfinite(err):
            h *= 0.1
            n_rej += 1
            continue
        if err <= 1.0:
            t_new = t + h
            while k_out < out_times.size and out_times[k_out] <= t_new + 1e-12 * t_end:
                theta = min(1.0, (out_times[k_out] - t) / h)
                out[k_out] = (1.0 - theta) * y + theta * y_new
                k_out += 1
            t, y = t_new, y_new
            k[0] = k[6]
            fac = err**expo / err_old**beta if err > 0 else 1.0 / fac_max
            h = h / min(1.0 / fac_min, max(1.0 / fac_max, fac / safe))
            err_old = max(err, 1e-4)
            n_acc += 1
            if on_step is not None:
                on_step(t, y)
        else:
            h = h / min(1.0 / fac_min, err**expo / safe)
            n_rej += 1
    while k_out < out_times.size:
        out[k_out] = y
        k_out += 1
    return out, {"accepted": n_acc, "rejected": n_rej}


def _dirichlet_data(problem: PdeProblem):
    left = problem.boundary_conditions("left")
    right = problem.boundary_conditions("right")
    if len(left) != 1 or len(right) != 1 or left[0].derivative_order or right[0].derivative_order:
        raise ValueError("reference solvers support Dirichlet data on both boundaries only")
    return left[0].target, right[0].target


def _setup(problem: PdeProblem, cfg: MolConfig):
    d = problem.domain
    x = np.linspace(d.x_min, d.x_max, cfg.n_x)
    h = x[1] - x[0]
    op = problem.operator
    grid = cfg.grid or Grid(101, 101, d)
    if grid.domain != d:
        raise ValueError("output grid domain differs from the problem domain")
    bl, br = _dirichlet_data(problem)
    forcing = problem.forcing
    x_int = x[1:-1]
    if forcing.is_zero:
        zero = np.zeros(x_int.size)
        f_at = lambda t: zero  # noqa: E731
    elif "t" not in forcing.names:
        fixed = forcing(x_int, 0.0)
        f_at = lambda t: fixed  # noqa: E731
    else:
        f_at = lambda t: forcing(x_int, t)  # noqa: E731
    return x, h, op, grid, bl, br, f_at


def _warn_corners(problem: PdeProblem, x: np.ndarray, bl, br) -> None:
    ic = problem.initial_conditions()[0].target
    for xb, b, side in ((x[0], bl, "left"), (x[-1], br, "right")):
        gap = abs(float(ic(xb, 0.0)) - float(b(xb, 0.0)))
        if gap > 1e-6:
            warnings.warn(f"initial and {side} boundary data disagree at t=0 by {gap:.3g}", stacklevel=3)


def _to_grid(states: np.ndarray, x: np.ndarray, bl, br, grid: Grid) -> np.ndarray:
    """States on interior nodes at grid times -> values on the output grid."""
    t_out = grid.t
    full = np.empty((t_out.size, x.size))
    full[:, 1:-1] = states
    full[:, 0] = bl(x[0], t_out)
    full[:, -1] = br(x[-1], t_out)
    xo = grid.x
    if xo.size == x.size and np.allclose(xo, x, rtol=0, atol=1e-13):
        return full.T.copy()
    return np.stack([np.interp(xo, x, row) for row in full], axis=1)


def solve_parabolic_mol(problem: PdeProblem, cfg: MolConfig | None = None, info: dict | None = None) -> GridField:
    """Reference for operators first order in time (heat family)."""
    cfg = cfg or MolConfig()
    op = problem.operator
    if op.time_order != 1 or op.coefficient(0, 2) != 0.0:
        raise ValueError("solve_parabolic_mol needs an operator of first order in time")
    x, h, op, grid, bl, br, f_at = _setup(problem, cfg)
    a_t = op.coefficient(0, 1)
    a0, a1, a2 = op.coefficient(0, 0), op.coefficient(1, 0), op.coefficient(2, 0)
    pc = np.asarray(problem.perturbation.coefficients, dtype=float)
    eps = problem.epsilon
    _warn_corners(problem, x, bl, br)
    (ic,) = [c.target for c in problem.initial_conditions()]
    x_min, x_max = x[0], x[-1]

    def rhs(t, u):
        r = kernels.laplacian_rhs(u, float(bl(x_min, t)), float(br(x_max, t)), h, a0, a1, a2, eps, pc, f_at(t))
        return r / a_t

    t0 = time.perf_counter()
    states, stats = dopri5(rhs, ic(x[1:-1], 0.0), problem.domain.t_max, grid.t, cfg.rtol, cfg.atol, cfg.max_steps)
    if info is not None:
        info.update(stats, seconds=time.perf_counter() - t0, n_x=cfg.n_x)
    return GridField(_to_grid(states, x, bl, br, grid), grid)


def solve_hyperbolic_fd(problem: PdeProblem, cfg: MolConfig | None = None, info: dict | None = None) -> GridField:
    """Reference for operators second order in time, as a first-order system in ``(u, u_t)``.

    ``info`` (if given) receives integrator statistics and the discrete energy
    ``sum (u_t^2 + |a2| u_x^2) / 2 * h`` at every accepted step.
    """
    cfg = cfg or MolConfig()
    op = problem.operator
    if op.time_order != 2:
        raise ValueError("solve_hyperbolic_fd needs an operator of second order in time")
    x, h, op, grid, bl, br, f_at = _setup(problem, cfg)
    a_tt, a_t = op.coefficient(0, 2), op.coefficient(0, 1)
    a0, a1, a2 = op.coefficient(0, 0), op.coefficient(1, 0), op.coefficient(2, 0)
    pc = np.asarray(problem.perturbation.coefficients, dtype=float)
    eps = problem.epsilon
    ics = {c.derivative_order: c.target for c in problem.initial_conditions()}
    if set(ics) != {0, 1}:
        raise ValueError("second-order-in-time problems need u(x,0) and u_t(x,0)")
    if cfg.grid is not None and (cfg.grid.domain.t_max / (cfg.grid.n_t - 1)) > problem.domain.length / (
            2.0 * math.sqrt(abs(a2 / a_tt)) + 1e-300):
        warnings.warn("output time grid is coarser than the wave crossing scale", stacklevel=2)
    _warn_corners(problem, x, bl, br)
    n = x.size - 2
    x_min, x_max = x[0], x[-1]

    def rhs(t, y):
        u, v = y[:n], y[n:]
        r = kernels.laplacian_rhs(u, float(bl(x_min, t)), float(br(x_max, t)), h, a0, a1, a2, eps, pc, f_at(t))
        return np.concatenate((v, (r - a_t * v) / a_tt))

    energy: list[tuple[float, float]] = []
    c2 = abs(a2 / a_tt)

    def record(t, y):
        u = np.concatenate(([bl(x_min, t)], y[:n], [br(x_max, t)]))
        ux = np.diff(u) / h
        energy.append((t, 0.5 * h * (float(y[n:] @ y[n:]) + c2 * float(ux @ ux))))

    y0 = np.concatenate((ics[0](x[1:-1], 0.0), ics[1](x[1:-1], 0.0)))
    record(0.0, y0)
    t0 = time.perf_counter()
    states, stats = dopri5(rhs, y0, problem.domain.t_max, grid.t, cfg.rtol, cfg.atol, cfg.max_steps, on_step=record)
    if info is not None:
        info.update(stats, seconds=time.perf_counter() - t0, n_x=cfg.n_x, energy=np.array(energy))
    return GridField(_to_grid(states[:, :n], x, bl, br, grid), grid)


def solve_reference(problem: PdeProblem, cfg: MolConfig | None = None, info: dict | None = None) -> GridField:
    """Dispatch on the time order of the operator."""
    if problem.operator.time_order == 2:
        return solve_hyperbolic_fd(problem, cfg, info)
    return solve_parabolic_mol(problem, cfg, info)


def relative_error(candidate: GridField, reference: GridField) -> ErrorReport:
    reference.check_compatible(candidate)
    diff = candidate.values - reference.values
    norm = float(np.linalg.norm(reference.values))
    if norm == 0.0:
        raise ValueError("reference field has zero norm; relative error undefined")
    return ErrorReport(float(np.linalg.norm(diff)) / norm, float(np.abs(diff).max()), reference.grid)
