"""Closed-form head adaptation on a frozen latent basis.

With the body fixed, a head ``W`` for new data ``(f, g, B)`` minimises the
convex quadratic

    w_pde |D_H W - f|^2 + w_ic |H_0 W - g|^2 + w_bc sum_side |H_side W - B_side|^2

whose normal matrix ``M`` depends only on the operator and the sample
points. ``M`` is Cholesky-factorised once per :class:`LatentSystem` and then
reused for every right-hand side, including every order of the perturbative
cascade.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as la

from .cascade import PerturbationPlan, assemble_solution, evaluate_source_values
from .grid import Grid, GridField
from .network import BodyParams, Jet, MultiHeadCheckpoint, apply_operator, forward_jet
from .problem import LinearOperator, PdeProblem
from .training import LossWeights, sample_collocation

log = logging.getLogger(__name__)

__all__ = [
    "Registry",
    "LatentSystem",
    "TaskData",
    "CascadeResult",
    "default_registry",
    "assemble_latent_system",
    "task_from_problem",
    "zero_task",
    "solve_head",
    "transfer_loss",
    "solve_cascade",
    "transfer_timing",
    "factorization_count",
    "latent_system_from_blocks",
    "mean_weights",
    "BlockWeights",
    "cached_latent_system",
]

_TIME_COMPONENT = {0: "v", 1: "dt", 2: "dtt"}
_SIDE_COMPONENT = {0: "v", 1: "dx", 2: "dxx"}

_FACTORIZATIONS = 0


def factorization_count() -> int:
    """Number of normal-matrix factorisations performed in this process."""
    return _FACTORIZATIONS


@dataclass(frozen=True, eq=False)
class Registry:
    """Fixed transfer sample points and the condition layout they serve."""

    x_int: np.ndarray
    t_int: np.ndarray
    x_init: np.ndarray
    t_bc: np.ndarray
    layout: tuple[tuple[str, int], ...]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.x_int, self.t_int, self.x_init, self.t_bc):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(json.dumps(self.layout).encode())
        return h.hexdigest()[:16]


def _layout(problem: PdeProblem) -> tuple[tuple[str, int], ...]:
    out = []
    for kind in ("initial", "boundary_left", "boundary_right"):
        for c in sorted((c for c in problem.conditions if c.kind == kind), key=lambda c: c.derivative_order):
            out.append((kind, c.derivative_order))
    return tuple(out)


def default_registry(problem: PdeProblem, sizes: Sequence[int] = (1024, 128, 128)) -> Registry:
    """Unjittered cell-centred points: ``(interior, initial, per-boundary)``."""
    b = sample_collocation(problem.domain, sizes, noise=0.0)
    return Registry(b.x_int, b.t_int, b.x_init, b.t_left, _layout(problem))


@dataclass(frozen=True, eq=False)
class LatentSystem:
    D_H: np.ndarray
    H_int: np.ndarray
    H_init: tuple[np.ndarray, ...]  # one block per initial condition, layout order
    H_left: tuple[np.ndarray, ...]
    H_right: tuple[np.ndarray, ...]
    M: np.ndarray
    factor: tuple[np.ndarray, bool]  # scipy cho_factor output
    weights: LossWeights
    ridge: float
    registry: Registry
    operator: LinearOperator
    domain_key: tuple
    body: BodyParams | None = None
    grid: Grid | None = None
    H_grid: np.ndarray | None = None
    assembly_seconds: float = 0.0
    key: str = ""

    @property
    def latent_dim(self) -> int:
        return self.M.shape[0]

    def block_gram(self) -> np.ndarray:
        """``M`` recomputed from the stored blocks (without the ridge)."""
        return _gram(self.D_H, self.H_init, self.H_left, self.H_right, self.weights)

    def render(self, W: np.ndarray, grid: Grid) -> np.ndarray:
        """Values ``H W`` on ``grid``; columns of ``W`` give separate fields."""
        W = np.asarray(W, dtype=float)
        if self.grid == grid and self.H_grid is not None:
            H = self.H_grid
        else:
            if self.body is None:
                raise ValueError("system has no body and no cached rendering for this grid")
            X, T = grid.points()
            H = forward_jet(self.body, X, T).v
        W = W.reshape(self.latent_dim, -1)
        # one product per column keeps each field independent of how many are rendered
        vals = np.stack([H @ W[:, j] for j in range(W.shape[1])], axis=-1)
        return vals.reshape(grid.n_x, grid.n_t, -1)


@dataclass(frozen=True, eq=False)
class TaskData:
    f: np.ndarray
    g: tuple[np.ndarray, ...]
    b_left: tuple[np.ndarray, ...]
    b_right: tuple[np.ndarray, ...]

    def __add__(self, other: "TaskData") -> "TaskData":
        return TaskData(self.f + other.f, _tadd(self.g, other.g), _tadd(self.b_left, other.b_left),
                        _tadd(self.b_right, other.b_right))

    def scale(self, a: float) -> "TaskData":
        return TaskData(a * self.f, tuple(a * v for v in self.g), tuple(a * v for v in self.b_left),
                        tuple(a * v for v in self.b_right))


def _tadd(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _jet_rows(body: BodyParams, x, t) -> Jet:
    return forward_jet(body, x, t)


class BlockWeights(tuple):
    """``(pde, ic, bc)`` multipliers of the transfer quadratic; zeros allowed."""

    def __new__(cls, pde: float, ic: float, bc: float):
        vals = tuple(float(v) for v in (pde, ic, bc))
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError("weights must be nonnegative and not all zero")
        return super().__new__(cls, vals)

    pde = property(lambda self: self[0])
    ic = property(lambda self: self[1])
    bc = property(lambda self: self[2])


def mean_weights(registry: Registry, base: LossWeights | None = None) -> LossWeights:
    """Weights that turn the summed quadratic into the mean-square training loss.

    Each block is scaled by the inverse of its point count relative to the
    interior block, so ``n_int * quadratic`` equals the per-head loss with
    mean reductions.
    """
    base = base or LossWeights()
    n_int = registry.x_int.size
    return LossWeights(base.pde, base.ic * n_int / registry.x_init.size, base.bc * n_int / registry.t_bc.size)


def _gram(D_H, H_init, H_left, H_right, w) -> np.ndarray:
    M = w.pde * D_H.T @ D_H
    for B in H_init:
        M += w.ic * B.T @ B
    for B in tuple(H_left) + tuple(H_right):
        M += w.bc * B.T @ B
    return 0.5 * (M + M.T)


def latent_system_from_blocks(D_H: np.ndarray, H_init: Sequence[np.ndarray], H_left: Sequence[np.ndarray] = (),
                              H_right: Sequence[np.ndarray] = (), weights=(1.0, 1.0, 1.0),
                              ridge: float | None = None, operator: LinearOperator | None = None) -> LatentSystem:
    """Build a system from explicit feature blocks (no network involved).

    ``weights`` may be a :class:`LossWeights` or a plain ``(pde, ic, bc)``
    tuple in which zeros are allowed.
    """
    t0 = time.perf_counter()
    if not isinstance(weights, LossWeights):
        weights = BlockWeights(*weights)
    D_H = np.atleast_2d(np.asarray(D_H, dtype=float))
    H_init = tuple(np.atleast_2d(np.asarray(B, dtype=float)) for B in H_init)
    H_left = tuple(np.atleast_2d(np.asarray(B, dtype=float)) for B in H_left)
    H_right = tuple(np.atleast_2d(np.asarray(B, dtype=float)) for B in H_right)
    n_h = D_H.shape[1]
    if any(B.shape[1] != n_h for B in H_init + H_left + H_right):
        raise ValueError("all blocks need the same number of latent columns")
    M = _gram(D_H, H_init, H_left, H_right, weights)
    if ridge is None:
        ridge = 1e-10 * np.trace(M) / n_h
    factor, ridge = _factorize(M, ridge)
    n_bc = H_left[0].shape[0] if H_left else (H_right[0].shape[0] if H_right else 0)
    layout = (tuple(("initial", i) for i in range(len(H_init))) + (("boundary_left", 0),) * len(H_left)
              + (("boundary_right", 0),) * len(H_right))
    reg = Registry(np.zeros(D_H.shape[0]), np.zeros(D_H.shape[0]),
                   np.zeros(H_init[0].shape[0] if H_init else 0), np.zeros(n_bc), layout)
    return LatentSystem(D_H=D_H, H_int=np.zeros_like(D_H), H_init=H_init, H_left=H_left, H_right=H_right,
                        M=M, factor=factor, weights=weights, ridge=float(ridge), registry=reg,
                        operator=operator, domain_key=(), assembly_seconds=time.perf_counter() - t0)


def _factorize(M: np.ndarray, ridge: float):
    global _FACTORIZATIONS
    n = M.shape[0]
    for attempt in range(4):
        try:
            _FACTORIZATIONS += 1
            factor = la.cho_factor(M + ridge * np.eye(n), lower=False, check_finite=True)
            return factor, ridge
        except la.LinAlgError:
            log.warning("Cholesky failed with ridge %.3e; retrying with 10x", ridge)
            ridge = ridge * 10.0 if ridge > 0 else 1e-12 * max(np.trace(M) / n, 1.0)
    cond = np.linalg.cond(M + ridge * np.eye(n))
    raise np.linalg.LinAlgError(f"normal matrix not positive definite after retries (cond ~ {cond:.3e})")


def assemble_latent_system(checkpoint: MultiHeadCheckpoint | BodyParams, problem: PdeProblem,
                           registry: Registry | None = None, weights: LossWeights | None = None,
                           ridge: float | None = None, grid: Grid | None = None) -> LatentSystem:
    """Evaluate the frozen body on the registry, build and factorise ``M``.

    ``ridge=None`` adds ``1e-10 * trace(M) / N_H`` to the diagonal.
    """
    t0 = time.perf_counter()
    body = checkpoint.body if isinstance(checkpoint, MultiHeadCheckpoint) else checkpoint
    if registry is None:
        registry = default_registry(problem)
    if weights is None:
        weights = mean_weights(registry)
    op = problem.operator
    d = problem.domain
    if registry.x_int.size == 0 or registry.x_init.size == 0 or registry.t_bc.size == 0:
        raise ValueError("registry point sets must be non-empty")

    J_int = _jet_rows(body, registry.x_int, registry.t_int)
    D_H = apply_operator(op, J_int)
    J_init = _jet_rows(body, registry.x_init, np.zeros_like(registry.x_init))
    J_left = _jet_rows(body, np.full_like(registry.t_bc, d.x_min), registry.t_bc)
    J_right = _jet_rows(body, np.full_like(registry.t_bc, d.x_max), registry.t_bc)
    H_init, H_left, H_right = [], [], []
    for kind, order in registry.layout:
        if kind == "initial":
            H_init.append(J_init.component(_TIME_COMPONENT[order]).copy())
        elif kind == "boundary_left":
            H_left.append(J_left.component(_SIDE_COMPONENT[order]).copy())
        else:
            H_right.append(J_right.component(_SIDE_COMPONENT[order]).copy())

    M = _gram(D_H, H_init, H_left, H_right, weights)
    n_h = M.shape[0]
    if ridge is None:
        ridge = 1e-10 * np.trace(M) / n_h
    factor, ridge = _factorize(M, ridge)

    H_grid = None
    if grid is not None:
        X, T = grid.points()
        H_grid = forward_jet(body, X, T).v
    return LatentSystem(
        D_H=D_H, H_int=J_int.v.copy(), H_init=tuple(H_init), H_left=tuple(H_left), H_right=tuple(H_right),
        M=M, factor=factor, weights=weights, ridge=float(ridge), registry=registry, operator=op,
        domain_key=(d.x_min, d.x_max, d.t_max), body=body, grid=grid, H_grid=H_grid,
        assembly_seconds=time.perf_counter() - t0,
    )


def task_from_problem(system: LatentSystem, problem: PdeProblem) -> TaskData:
    """Forcing and condition data of ``problem`` sampled on the registry."""
    reg = system.registry
    if _layout(problem) != reg.layout:
        raise ValueError(f"problem condition layout {_layout(problem)} != system layout {reg.layout}")
    d = problem.domain
    f = problem.forcing(reg.x_int, reg.t_int)
    g, bl, br = [], [], []
    for c in sorted(problem.conditions, key=lambda c: (c.kind, c.derivative_order)):
        if c.kind == "initial":
            g.append(c.target(reg.x_init, 0.0))
        elif c.kind == "boundary_left":
            bl.append(c.target(d.x_min, reg.t_bc))
        else:
            br.append(c.target(d.x_max, reg.t_bc))
    return TaskData(f, tuple(g), tuple(bl), tuple(br))


def zero_task(system: LatentSystem, f: np.ndarray | None = None) -> TaskData:
    """Homogeneous conditions with optional interior forcing ``f``."""
    reg = system.registry
    f = np.zeros(reg.x_int.size) if f is None else np.asarray(f, dtype=float)
    zi = tuple(np.zeros(reg.x_init.size) for _ in system.H_init)
    zl = tuple(np.zeros(reg.t_bc.size) for _ in system.H_left)
    zr = tuple(np.zeros(reg.t_bc.size) for _ in system.H_right)
    return TaskData(f, zi, zl, zr)


def _check_task(system: LatentSystem, task: TaskData) -> None:
    if task.f.shape != (system.D_H.shape[0],):
        raise ValueError(f"forcing length {task.f.shape} != {system.D_H.shape[0]} interior points")
    for name, blocks, data in (("initial", system.H_init, task.g), ("left", system.H_left, task.b_left),
                               ("right", system.H_right, task.b_right)):
        if len(blocks) != len(data) or any(B.shape[0] != v.shape[0] for B, v in zip(blocks, data)):
            raise ValueError(f"{name} data do not match the registry")


def normal_rhs(system: LatentSystem, task: TaskData) -> np.ndarray:
    w = system.weights
    rhs = w.pde * system.D_H.T @ task.f
    for B, v in zip(system.H_init, task.g):
        rhs += w.ic * B.T @ v
    for B, v in zip(system.H_left + system.H_right, task.b_left + task.b_right):
        rhs += w.bc * B.T @ v
    return rhs


def solve_head(system: LatentSystem, task: TaskData) -> np.ndarray:
    """``W* = M^{-1} rhs`` with the stored factorisation."""
    _check_task(system, task)
    return la.cho_solve(system.factor, normal_rhs(system, task), check_finite=False)


def transfer_loss(system: LatentSystem, task: TaskData, W: np.ndarray, include_ridge: bool = True) -> float:
    """The quadratic minimised by :func:`solve_head` (ridge term optional)."""
    w = system.weights
    r = system.D_H @ W - task.f
    total = w.pde * float(r @ r)
    for B, v in zip(system.H_init, task.g):
        r = B @ W - v
        total += w.ic * float(r @ r)
    for B, v in zip(system.H_left + system.H_right, task.b_left + task.b_right):
        r = B @ W - v
        total += w.bc * float(r @ r)
    if include_ridge:
        total += system.ridge * float(W @ W)
    return total


@dataclass
class CascadeResult:
    orders: list[GridField]
    solution: GridField
    heads: np.ndarray  # (N_H, p + 1)
    epsilon: float

    @property
    def p(self) -> int:
        return len(self.orders) - 1


def _solve_orders(system: LatentSystem, problem: PdeProblem, plan: PerturbationPlan) -> np.ndarray:
    heads = np.empty((system.latent_dim, plan.p + 1))
    heads[:, 0] = solve_head(system, task_from_problem(system, problem))
    u_int = [system.H_int @ heads[:, 0]]
    for j in range(1, plan.p + 1):
        f_j = evaluate_source_values(plan, j, u_int)
        heads[:, j] = solve_head(system, zero_task(system, f_j))
        u_int.append(system.H_int @ heads[:, j])
    return heads


def solve_cascade(system: LatentSystem, problem: PdeProblem, plan: PerturbationPlan,
                  grid: Grid | None = None) -> CascadeResult:
    """Solve ``D u_0 = f`` and ``D u_j = f_j`` in turn, then sum the series.

    ``u_0`` carries the problem's initial and boundary data, every ``u_j`` with
    ``j >= 1`` homogeneous data. Sources are evaluated on the registry from
    the earlier heads, never on the output grid.
    """
    if tuple(problem.perturbation.coefficients) != tuple(plan.poly.coefficients):
        raise ValueError("plan was built for a different polynomial")
    if problem.operator != system.operator:
        raise ValueError("system was assembled for a different operator")
    grid = grid or system.grid
    if grid is None:
        raise ValueError("no output grid given")
    heads = _solve_orders(system, problem, plan)
    values = system.render(heads, grid)
    orders = [GridField(values[:, :, i], grid) for i in range(plan.p + 1)]
    return CascadeResult(orders, assemble_solution(problem.epsilon, orders), heads, problem.epsilon)


def transfer_timing(system: LatentSystem, problem: PdeProblem, plan: PerturbationPlan,
                    grid: Grid | None = None, repeats: int = 5) -> dict:
    """Wall-clock of the per-task adaptation only (sources, solves, rendering, sum).

    Reports the median over ``repeats`` runs on a monotonic clock.
    """
    grid = grid or system.grid
    before = factorization_count()
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        solve_cascade(system, problem, plan, grid)
        times.append(time.perf_counter() - t0)
    return {
        "adapt_seconds": float(np.median(times)),
        "adapt_runs": times,
        "assembly_seconds": system.assembly_seconds,
        "refactorizations": factorization_count() - before,
        "p": plan.p,
        "latent_dim": system.latent_dim,
        "grid": [grid.n_x, grid.n_t],
    }


# ---------------------------------------------------------------------------
# Disk cache


def cache_dir() -> Path:
    return Path(os.environ.get("PERTPINN_CACHE_DIR", Path.home() / ".cache" / "pertpinn"))


def system_key(ckpt: MultiHeadCheckpoint, problem: PdeProblem, registry: Registry, weights: LossWeights,
               ridge: float | None, grid: Grid | None) -> str:
    payload = json.dumps({
        "ckpt": ckpt.digest(),
        "operator": problem.operator.to_dict(),
        "domain": problem.domain.to_dict(),
        "registry": registry.digest(),
        "weights": [weights.pde, weights.ic, weights.bc],
        "ridge": ridge,
        "grid": None if grid is None else [grid.n_x, grid.n_t],
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _save_system(system: LatentSystem, path: Path) -> None:
    arrays = {
        "D_H": system.D_H, "H_int": system.H_int, "M": system.M,
        "factor": system.factor[0], "lower": np.array(system.factor[1]),
        "ridge": np.array(system.ridge),
        "x_int": system.registry.x_int, "t_int": system.registry.t_int,
        "x_init": system.registry.x_init, "t_bc": system.registry.t_bc,
    }
    for name, blocks in (("init", system.H_init), ("left", system.H_left), ("right", system.H_right)):
        for i, B in enumerate(blocks):
            arrays[f"H_{name}_{i}"] = B
    if system.H_grid is not None:
        arrays["H_grid"] = system.H_grid
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_system(path: Path, problem: PdeProblem, registry: Registry, weights: LossWeights,
                 body: BodyParams, grid: Grid | None) -> LatentSystem:
    t0 = time.perf_counter()
    with np.load(path) as z:
        def blocks(name):
            return tuple(z[k] for k in sorted(z.files) if k.startswith(f"H_{name}_"))

        return LatentSystem(
            D_H=z["D_H"], H_int=z["H_int"], H_init=blocks("init"), H_left=blocks("left"),
            H_right=blocks("right"), M=z["M"], factor=(z["factor"], bool(z["lower"])), weights=weights,
            ridge=float(z["ridge"]), registry=registry, operator=problem.operator,
            domain_key=(problem.domain.x_min, problem.domain.x_max, problem.domain.t_max), body=body,
            grid=grid, H_grid=z["H_grid"] if "H_grid" in z.files else None,
            assembly_seconds=time.perf_counter() - t0, key=path.stem,
        )


def cached_latent_system(ckpt: MultiHeadCheckpoint, problem: PdeProblem, registry: Registry | None = None,
                         weights: LossWeights | None = None, ridge: float | None = None,
                         grid: Grid | None = None, directory: str | Path | None = None):
    """Assemble, or load from the disk cache; returns ``(system, cache_hit)``."""
    registry = registry or default_registry(problem)
    weights = weights or mean_weights(registry)
    key = system_key(ckpt, problem, registry, weights, ridge, grid)
    path = Path(directory or cache_dir()) / f"latent-{key}.npz"
    if path.exists():
        return _load_system(path, problem, registry, weights, ckpt.body, grid), True
    system = assemble_latent_system(ckpt, problem, registry, weights, ridge, grid)
    _save_system(system, path)
    return LatentSystem(**{**system.__dict__, "key": key}), False
