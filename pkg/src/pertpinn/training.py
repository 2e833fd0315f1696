"""Multi-head physics-informed training of a shared latent body.

``K`` linear tasks share one body ``H``; head ``k`` predicts ``u_k = H W_k``.
The objective is the mean over heads of

    w_pde * mean (D u_k - f_k)^2 + w_ic * mean (d^a u_k(x, 0) - g_k)^2
        + w_bc * sum_side mean (d^a u_k(side, t) - B_side,k)^2

where derivative conditions substitute the matching jet component.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .expressions import Expr
from .network import (
    Jet,
    MultiHeadCheckpoint,
    BodyParams,
    adam_init,
    adam_step,
    apply_operator,
    backward_jet,
    forward_jet,
    init_body,
)
from .problem import ConditionSpec, LinearOperator, PdeProblem, SpaceTimeDomain

log = logging.getLogger(__name__)

__all__ = [
    "LinearTask",
    "LossWeights",
    "CollocationBatch",
    "TrainConfig",
    "TrainingDiverged",
    "sample_collocation",
    "head_loss",
    "multihead_loss",
    "random_task",
    "task_family",
    "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: np.ndarray):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class LinearTask:
    """Right-hand sides of one linear problem ``D u = f`` with its conditions."""

    forcing: Expr
    conditions: tuple[ConditionSpec, ...]

    @classmethod
    def from_problem(cls, problem: PdeProblem) -> "LinearTask":
        return cls(problem.forcing, problem.conditions)

    def of_kind(self, kind: str) -> list[ConditionSpec]:
        return sorted((c for c in self.conditions if c.kind == kind), key=lambda c: c.derivative_order)


@dataclass(frozen=True)
class LossWeights:
    pde: float = 1.0
    ic: float = 1.0
    bc: float = 1.0

    def __post_init__(self):
        if min(self.pde, self.ic, self.bc) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class CollocationBatch:
    x_int: np.ndarray
    t_int: np.ndarray
    x_init: np.ndarray
    t_left: np.ndarray
    t_right: np.ndarray
    domain: SpaceTimeDomain

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.x_int.size, self.x_init.size, self.t_left.size)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, list[slice]]:
        """All points in one array with slices ``[interior, initial, left, right]``."""
        d = self.domain
        xs = [self.x_int, self.x_init, np.full(self.t_left.size, d.x_min), np.full(self.t_right.size, d.x_max)]
        ts = [self.t_int, np.zeros(self.x_init.size), self.t_left, self.t_right]
        bounds = np.cumsum([0] + [a.size for a in xs])
        slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        return np.concatenate(xs), np.concatenate(ts), slices


def _grid_shape(n: int, aspect: float) -> tuple[int, int]:
    nx = max(1, int(round(math.sqrt(n * aspect))))
    nt = max(1, n // nx)
    return nx, nt


def _jittered(lo: float, hi: float, n: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    h = (hi - lo) / n
    centres = lo + h * (np.arange(n) + 0.5)
    if noise:
        centres = centres + noise * rng.uniform(-0.5 * h, 0.5 * h, size=n)
    return np.clip(centres, lo, hi)


def sample_collocation(domain: SpaceTimeDomain, sizes: Sequence[int], rng: np.random.Generator | None = None,
                       noise: float = 1.0, aspect: float = 1.0) -> CollocationBatch:
    """Cell-centred grids jittered by up to half a cell (``noise`` scales the jitter).

    ``sizes = (interior, initial, per-boundary)``. The interior count is
    rounded down to an ``n_x * n_t`` rectangle with ``n_x / n_t ~ aspect``.
    """
    n_int, n_init, n_bc = (int(s) for s in sizes)
    if min(n_int, n_init, n_bc) <= 0:
        raise ValueError("collocation sizes must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    nx, nt = _grid_shape(n_int, aspect)
    hx, ht = domain.length / nx, domain.t_max / nt
    X, T = np.meshgrid(domain.x_min + hx * (np.arange(nx) + 0.5), ht * (np.arange(nt) + 0.5), indexing="ij")
    X, T = X.ravel(), T.ravel()
    if noise:
        X = X + noise * rng.uniform(-0.5 * hx, 0.5 * hx, size=X.size)
        T = T + noise * rng.uniform(-0.5 * ht, 0.5 * ht, size=T.size)
    X = np.clip(X, domain.x_min, domain.x_max)
    T = np.clip(T, 0.0, domain.t_max)
    return CollocationBatch(
        X, T,
        _jittered(domain.x_min, domain.x_max, n_init, rng, noise),
        _jittered(0.0, domain.t_max, n_bc, rng, noise),
        _jittered(0.0, domain.t_max, n_bc, rng, noise),
        domain,
    )


# ---------------------------------------------------------------------------
# Loss evaluation

_SIDE_COMPONENT = {0: "v", 1: "dx", 2: "dxx"}
_TIME_COMPONENT = {0: "v", 1: "dt", 2: "dtt"}


@dataclass
class _Targets:
    """Stacked targets for K tasks over one batch."""

    forcing: np.ndarray  # (n_int, K)
    initial: list[tuple[int, np.ndarray]]  # (derivative order, (n_init, K))
    left: list[tuple[int, np.ndarray]]
    right: list[tuple[int, np.ndarray]]


def _condition_layout(task: LinearTask) -> tuple:
    return tuple((c.kind, c.derivative_order) for c in
                 task.of_kind("initial") + task.of_kind("boundary_left") + task.of_kind("boundary_right"))


def _targets(tasks: Sequence[LinearTask], batch: CollocationBatch) -> _Targets:
    layout = _condition_layout(tasks[0])
    if any(_condition_layout(t) != layout for t in tasks):
        raise ValueError("all tasks must share the same condition layout")
    d = batch.domain
    forcing = np.column_stack([t.forcing(batch.x_int, batch.t_int) for t in tasks])

    def collect(kind, coord, other):
        out = []
        for i, spec in enumerate(tasks[0].of_kind(kind)):
            cols = []
            for t in tasks:
                target = t.of_kind(kind)[i].target
                cols.append(target(coord, other) if kind == "initial" else target(other, coord))
            out.append((spec.derivative_order, np.column_stack(cols)))
        return out

    return _Targets(
        forcing,
        collect("initial", batch.x_init, 0.0),
        collect("boundary_left", batch.t_left, d.x_min),
        collect("boundary_right", batch.t_right, d.x_max),
    )


def _loss_and_grads(H: Jet, slices, W: np.ndarray, targets: _Targets, weights: LossWeights,
                    op: LinearOperator, need_grad: bool = True):
    """Mean-over-heads loss, per-term breakdown, dL/dH jet and dL/dW."""
    K = W.shape[1]
    s_int, s_init, s_left, s_right = slices
    gH = Jet.zeros_like(H) if need_grad else None
    gW = np.zeros_like(W) if need_grad else None
    terms = {}

    # PDE residual
    DH = apply_operator(op, Jet(*(getattr(H, c)[s_int] for c in ("v", "dx", "dt", "dxx", "dtt"))))
    r = DH @ W - targets.forcing
    n = r.shape[0]
    terms["pde"] = weights.pde * float(np.sum(r * r)) / (n * K)
    if need_grad:
        gr = (2.0 * weights.pde / (n * K)) * r
        gW += DH.T @ gr
        gDH = gr @ W.T
        for dx, dt, c in op.terms:
            if c != 0.0:
                comp = {(0, 0): "v", (1, 0): "dx", (0, 1): "dt", (2, 0): "dxx", (0, 2): "dtt"}[(dx, dt)]
                getattr(gH, comp)[s_int] += c * gDH

    def fit(group, sl, table, weight, name):
        total = 0.0
        for order, target in group:
            comp = table[order]
            Hc = getattr(H, comp)[sl]
            res = Hc @ W - target
            m = res.shape[0]
            total += weight * float(np.sum(res * res)) / (m * K)
            if need_grad:
                g = (2.0 * weight / (m * K)) * res
                gW[...] += Hc.T @ g
                getattr(gH, comp)[sl] += g @ W.T
        terms[name] = terms.get(name, 0.0) + total

    fit(targets.initial, s_init, _TIME_COMPONENT, weights.ic, "ic")
    fit(targets.left, s_left, _SIDE_COMPONENT, weights.bc, "bc")
    fit(targets.right, s_right, _SIDE_COMPONENT, weights.bc, "bc")
    terms.setdefault("ic", 0.0)
    terms.setdefault("bc", 0.0)
    total = terms["pde"] + terms["ic"] + terms["bc"]
    return total, terms, gH, gW


def head_loss(body: BodyParams, head: np.ndarray, task: LinearTask, batch: CollocationBatch,
              weights: LossWeights, operator: LinearOperator) -> tuple[float, dict]:
    """Physics-informed loss of a single head: ``(total, {"pde", "ic", "bc"})``."""
    head = np.asarray(head, dtype=float).reshape(-1, 1)
    if head.shape[0] != body.latent_dim:
        raise ValueError(f"head length {head.shape[0]} != latent dimension {body.latent_dim}")
    x, t, slices = batch.stacked()
    H = forward_jet(body, x, t)
    total, terms, _, _ = _loss_and_grads(H, slices, head, _targets([task], batch), weights, operator,
                                         need_grad=False)
    if not math.isfinite(total):
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        raise FloatingPointError(f"non-finite loss term(s): {bad}")
    return total, terms


def lstsq_heads(body: BodyParams, tasks: Sequence[LinearTask], batch: CollocationBatch,
                weights: LossWeights, operator: LinearOperator, ridge: float = 1e-6) -> np.ndarray:
    """Heads minimising each task's loss on ``batch`` with the body frozen.

    ``ridge`` is relative to the mean squared column norm of the stacked rows.
    """
    x, t, slices = batch.stacked()
    H = forward_jet(body, x, t)
    tg = _targets(tasks, batch)
    s_int, s_init, s_left, s_right = slices
    DH = apply_operator(operator, Jet(*(getattr(H, c)[s_int] for c in ("v", "dx", "dt", "dxx", "dtt"))))
    rows = [math.sqrt(weights.pde / DH.shape[0]) * DH]
    rhs = [math.sqrt(weights.pde / DH.shape[0]) * tg.forcing]
    for group, sl, table, w in ((tg.initial, s_init, _TIME_COMPONENT, weights.ic),
                                (tg.left, s_left, _SIDE_COMPONENT, weights.bc),
                                (tg.right, s_right, _SIDE_COMPONENT, weights.bc)):
        for order, target in group:
            Hc = getattr(H, table[order])[sl]
            rows.append(math.sqrt(w / Hc.shape[0]) * Hc)
            rhs.append(math.sqrt(w / Hc.shape[0]) * target)
    A, B = np.vstack(rows), np.vstack(rhs)
    # ridge keeps the heads small when random features are nearly collinear;
    # unregularised heads make the first body step blow up
    lam = ridge * np.sum(A * A) / A.shape[1]
    A = np.vstack((A, math.sqrt(lam) * np.eye(A.shape[1])))
    B = np.vstack((B, np.zeros((A.shape[1], B.shape[1]))))
    W, *_ = np.linalg.lstsq(A, B, rcond=None)
    return W


def multihead_loss(body: BodyParams, heads: np.ndarray, tasks: Sequence[LinearTask], batch: CollocationBatch,
                   weights: LossWeights, operator: LinearOperator):
    """Averaged loss over heads with flat body gradient and head gradient."""
    x, t, slices = batch.stacked()
    H, tape = forward_jet(body, x, t, tape=True)
    total, terms, gH, gW = _loss_and_grads(H, slices, heads, _targets(tasks, batch), weights, operator)
    return total, terms, backward_jet(body, tape, gH), gW


# ---------------------------------------------------------------------------
# Task family


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def random_task(rng: np.random.Generator, *,
                domain: SpaceTimeDomain, layout: Sequence[tuple[str, int]], n_modes: int = 3,
                amplitude: float = 1.0, steps: bool = True) -> LinearTask:
    """Random Fourier-polynomial task, optionally with logistic steps in the initial data.

    Forcing ``sum a_i sin(w_i x + phi_i) cos(nu_i t) + c0 + c1 x + c2 t``;
    initial and boundary data are one-variable members of the same family.
    """
    L, T = domain.length, domain.t_max
    x0 = domain.x_min

    def modes(var: str, span: float, other: str | None = None) -> str:
        parts = []
        for _ in range(n_modes):
            a = amplitude * rng.uniform(-1, 1)
            w = rng.uniform(0.5, 3.0) * math.pi / span
            phi = rng.uniform(0, 2 * math.pi)
            term = f"{_fmt(a)}*sin({_fmt(w)}*({var} - {_fmt(x0 if var == 'x' else 0.0)}) + {_fmt(phi)})"
            if other is not None:
                nu = rng.uniform(0.0, 3.0) * math.pi / T
                term += f"*cos({_fmt(nu)}*{other})"
            parts.append(term)
        c = amplitude * rng.uniform(-1, 1, size=2)
        parts.append(f"{_fmt(c[0])} + {_fmt(c[1])}*{var}")
        return " + ".join(parts)

    forcing = modes("x", L, "t") + f" + {_fmt(amplitude * rng.uniform(-1, 1))}*t"
    conditions = []
    for kind, order in layout:
        if kind == "initial":
            expr = modes("x", L)
            if steps and order == 0:
                for _ in range(2):
                    c = rng.uniform(domain.x_min, domain.x_max)
                    s = rng.choice([-1.0, 1.0]) * rng.uniform(5.0, 25.0)
                    expr += f" + {_fmt(amplitude * rng.uniform(-1, 1))}*sigmoid({_fmt(s)}*(x - {_fmt(c)}))"
        else:
            expr = modes("t", T)
        conditions.append(ConditionSpec(kind, Expr(expr), order))
    return LinearTask(Expr(forcing), tuple(conditions))


def task_family(problem: PdeProblem, k: int, seed: int, steps: bool = True) -> list[LinearTask]:
    """``k`` random tasks sharing the condition layout of ``problem``."""
    rng = np.random.default_rng(seed)
    layout = _condition_layout(LinearTask.from_problem(problem))
    return [random_task(rng, domain=problem.domain, layout=layout, steps=steps) for _ in range(k)]


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    iterations: int = 50_000
    lr: float = 1e-4
    lr_decay_factor: float = 0.975
    lr_decay_every: int = 1000
    batch_interior: int = 100
    batch_initial: int = 25
    batch_boundary: int = 25
    w_pde: float = 1.0
    w_ic: float = 1.0
    w_bc: float = 1.0
    heads: int = 10
    seed: int = 0
    layers: int = 4
    width: int = 64
    activation: str = "tanh"
    task_steps: bool = True
    heads_init: str = "random"

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_pde, self.w_ic, self.w_bc)

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "lr": self.lr,
            "lr_decay": {"factor": self.lr_decay_factor, "every": self.lr_decay_every},
            "batch": {"interior": self.batch_interior, "initial": self.batch_initial,
                      "boundary": self.batch_boundary},
            "weights": {"pde": self.w_pde, "ic": self.w_ic, "bc": self.w_bc},
            "heads": self.heads,
            "seed": self.seed,
            "architecture": {"layers": self.layers, "width": self.width, "activation": self.activation},
            "task_steps": self.task_steps,
            "heads_init": self.heads_init,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        simple = {"iterations": int, "lr": float, "heads": int, "seed": int, "task_steps": bool,
                  "heads_init": str}
        for key, conv in simple.items():
            if key in d:
                setattr(cfg, key, conv(d[key]))
        if "lr_decay" in d:
            cfg.lr_decay_factor = float(d["lr_decay"].get("factor", cfg.lr_decay_factor))
            cfg.lr_decay_every = int(d["lr_decay"].get("every", cfg.lr_decay_every))
        if "batch" in d:
            cfg.batch_interior = int(d["batch"].get("interior", cfg.batch_interior))
            cfg.batch_initial = int(d["batch"].get("initial", cfg.batch_initial))
            cfg.batch_boundary = int(d["batch"].get("boundary", cfg.batch_boundary))
        if "weights" in d:
            cfg.w_pde = float(d["weights"].get("pde", cfg.w_pde))
            cfg.w_ic = float(d["weights"].get("ic", cfg.w_ic))
            cfg.w_bc = float(d["weights"].get("bc", cfg.w_bc))
        if "architecture" in d:
            a = d["architecture"]
            cfg.layers = int(a.get("layers", cfg.layers))
            cfg.width = int(a.get("width", cfg.width))
            cfg.activation = str(a.get("activation", cfg.activation))
        return cfg


def train(problem: PdeProblem, tasks: Sequence[LinearTask] | None, config: TrainConfig,
          body: BodyParams | None = None, progress_every: int = 0):
    """Train body and heads; returns ``(checkpoint, history)``.

    ``history`` has one row per iteration: ``[total, pde, ic, bc]``. Each
    iteration draws a fresh jittered batch. Divergence (non-finite loss or
    loss above 1e6) raises :class:`TrainingDiverged` carrying the partial
    history.
    """
    if tasks is None:
        tasks = task_family(problem, config.heads, config.seed + 1, steps=config.task_steps)
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    op, domain = problem.operator, problem.domain
    if body is None:
        widths = (2,) + (config.width,) * config.layers
        body = init_body(widths, config.activation, config.seed, domain)
    rng = np.random.default_rng(config.seed)
    n_h, K = body.latent_dim, len(tasks)
    heads = rng.uniform(-1.0, 1.0, size=(n_h, K)) / math.sqrt(n_h)
    if config.heads_init == "lstsq":
        warm = sample_collocation(domain, (config.batch_interior, config.batch_initial, config.batch_boundary),
                                  np.random.default_rng(config.seed + 7919), noise=0.0)
        heads = lstsq_heads(body, tasks, warm, config.weights, op)
    elif config.heads_init != "random":
        raise ValueError(f"unknown heads_init {config.heads_init!r}")

    n_body = body.flat.size
    theta = np.concatenate([body.flat, heads.ravel()])
    state = adam_init(theta.size, config.lr, config.lr_decay_factor, config.lr_decay_every)
    sizes = (config.batch_interior, config.batch_initial, config.batch_boundary)
    weights = config.weights
    history = np.zeros((config.iterations, 4))
    t0 = time.perf_counter()
    for it in range(config.iterations):
        batch = sample_collocation(domain, sizes, rng, noise=1.0, aspect=1.0)
        cur_body = body.with_flat(theta[:n_body])
        cur_heads = theta[n_body:].reshape(n_h, K)
        try:
            total, terms, g_body, g_heads = multihead_loss(cur_body, cur_heads, tasks, batch, weights, op)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", history[:it]) from exc
        history[it] = (total, terms["pde"], terms["ic"], terms["bc"])
        if not math.isfinite(total) or total > 1e6:
            raise TrainingDiverged(f"iteration {it}: loss {total!r} diverged", history[: it + 1])
        theta, state = adam_step(state, theta, np.concatenate([g_body, g_heads.ravel()]))
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d loss %.4e (pde %.3e ic %.3e bc %.3e) lr %.3e %.1fs", it + 1, total,
                     terms["pde"], terms["ic"], terms["bc"], state.lr, time.perf_counter() - t0)

    final_body = body.with_flat(theta[:n_body])
    final_heads = theta[n_body:].reshape(n_h, K).copy()
    meta = {
        "config": config.to_json_dict(),
        "final_loss": float(history[-1, 0]) if len(history) else None,
        "tasks": [{"forcing": t.forcing.source, "conditions": [c.to_dict() for c in t.conditions]}
                  for t in tasks],
    }
    ckpt = MultiHeadCheckpoint(final_body, final_heads, op, domain, config.seed, config.iterations, meta)
    return ckpt, history
