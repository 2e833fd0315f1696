"""Fully connected body whose forward pass carries input-derivative jets.

Every hidden unit is propagated together with its first and pure second
derivatives in ``x`` and ``t``. For a layer ``h = s(W a + b)`` the rule is

    z   = W a + b          z_d  = W a_d          z_dd = W a_dd
    h   = s(z)             h_d  = s'(z) z_d      h_dd = s''(z) z_d**2 + s'(z) z_dd

for each direction ``d`` in ``x, t``. The last hidden layer is the latent
basis ``H``. Parameter gradients of any scalar built from the jets come from
:func:`backward_jet`, the exact adjoint of the rule above.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .problem import LinearOperator, SpaceTimeDomain

__all__ = [
    "Jet",
    "BodyParams",
    "init_body",
    "forward_jet",
    "backward_jet",
    "apply_operator",
    "param_gradient",
    "OptimizerState",
    "adam_init",
    "adam_step",
    "MultiHeadCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "ACTIVATIONS",
    "CHECKPOINT_VERSION",
]

COMPONENTS = ("v", "dx", "dt", "dxx", "dtt")
CHECKPOINT_VERSION = 1


def _tanh(z):
    s = np.tanh(z)
    d1 = 1.0 - s * s
    d2 = -2.0 * s * d1
    d3 = -2.0 * d1 * d1 + 4.0 * s * s * d1
    return s, d1, d2, d3


def _sin(z):
    s, c = np.sin(z), np.cos(z)
    return s, c, -s, -c


def _linear(z):
    one = np.ones_like(z)
    return z.copy(), one, 0.0 * one, 0.0 * one


# each returns (sigma, sigma', sigma'', sigma''')
ACTIVATIONS: dict[str, Callable] = {"tanh": _tanh, "sin": _sin, "linear": _linear}


@dataclass
class Jet:
    """Value and input derivatives; each array has shape ``(n_points, width)``."""

    v: np.ndarray
    dx: np.ndarray
    dt: np.ndarray
    dxx: np.ndarray
    dtt: np.ndarray

    def component(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def select(self, dx_order: int, dt_order: int) -> np.ndarray:
        key = {(0, 0): "v", (1, 0): "dx", (0, 1): "dt", (2, 0): "dxx", (0, 2): "dtt"}.get((dx_order, dt_order))
        if key is None:
            raise ValueError(f"derivative ({dx_order}, {dt_order}) is not carried by the jet")
        return getattr(self, key)

    @classmethod
    def zeros_like(cls, other: "Jet") -> "Jet":
        return cls(*(np.zeros_like(getattr(other, c)) for c in COMPONENTS))


@dataclass
class BodyParams:
    """Layer parameters stored in one flat vector.

    ``widths`` lists every layer including the 2-dimensional input, e.g.
    ``(2, 64, 64, 64, 64)``. Inputs are mapped affinely to ``[-1, 1]`` from
    the domain box before the first layer; the map is fixed, not trained.
    """

    widths: tuple[int, ...]
    flat: np.ndarray
    activation: str = "tanh"
    input_shift: tuple[float, float] = (0.0, 0.0)
    input_scale: tuple[float, float] = (1.0, 1.0)
    _views: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[0] != 2:
            raise ValueError("widths must start with the 2 inputs and have at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n = self.n_params(self.widths)
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.flat.shape}")
        views, off = [], 0
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            W = self.flat[off:off + n_out * n_in].reshape(n_out, n_in)
            off += n_out * n_in
            b = self.flat[off:off + n_out]
            off += n_out
            views.append((W, b))
        self._views = views

    @staticmethod
    def n_params(widths: Sequence[int]) -> int:
        return sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._views

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]

    def with_flat(self, flat: np.ndarray) -> "BodyParams":
        return BodyParams(self.widths, flat, self.activation, self.input_shift, self.input_scale)

    def copy(self) -> "BodyParams":
        return self.with_flat(self.flat.copy())


def init_body(widths: Sequence[int], activation: str = "tanh", seed: int = 0,
              domain: SpaceTimeDomain | None = None) -> BodyParams:
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights and biases."""
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in widths)
    chunks = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    shift, scale = (0.0, 0.0), (1.0, 1.0)
    if domain is not None:
        shift = (0.5 * (domain.x_min + domain.x_max), 0.5 * domain.t_max)
        scale = (2.0 / domain.length, 2.0 / domain.t_max)
    return BodyParams(widths, np.concatenate(chunks), activation, shift, scale)


@dataclass
class _Tape:
    inputs: list[np.ndarray]  # stacked (5, n, w_in) jets entering each layer
    pre: list[np.ndarray]  # stacked pre-activation jets
    derivs: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


def _stack_to_jet(A: np.ndarray) -> Jet:
    return Jet(A[0], A[1], A[2], A[3], A[4])


def _input_stack(params: BodyParams, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    kx, kt = params.input_scale
    sx, st = params.input_shift
    A = np.zeros((5, x.shape[0], 2))
    A[0, :, 0] = (x - sx) * kx
    A[0, :, 1] = (t - st) * kt
    A[1, :, 0] = kx
    A[2, :, 1] = kt
    return A


def forward_jet(params: BodyParams, x, t, tape: bool = False):
    """Latent jet ``H`` at points ``(x, t)``; optionally the backward tape."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x, t = np.broadcast_arrays(x, t)
    act = ACTIVATIONS[params.activation]
    A = _input_stack(params, x.ravel(), t.ravel())
    n = A.shape[1]
    rec = _Tape([], [], []) if tape else None
    for idx, (W, b) in enumerate(params.layers):
        Z = (A.reshape(5 * n, -1) @ W.T).reshape(5, n, -1)
        Z[0] += b
        s0, s1, s2, s3 = act(Z[0])
        Hn = np.empty_like(Z)
        Hn[0] = s0
        Hn[1:] = s1 * Z[1:]
        Hn[3] += s2 * Z[1] * Z[1]
        Hn[4] += s2 * Z[2] * Z[2]
        if not np.isfinite(Hn).all():
            raise FloatingPointError(f"non-finite activation jet in layer {idx}")
        if rec is not None:
            rec.inputs.append(A)
            rec.pre.append(Z)
            rec.derivs.append((s1, s2, s3))
        A = Hn
    H = _stack_to_jet(A)
    return (H, rec) if tape else H


def backward_jet(params: BodyParams, tape: _Tape, grad: Jet) -> np.ndarray:
    """Flat parameter gradient given the loss gradient w.r.t. every ``H`` component."""
    out = np.zeros_like(params.flat)
    grads = params.with_flat(out).layers
    G = np.stack([grad.v, grad.dx, grad.dt, grad.dxx, grad.dtt])
    n = G.shape[1]
    for idx in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[idx]
        A, Z = tape.inputs[idx], tape.pre[idx]
        s1, s2, s3 = tape.derivs[idx]
        GZ = s1 * G
        GZ[0] += (s2 * (G[1] * Z[1] + G[2] * Z[2] + G[3] * Z[3] + G[4] * Z[4])
                  + s3 * (G[3] * Z[1] * Z[1] + G[4] * Z[2] * Z[2]))
        GZ[1] += 2.0 * s2 * G[3] * Z[1]
        GZ[2] += 2.0 * s2 * G[4] * Z[2]
        dW, db = grads[idx]
        dW[...] = GZ.reshape(5 * n, -1).T @ A.reshape(5 * n, -1)
        db[...] = GZ[0].sum(axis=0)
        if idx:
            G = (GZ.reshape(5 * n, -1) @ W).reshape(5, n, -1)
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite parameter gradient")
    return out


def apply_operator(op: LinearOperator, jets: Jet) -> np.ndarray:
    """Rows of ``D H``: ``sum coeff * (selected component)`` per latent unit."""
    out = np.zeros_like(jets.v)
    for dx, dt, c in op.terms:
        if c != 0.0:
            out += c * jets.select(dx, dt)
    return out


def param_gradient(params: BodyParams, x, t, loss_fn: Callable[[Jet], tuple[float, Jet]]):
    """Loss and its exact flat parameter gradient.

    ``loss_fn`` receives the latent jet at the points and returns the scalar
    loss together with its gradient with respect to each jet component.
    """
    H, tape = forward_jet(params, x, t, tape=True)
    loss, gH = loss_fn(H)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    for c in COMPONENTS:
        bad = ~np.isfinite(getattr(gH, c)).all(axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite loss gradient at point {int(np.flatnonzero(bad)[0])}")
    return float(loss), backward_jet(params, tape, gH)


# ---------------------------------------------------------------------------
# Adam with step decay


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr0: float = 1e-4
    decay_factor: float = 0.975
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @property
    def lr(self) -> float:
        """Learning rate applied at the next step."""
        return self.lr0 * self.decay_factor ** (self.step // self.decay_every)


def adam_init(n: int, lr: float = 1e-4, decay_factor: float = 0.975, decay_every: int = 1000) -> OptimizerState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return OptimizerState(np.zeros(n), np.zeros(n), 0, lr, decay_factor, decay_every)


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update; returns new flat params and state."""
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    lr = state.lr
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1**step)
    vhat = v / (1.0 - state.beta2**step)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, OptimizerState(m, v, step, state.lr0, state.decay_factor, state.decay_every,
                               state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class MultiHeadCheckpoint:
    body: BodyParams
    heads: np.ndarray  # (latent_dim, K)
    operator: LinearOperator
    domain: SpaceTimeDomain
    seed: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "widths": list(self.body.widths),
            "activation": self.body.activation,
            "input_shift": list(self.body.input_shift),
            "input_scale": list(self.body.input_scale),
            "params": _pack(self.body.flat),
            "heads_shape": list(self.heads.shape),
            "heads": _pack(self.heads.ravel()),
            "operator": self.operator.to_dict(),
            "domain": self.domain.to_dict(),
            "seed": self.seed,
            "step": self.step,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiHeadCheckpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        body = BodyParams(tuple(d["widths"]), _unpack(d["params"]), d["activation"],
                          tuple(d["input_shift"]), tuple(d["input_scale"]))
        heads = _unpack(d["heads"]).reshape(d["heads_shape"])
        return cls(body, heads, LinearOperator.from_dict(d["operator"]),
                   SpaceTimeDomain.from_dict(d["domain"]), int(d["seed"]), int(d["step"]), d.get("meta", {}))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.body.flat.astype("<f8").tobytes())
        h.update(json.dumps([list(self.body.widths), self.body.activation, list(self.body.input_shift),
                             list(self.body.input_scale)]).encode())
        return h.hexdigest()[:16]


def _pack(a: np.ndarray) -> str:
    """Little-endian float64 bytes, base64 encoded."""
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unpack(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def save_checkpoint(ckpt: MultiHeadCheckpoint, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ckpt.to_dict(), indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> MultiHeadCheckpoint:
    return MultiHeadCheckpoint.from_dict(json.loads(Path(path).read_text()))
