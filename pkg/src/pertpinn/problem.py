"""Problem class: linear operator plus small polynomial perturbation.

A problem reads ``D u + eps * P(u) = f`` on ``[x_min, x_max] x [0, t_max]``
where ``D`` is a constant-coefficient linear differential operator of order
at most two in each variable and ``P`` is a polynomial in ``u``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal

import numpy as np

from .expressions import Expr, sigmoid

__all__ = [
    "SpaceTimeDomain",
    "LinearOperator",
    "Polynomial",
    "ConditionSpec",
    "PdeProblem",
    "kpp_polynomial",
    "kpp_initial_profile",
    "validate_problem",
    "polynomial_eval",
    "polynomial_derivative",
]

ConditionKind = Literal["initial", "boundary_left", "boundary_right"]
_KINDS = ("initial", "boundary_left", "boundary_right")


@dataclass(frozen=True)
class SpaceTimeDomain:
    x_min: float = 0.0
    x_max: float = 2.0
    t_max: float = 1.0

    def __post_init__(self):
        for name in ("x_min", "x_max", "t_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min must be < x_max, got {self.x_min}, {self.x_max}")
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceTimeDomain":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d.get("t_max", 1.0)))


@dataclass(frozen=True)
class LinearOperator:
    """Sum of ``coefficient * d^dx/dx^dx d^dt/dt^dt`` terms.

    Mixed space-time derivatives are not representable by the network jets
    and are rejected.
    """

    terms: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        terms = tuple((int(a), int(b), float(c)) for a, b, c in self.terms)
        object.__setattr__(self, "terms", terms)
        if not any(c != 0.0 for _, _, c in terms):
            raise ValueError("operator needs at least one term with nonzero coefficient")
        for dx, dt, _ in terms:
            if dx not in (0, 1, 2) or dt not in (0, 1, 2):
                raise ValueError(f"derivative orders must lie in {{0,1,2}}, got ({dx}, {dt})")
            if dx and dt:
                raise ValueError(f"mixed derivative term ({dx}, {dt}) is not supported")

    @classmethod
    def heat(cls, diffusion: float) -> "LinearOperator":
        """``d/dt - D d2/dx2``."""
        return cls(((0, 1, 1.0), (2, 0, -float(diffusion))))

    @classmethod
    def wave(cls, speed: float) -> "LinearOperator":
        """``d2/dt2 - c^2 d2/dx2``."""
        return cls(((0, 2, 1.0), (2, 0, -float(speed) ** 2)))

    @property
    def time_order(self) -> int:
        return max((dt for _, dt, c in self.terms if c != 0.0), default=0)

    @property
    def space_order(self) -> int:
        return max((dx for dx, _, c in self.terms if c != 0.0), default=0)

    def coefficient(self, dx: int, dt: int) -> float:
        return sum(c for a, b, c in self.terms if (a, b) == (dx, dt))

    def to_dict(self) -> dict:
        return {"terms": [[dx, dt, c] for dx, dt, c in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearOperator":
        return cls(tuple(tuple(term) for term in d["terms"]))


@dataclass(frozen=True)
class Polynomial:
    """``P(u) = sum_l coefficients[l] * u**l``."""

    coefficients: tuple[float, ...]

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        if not coeffs:
            coeffs = (0.0,)
        if not all(math.isfinite(c) for c in coeffs):
            raise ValueError("polynomial coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def is_zero(self) -> bool:
        return all(c == 0.0 for c in self.coefficients)

    def __call__(self, u):
        return polynomial_eval(self, u)

    def derivative(self) -> "Polynomial":
        return polynomial_derivative(self)


def polynomial_eval(poly: Polynomial, u):
    """Horner evaluation of ``poly`` at scalar or array ``u``."""
    u = np.asarray(u, dtype=float)
    acc = np.zeros_like(u)
    for c in reversed(poly.coefficients):
        acc = acc * u + c
    return acc if acc.ndim else float(acc)


def polynomial_derivative(poly: Polynomial) -> Polynomial:
    coeffs = poly.coefficients
    if len(coeffs) == 1:
        return Polynomial((0.0,))
    return Polynomial(tuple(l * c for l, c in enumerate(coeffs) if l > 0))


def kpp_polynomial(n1: int, n2: int) -> Polynomial:
    """Perturbation of ``u_t - D u_xx - eps u^n1 (1 - u^n2)``, i.e. ``-u^n1 + u^(n1+n2)``."""
    coeffs = [0.0] * (n1 + n2 + 1)
    coeffs[n1] -= 1.0
    coeffs[n1 + n2] += 1.0
    return Polynomial(tuple(coeffs))


def kpp_initial_profile(x):
    """Smoothed step initial datum of the KPP benchmarks.

    The second group adds two *rising* logistic terms, so the profile tends
    to 0.7 between 1 and 1.5 and to 1.4 beyond 1.5.
    """
    x = np.asarray(x, dtype=float)
    out = sigmoid(-20.0 * (x - 0.5)) + 0.7 * (sigmoid(20.0 * (x - 1.0)) + sigmoid(20.0 * (x - 1.5)))
    return out if np.ndim(out) else float(out)


KPP_PROFILE_EXPR = "sigmoid(-20*(x - 0.5)) + 0.7*(sigmoid(20*(x - 1)) + sigmoid(20*(x - 1.5)))"


@dataclass(frozen=True)
class ConditionSpec:
    """Initial or boundary datum, optionally on a derivative.

    ``derivative_order`` counts time derivatives for initial data and space
    derivatives for boundary data; 0 is a Dirichlet condition on ``u``.
    """

    kind: ConditionKind
    target: Expr
    derivative_order: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if not isinstance(self.target, Expr):
            object.__setattr__(self, "target", Expr(self.target))
        if self.derivative_order < 0:
            raise ValueError("derivative_order must be nonnegative")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "derivative_order": self.derivative_order,
                "target": self.target.source}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSpec":
        return cls(d["kind"], Expr(d["target"]), int(d.get("derivative_order", 0)))


@dataclass(frozen=True)
class PdeProblem:
    operator: LinearOperator
    perturbation: Polynomial
    epsilon: float
    domain: SpaceTimeDomain
    conditions: tuple[ConditionSpec, ...]
    forcing: Expr = field(default_factory=lambda: Expr("0"))
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if not isinstance(self.forcing, Expr):
            object.__setattr__(self, "forcing", Expr(self.forcing))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def with_epsilon(self, epsilon: float) -> "PdeProblem":
        return replace(self, epsilon=float(epsilon))

    def with_forcing(self, forcing: str | Expr) -> "PdeProblem":
        return replace(self, forcing=forcing if isinstance(forcing, Expr) else Expr(forcing))

    def initial_conditions(self) -> list[ConditionSpec]:
        return sorted((c for c in self.conditions if c.kind == "initial"),
                      key=lambda c: c.derivative_order)

    def boundary_conditions(self, side: str) -> list[ConditionSpec]:
        return [c for c in self.conditions if c.kind == f"boundary_{side}"]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "operator": self.operator.to_dict(),
            "polynomial": list(self.perturbation.coefficients),
            "epsilon": self.epsilon,
            "domain": self.domain.to_dict(),
            "conditions": [c.to_dict() for c in self.conditions],
            "forcing": self.forcing.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PdeProblem":
        return cls(
            operator=LinearOperator.from_dict(d["operator"]),
            perturbation=Polynomial(tuple(d["polynomial"])),
            epsilon=float(d["epsilon"]),
            domain=SpaceTimeDomain.from_dict(d["domain"]),
            conditions=tuple(ConditionSpec.from_dict(c) for c in d["conditions"]),
            forcing=Expr(d.get("forcing", "0")),
            name=d.get("name", ""),
        )

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "PdeProblem":
        return cls.from_dict(json.loads(text))


def validate_problem(p: PdeProblem) -> list[str]:
    """Return the list of violated invariants; an empty list means valid."""
    issues: list[str] = []
    if not (0.0 <= p.epsilon < 1.0):
        issues.append(f"epsilon out of perturbative range [0, 1): {p.epsilon}")
    for l, c in enumerate(p.perturbation.coefficients):
        if abs(c) > 1.0:
            issues.append(f"polynomial coefficient P_{l} = {c} exceeds 1 in magnitude")

    op = p.operator
    orders = [c.derivative_order for c in p.initial_conditions()]
    needed = list(range(op.time_order))
    if sorted(set(orders)) != needed or len(orders) != len(needed):
        if op.time_order >= 2 and len(set(orders)) < op.time_order:
            issues.append("incomplete initial data for second-order-in-time operator")
        else:
            issues.append(f"initial data must cover time-derivative orders {needed}, got {orders}")

    left, right = p.boundary_conditions("left"), p.boundary_conditions("right")
    if op.space_order >= 2 and not (len(left) == 1 and len(right) == 1):
        issues.append("second-order-in-space operator needs one left and one right boundary condition")
    elif op.space_order == 1 and len(left) + len(right) != 1:
        issues.append("first-order-in-space operator needs exactly one boundary condition")
    for c in left + right:
        if c.derivative_order >= max(op.space_order, 1):
            issues.append(f"{c.kind} derivative order {c.derivative_order} exceeds operator space order")

    for c in p.conditions:
        var = "t" if c.kind.startswith("boundary") else "x"
        other = {"x", "t"} - {var}
        if c.target.names & other:
            issues.append(f"{c.kind} target {c.target.source!r} depends on {other.pop()}")
    return issues


def conditions_from_pairs(pairs: Iterable[tuple[str, str | float, int]]) -> tuple[ConditionSpec, ...]:
    return tuple(ConditionSpec(kind, Expr(target), order) for kind, target, order in pairs)
