"""Named benchmark problems.

``kpp-1`` .. ``kpp-4`` are the four reaction-diffusion condition sets,
``wave-1`` the perturbed wave equation, and ``eps-f0`` / ``eps-f1`` the
base problems of the epsilon sensitivity sweeps (zero and unit forcing).
The sweep presets use the degree-6 reaction ``u (1 - u^5)`` so that the
truncated series visibly breaks down inside ``0 < epsilon < 1``; with the
quadratic reaction the p = 10 truncation error stays below 1e-5 up to
epsilon = 0.9 on this horizon.
The diffusion coefficient is not part of the benchmark definitions and is
pinned to 0.1 here.
"""

from __future__ import annotations

from .expressions import Expr
from .problem import (
    KPP_PROFILE_EXPR,
    ConditionSpec,
    LinearOperator,
    PdeProblem,
    Polynomial,
    SpaceTimeDomain,
    kpp_polynomial,
)

DIFFUSION = 0.1
WAVE_SPEED = 1.0

__all__ = ["PRESETS", "get_preset", "DIFFUSION", "WAVE_SPEED"]


def _kpp(name, eps, n1, n2, ic, left, right, forcing, diffusion=DIFFUSION, t_max=1.0):
    return PdeProblem(
        operator=LinearOperator.heat(diffusion),
        perturbation=kpp_polynomial(n1, n2),
        epsilon=eps,
        domain=SpaceTimeDomain(0.0, 2.0, t_max),
        conditions=(
            ConditionSpec("initial", Expr(ic)),
            ConditionSpec("boundary_left", Expr(left)),
            ConditionSpec("boundary_right", Expr(right)),
        ),
        forcing=Expr(forcing),
        name=name,
    )


def _wave(t_max=1.0) -> PdeProblem:
    return PdeProblem(
        operator=LinearOperator.wave(WAVE_SPEED),
        perturbation=Polynomial((0.0, 1.0, 0.0, -1.0 / 6.0)),
        epsilon=0.75,
        domain=SpaceTimeDomain(0.0, 2.0, t_max),
        conditions=(
            ConditionSpec("initial", Expr("0")),
            ConditionSpec("initial", Expr("1"), derivative_order=1),
            ConditionSpec("boundary_left", Expr("0")),
            ConditionSpec("boundary_right", Expr("0")),
        ),
        forcing=Expr("0"),
        name="wave-1",
    )


PRESETS = {
    "kpp-1": lambda: _kpp("kpp-1", 0.5, 1, 1, KPP_PROFILE_EXPR, "1", "0", "0"),
    "kpp-2": lambda: _kpp("kpp-2", 0.1, 10, 1, KPP_PROFILE_EXPR, "1", "0", "0"),
    "kpp-3": lambda: _kpp("kpp-3", 0.1, 1, 10, KPP_PROFILE_EXPR, "1", "0", "0"),
    "kpp-4": lambda: _kpp("kpp-4", 0.3, 2, 1, "1 + 0.5*x*sin(2*pi*x)", "exp(-t)",
                          "1 + sin(t)", "sin(2*t)*cos(3*x)"),
    "wave-1": _wave,
    "eps-f0": lambda: _kpp("eps-f0", 0.5, 1, 5, KPP_PROFILE_EXPR, "1", "0", "0"),
    "eps-f1": lambda: _kpp("eps-f1", 0.5, 1, 5, KPP_PROFILE_EXPR, "1", "0", "1"),
}


def get_preset(name: str) -> PdeProblem:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
