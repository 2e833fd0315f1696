"""Perturbative cascade: collect powers of epsilon in eps * P(sum_i eps^i u_i).

Each order ``j >= 1`` of the truncated expansion satisfies ``D u_j = f_j``
with

    f_j = - sum_l P_l  sum_{|k| = l, sum_i i k_i = j - 1}  l! / prod_i k_i!  prod_i u_i^k_i

The multinomial uses the full ``prod_{i>=0} k_i!`` in the denominator; that
is what reproduces the identity ``f_2 = -P'(u_0) u_1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Sequence

import numpy as np

from . import kernels
from .grid import GridField
from .problem import Polynomial

__all__ = [
    "Composition",
    "PerturbationPlan",
    "enumerate_compositions",
    "build_plan",
    "evaluate_source",
    "evaluate_source_values",
    "assemble_solution",
]


@dataclass(frozen=True)
class Composition:
    k: tuple[int, ...]
    l: int
    order: int
    coefficient: int


def _multinomial(k: Sequence[int]) -> int:
    out = factorial(sum(k))
    for ki in k:
        out //= factorial(ki)
    return out


def enumerate_compositions(l: int, p: int, order: int) -> list[Composition]:
    """All ``k = (k_0..k_p)`` with ``sum k = l`` and ``sum i*k_i = order``.

    Returned in lexicographic order of ``k``.
    """
    if l < 0 or p < 0 or order < 0:
        raise ValueError("l, p and order must be nonnegative")
    found: list[tuple[int, ...]] = []
    k = [0] * (p + 1)

    def dfs(i: int, left: int, budget: int) -> None:
        # assign k_i..k_p; k_0 takes whatever count remains
        if i > p or budget == 0:
            if budget == 0:
                k[0] = left
                found.append(tuple(k))
                k[0] = 0
            return
        for ki in range(min(left, budget // i) + 1):
            k[i] = ki
            dfs(i + 1, left - ki, budget - i * ki)
        k[i] = 0

    if p == 0 or order == 0:
        if order == 0:
            found.append((l,) + (0,) * p)
    else:
        dfs(1, l, order)
    return [Composition(kv, l, order, _multinomial(kv)) for kv in sorted(found)]


@dataclass(frozen=True, eq=False)
class PerturbationPlan:
    """Source recipes for orders ``1..p``.

    ``recipes[j - 1]`` lists ``(l, composition)`` pairs; only nonzero ``P_l``
    appear.
    """

    poly: Polynomial
    p: int
    recipes: tuple[tuple[tuple[int, Composition], ...], ...]

    def terms(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(coefficients, exponents)`` for order ``j``.

        Coefficients already carry the minus sign and ``P_l``; exponents only
        cover ``u_0..u_{j-1}``.
        """
        self._check_order(j)
        recipe = self.recipes[j - 1]
        coeffs = np.array([-self.poly.coefficients[l] * c.coefficient for l, c in recipe], dtype=float)
        exps = np.array([c.k[:j] for _, c in recipe], dtype=np.int64).reshape(len(recipe), j)
        return coeffs, exps

    def _check_order(self, j: int) -> None:
        if not 1 <= j <= self.p:
            raise ValueError(f"order {j} outside 1..{self.p}")

    def dump(self) -> str:
        """One line per composition: ``j l k-vector coefficient``."""
        lines = []
        for j, recipe in enumerate(self.recipes, start=1):
            for l, c in recipe:
                kvec = ",".join(map(str, c.k))
                lines.append(f"{j} {l} [{kvec}] {c.coefficient}")
        return "\n".join(lines) + ("\n" if lines else "")


def build_plan(poly: Polynomial, p: int) -> PerturbationPlan:
    if p < 0:
        raise ValueError("truncation order must be nonnegative")
    recipes = []
    for j in range(1, p + 1):
        recipe = []
        for l, coeff in enumerate(poly.coefficients):
            if coeff == 0.0:
                continue
            recipe.extend((l, c) for c in enumerate_compositions(l, p, j - 1))
        recipes.append(tuple(recipe))
    return PerturbationPlan(poly, p, tuple(recipes))


def evaluate_source_values(plan: PerturbationPlan, j: int, prior: Sequence[np.ndarray]) -> np.ndarray:
    """``f_j`` at arbitrary points from arrays ``u_0..u_{j-1}`` of equal shape."""
    plan._check_order(j)
    if len(prior) < j:
        raise ValueError(f"order {j} needs u_0..u_{j - 1}, got {len(prior)} fields")
    shape = np.shape(prior[0])
    if any(np.shape(u) != shape for u in prior[:j]):
        raise ValueError("prior fields have mismatched shapes")
    coeffs, exps = plan.terms(j)
    u = np.stack([np.asarray(v, dtype=float).ravel() for v in prior[:j]])
    return kernels.source_sum(u, coeffs, exps).reshape(shape)


def evaluate_source(plan: PerturbationPlan, j: int, prior: Sequence[GridField]) -> GridField:
    if not prior:
        raise ValueError("no prior fields")
    for other in prior[1:]:
        prior[0].check_compatible(other)
    values = evaluate_source_values(plan, j, [f.values for f in prior])
    return GridField(values, prior[0].grid)


def assemble_solution(epsilon: float, orders: Sequence[GridField]) -> GridField:
    """``sum_i epsilon**i * orders[i]``."""
    if not orders:
        raise ValueError("need at least one order")
    for other in orders[1:]:
        orders[0].check_compatible(other)
    if epsilon == 0.0 or len(orders) == 1:
        return GridField(orders[0].values.copy(), orders[0].grid)
    acc = orders[0].values.copy()
    for i, f in enumerate(orders[1:], start=1):
        acc += epsilon**i * f.values
    return GridField(acc, orders[0].grid)
