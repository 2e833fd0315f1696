"""Declarative scalar expressions in ``x`` and ``t``.

Forcing terms, initial data and boundary data are written as short infix
strings such as ``"sin(2*t)*cos(3*x)"`` so that problem files stay portable.
The string is parsed once with :mod:`ast`, checked against a whitelist and
evaluated with numpy ufuncs.
"""

from __future__ import annotations

import ast
import math
from functools import cached_property

import numpy as np

__all__ = ["Expr", "ExpressionError", "sigmoid"]


class ExpressionError(ValueError):
    """Raised for malformed or disallowed expression strings."""


def sigmoid(z):
    """Logistic function, written through tanh so it never overflows."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_VARS = ("x", "t")
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _check(node: ast.AST, source: str) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, source)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {source!r}")
        _check(node.left, source)
        _check(node.right, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.UAdd, ast.USub)):
            raise ExpressionError(f"unary operator not allowed in {source!r}")
        _check(node.operand, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError(f"unknown function in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"functions take exactly one argument in {source!r}")
        _check(node.args[0], source)
    elif isinstance(node, ast.Name):
        if node.id not in _VARS and node.id not in _CONSTS:
            raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
    elif isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant in {source!r}")
    else:
        raise ExpressionError(f"syntax {type(node).__name__} not allowed in {source!r}")


_NAMESPACE = {"__builtins__": {}, **_FUNCS, **_CONSTS}


class Expr:
    """A parsed expression ``f(x, t)``, immutable and vectorised.

    One-variable targets reuse the same class: initial data are evaluated at
    ``t = 0`` and boundary data at the fixed boundary abscissa.

    >>> Expr("1 + 0.5*x*sin(2*pi*x)")(np.array([0.25]), 0.0)
    array([1.125])
    """

    def __init__(self, source: str | float | int):
        if isinstance(source, (int, float)):
            source = repr(float(source))
        if not isinstance(source, str) or not source.strip():
            raise ExpressionError("expression must be a non-empty string")
        try:
            tree = ast.parse(source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None
        _check(tree, source)
        self.source = source.strip()
        self._tree = tree.body
        # whitelisted tree only: names resolve to numpy functions and x, t
        self._code = compile(tree, "<expr>", "eval")

    def __call__(self, x, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        with np.errstate(over="ignore"):
            val = eval(self._code, _NAMESPACE, {"x": x, "t": t})
        shape = np.broadcast_shapes(x.shape, t.shape)
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy()

    @cached_property
    def names(self) -> frozenset[str]:
        """Variables and constants referenced (function names excluded)."""
        return frozenset(n.id for n in ast.walk(self._tree) if isinstance(n, ast.Name) and n.id not in _FUNCS)

    @property
    def is_zero(self) -> bool:
        return isinstance(self._tree, ast.Constant) and float(self._tree.value) == 0.0

    def __eq__(self, other):
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self):
        return hash(self.source)

    def __repr__(self):
        return f"Expr({self.source!r})"
