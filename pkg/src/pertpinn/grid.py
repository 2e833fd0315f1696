"""Uniform space-time tensor grids and fields sampled on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import SpaceTimeDomain

__all__ = ["Grid", "GridField"]


@dataclass(frozen=True)
class Grid:
    n_x: int
    n_t: int
    domain: SpaceTimeDomain

    def __post_init__(self):
        if self.n_x < 2 or self.n_t < 2:
            raise ValueError("grid needs at least two nodes per axis")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.domain.x_min, self.domain.x_max, self.n_x)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.domain.t_max, self.n_t)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_t)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, T)`` arrays of shape ``(n_x, n_t)``."""
        return np.meshgrid(self.x, self.t, indexing="ij")

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        X, T = self.mesh()
        return X.ravel(), T.ravel()


@dataclass(frozen=True, eq=False)
class GridField:
    """Values on a :class:`Grid`, indexed ``values[i_x, i_t]``."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def check_compatible(self, other: "GridField") -> None:
        if other.grid != self.grid:
            raise ValueError(f"grid mismatch: {self.grid} vs {other.grid}")
