"""CSV exchange format for fields on a space-time grid.

One row per grid node, x varying slowest. Columns are ``x,t,u`` followed by
``u_0 .. u_p`` when per-order fields are present. Reference solutions use the
same layout without the order columns, so compare tooling reads either.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import Grid, GridField
from .problem import SpaceTimeDomain

__all__ = ["write_field_csv", "read_field_csv", "write_rows_csv"]


def write_field_csv(path: str | Path, field: GridField, orders: Sequence[GridField] = ()) -> None:
    g = field.grid
    X, T = g.mesh()
    cols = [X.ravel(), T.ravel(), field.values.ravel()] + [o.values.ravel() for o in orders]
    header = ["x", "t", "u"] + [f"u_{i}" for i in range(len(orders))]
    data = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def read_field_csv(path: str | Path, domain: SpaceTimeDomain | None = None):
    """Inverse of :func:`write_field_csv`; returns ``(field, orders)``.

    The grid is recovered from the distinct coordinates. Without ``domain``
    the extent is taken from the file (``x_min``, ``x_max``, ``t_max``).
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[:3] != ["x", "t", "u"]:
        raise ValueError(f"{path}: unexpected header {header}")
    xs, ts = np.unique(data[:, 0]), np.unique(data[:, 1])
    if domain is None:
        domain = SpaceTimeDomain(float(xs[0]), float(xs[-1]), float(ts[-1]))
    grid = Grid(xs.size, ts.size, domain)
    shape = grid.shape
    field = GridField(data[:, 2].reshape(shape), grid)
    orders = [GridField(data[:, 3 + i].reshape(shape), grid) for i in range(len(header) - 3)]
    return field, orders


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v
