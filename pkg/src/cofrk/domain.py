"""BAU discretization and the aggregation matrices tying BAUs to supports.

Supports (observation footprints and prediction regions) are points or
axis-aligned rectangles. A BAU belongs to a support when its centroid lies
inside it; a point support maps to the single BAU containing the point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyFootprintError, InvalidArgumentError


@dataclass(frozen=True)
class BAUGrid:
    """Regular ``nx`` by ``ny`` grid of cells over a rectangle, row-major."""

    bounds: tuple[float, float, float, float]
    nx: int
    ny: int
    centroids: np.ndarray = field(repr=False)
    areas: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return (self.bounds[1] - self.bounds[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.bounds[3] - self.bounds[2]) / self.ny

    def cell_bounds(self, cell: int) -> tuple[float, float, float, float]:
        ix, iy = cell % self.nx, cell // self.nx
        x0, y0 = self.bounds[0] + ix * self.dx, self.bounds[2] + iy * self.dy
        return (x0, x0 + self.dx, y0, y0 + self.dy)

    def locate(self, x, y) -> np.ndarray:
        """Index of the cell containing each point.

        A point on a shared edge goes to the candidate cell with the larger
        row-major index; points on the outer boundary go to the adjacent cell.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        xmin, xmax, ymin, ymax = self.bounds
        outside = (x < xmin) | (x > xmax) | (y < ymin) | (y > ymax)
        if np.any(outside):
            i = int(np.flatnonzero(outside)[0])
            raise InvalidArgumentError(f"point ({x[i]}, {y[i]}) lies outside the grid bounds")
        # floor() sends an edge point to the upper cell, which is the larger index
        ix = np.minimum(np.floor((x - xmin) / self.dx).astype(int), self.nx - 1)
        iy = np.minimum(np.floor((y - ymin) / self.dy).astype(int), self.ny - 1)
        return iy * self.nx + ix


def build_bau_grid(bounds: Sequence[float], nx: int, ny: int) -> BAUGrid:
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentError(f"degenerate bounds {tuple(bounds)}")
    nx, ny = int(nx), int(ny)
    dx, dy = (xmax - xmin) / nx, (ymax - ymin) / ny
    cx = xmin + (np.arange(nx) + 0.5) * dx
    cy = ymin + (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(cx, cy)  # row-major: x varies fastest
    centroids = np.column_stack([gx.ravel(), gy.ravel()])
    areas = np.full(nx * ny, dx * dy)
    return BAUGrid((xmin, xmax, ymin, ymax), nx, ny, centroids, areas)


@dataclass(frozen=True)
class Footprint:
    """A point ``(x, y)`` or rectangle ``(xmin, xmax, ymin, ymax)`` support."""

    id: object
    geometry: tuple
    process_id: int = 0

    @property
    def is_point(self) -> bool:
        return len(self.geometry) == 2

    @classmethod
    def point(cls, id, x, y, process_id=0):
        return cls(id, (float(x), float(y)), process_id)

    @classmethod
    def rect(cls, id, xmin, xmax, ymin, ymax, process_id=0):
        if not (xmax >= xmin and ymax >= ymin):
            raise InvalidArgumentError(f"footprint {id!r}: inverted rectangle")
        return cls(id, (float(xmin), float(xmax), float(ymin), float(ymax)), process_id)


def _support_members(grid: BAUGrid, fp: Footprint) -> np.ndarray:
    if fp.is_point:
        return grid.locate(fp.geometry[0], fp.geometry[1])
    xmin, xmax, ymin, ymax = fp.geometry
    c = grid.centroids
    inside = (c[:, 0] >= xmin) & (c[:, 0] <= xmax) & (c[:, 1] >= ymin) & (c[:, 1] <= ymax)
    return np.flatnonzero(inside)


def _aggregation(grid: BAUGrid, supports: Sequence[Footprint]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for m, fp in enumerate(supports):
        members = _support_members(grid, fp)
        if members.size == 0:
            raise EmptyFootprintError(fp.id)
        w = grid.areas[members]
        rows.append(np.full(members.size, m))
        cols.append(members)
        vals.append(w / w.sum())
    if not supports:
        return sp.csr_matrix((0, grid.n_cells))
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(supports), grid.n_cells),
    )
    mat.sort_indices()
    return mat


def build_obs_aggregation(grid: BAUGrid, footprints: Sequence[Footprint]) -> sp.csr_matrix:
    """Observation matrix C_Z: one area-weighted averaging row per footprint."""
    return _aggregation(grid, footprints)


def build_pred_aggregation(grid: BAUGrid, regions: Sequence[Footprint]) -> sp.csr_matrix:
    """Prediction matrix C_P; same construction as :func:`build_obs_aggregation`."""
    return _aggregation(grid, regions)


def point_aggregation(grid: BAUGrid, xy: np.ndarray) -> sp.csr_matrix:
    """Vectorized C_Z for a batch of point observations."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    cells = grid.locate(xy[:, 0], xy[:, 1])
    n = xy.shape[0]
    return sp.csr_matrix((np.ones(n), (np.arange(n), cells)), shape=(n, grid.n_cells))
