"""Multiresolution lattice basis of bisquare functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .domain import BAUGrid
from .errors import InvalidArgumentError

DEFAULT_LATTICES = (3, 9)
DEFAULT_SCALES = (0.936, 0.234)


def eval_parent_bisquare(r):
    """Bisquare parent ``(1 - r^2)^2`` on ``r <= 1``, zero beyond."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise InvalidArgumentError("bisquare distance must be nonnegative")
    out = np.where(r <= 1.0, (1.0 - r * r) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BasisLevel:
    gx: int
    gy: int
    scale: float
    centers: np.ndarray

    @property
    def size(self) -> int:
        return self.gx * self.gy


@dataclass(frozen=True)
class BasisSystem:
    bounds: tuple[float, float, float, float]
    levels: tuple[BasisLevel, ...]

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(lv.size for lv in self.levels)

    @property
    def R(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        """Start column of each level block in Phi (length ``L + 1``)."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)


def lattice_centers(bounds, gx: int, gy: int) -> np.ndarray:
    """Centers of a ``gx`` by ``gy`` uniform partition, row-major."""
    xmin, xmax, ymin, ymax = bounds
    cx = xmin + (np.arange(gx) + 0.5) * (xmax - xmin) / gx
    cy = ymin + (np.arange(gy) + 0.5) * (ymax - ymin) / gy
    mx, my = np.meshgrid(cx, cy)
    return np.column_stack([mx.ravel(), my.ravel()])


def build_basis(bounds, lattices: Sequence, scales: Sequence[float]) -> BasisSystem:
    """Basis with one lattice per level.

    ``lattices`` entries are either ``g`` (a g-by-g lattice) or ``(gx, gy)``.
    Scales must be strictly decreasing from coarse to fine.
    """
    bounds = tuple(float(b) for b in bounds)
    if len(lattices) != len(scales) or not lattices:
        raise InvalidArgumentError("need one scale per lattice and at least one level")
    scales = [float(s) for s in scales]
    if any(s <= 0 for s in scales):
        raise InvalidArgumentError("basis scales must be positive")
    if any(a <= b for a, b in zip(scales, scales[1:])):
        raise InvalidArgumentError("basis scales must decrease strictly with level")
    levels = []
    for g, s in zip(lattices, scales):
        gx, gy = (g, g) if np.isscalar(g) else tuple(g)
        if gx < 1 or gy < 1:
            raise InvalidArgumentError(f"invalid lattice {g}")
        levels.append(BasisLevel(int(gx), int(gy), s, lattice_centers(bounds, int(gx), int(gy))))
    return BasisSystem(bounds, tuple(levels))


def build_default_basis(bounds=(0.0, 1.0, 0.0, 1.0)) -> BasisSystem:
    """Two levels: 3x3 lattice at scale 0.936 and 9x9 at 0.234 (unit square).

    On other rectangles the scales grow with the longer side.
    """
    side = max(bounds[1] - bounds[0], bounds[3] - bounds[2])
    return build_basis(bounds, DEFAULT_LATTICES, [s * side for s in DEFAULT_SCALES])


def eval_basis(xy: np.ndarray, basis: BasisSystem) -> sp.csr_matrix:
    """Evaluate every basis function at the given locations (rows)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    blocks = []
    for lv in basis.levels:
        d = np.sqrt(((xy[:, None, :] - lv.centers[None, :, :]) ** 2).sum(axis=-1))
        blocks.append(sp.csr_matrix(eval_parent_bisquare(d / lv.scale)))
    return sp.hstack(blocks, format="csr")


def build_phi(grid: BAUGrid, basis: BasisSystem) -> sp.csr_matrix:
    """B x R basis matrix using the BAU-centroid approximation."""
    return eval_basis(grid.centroids, basis)
