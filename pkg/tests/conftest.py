import numpy as np
import pytest

from cofrk.basis import build_basis, build_default_basis
from cofrk.coregionalization import ModelParams
from cofrk.domain import Footprint, build_bau_grid
from cofrk.likelihood import build_stacked_model

UNIT = (0.0, 1.0, 0.0, 1.0)


def random_params(rng, p, q=0):
    r0 = rng.uniform(-0.9 / max(p - 1, 1), 0.9) if p > 1 else 0.0
    return ModelParams(
        sigma2_s=rng.uniform(0.3, 1.5, p),
        sigma2_xi=rng.uniform(0.005, 0.2, p),
        sigma2_eps=rng.uniform(1e-4, 0.05, p),
        kappa0=rng.uniform(-1.0, 1.0),
        r0=r0,
        r1=rng.uniform(0.0, 2.0) if p > 1 else 0.0,
        beta=rng.normal(size=(p, q)),
    )


def random_instance(seed, p=2, n=(40, 60), q=0, basis=None, nx=12, ny=12, areal=0, hetero=False):
    """Small stacked model with random points (and optionally areal footprints).

    ``areal`` rectangles per process are appended; overlapping rectangles share
    BAUs, which exercises the grouped noise blocks.
    """
    rng = np.random.default_rng(seed)
    grid = build_bau_grid(UNIT, nx, ny)
    basis = basis or build_default_basis(UNIT)
    params = random_params(rng, p, q)
    if hetero:
        params.v_xi = [rng.uniform(0.5, 2.0, grid.n_cells) for _ in range(p)]
    supports, values, v_eps = [], [], []
    for j in range(p):
        nj = n[j] if j < len(n) else n[-1]
        fps = [Footprint.point(f"p{j}_{i}", *rng.uniform(0, 1, 2), j) for i in range(nj)]
        for k in range(areal):
            x0, y0 = rng.uniform(0, 0.7, 2)
            w, h = rng.uniform(0.1, 0.3, 2)
            fps.append(Footprint.rect(f"a{j}_{k}", x0, x0 + w, y0, y0 + h, j))
        supports.append(fps)
        values.append(rng.normal(size=len(fps)))
        v_eps.append(rng.uniform(0.5, 2.0, len(fps)) if hetero else np.ones(len(fps)))
    F = rng.normal(size=(grid.n_cells, q)) if q else None
    model = build_stacked_model(grid, basis, supports, values, params, F=F, v_eps=v_eps)
    return model, params


@pytest.fixture
def small_basis():
    return build_basis(UNIT, [2, 3], [0.8, 0.4])
