import numpy as np
import pytest

from cofrk.domain import (
    Footprint, build_bau_grid, build_obs_aggregation, build_pred_aggregation, point_aggregation,
)
from cofrk.errors import EmptyFootprintError, InvalidArgumentError

UNIT = (0.0, 1.0, 0.0, 1.0)


def test_grid_2x2_layout():
    g = build_bau_grid(UNIT, 2, 2)
    assert g.n_cells == 4
    np.testing.assert_allclose(g.areas, 0.25)
    np.testing.assert_allclose(g.centroids, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


def test_grid_single_cell():
    g = build_bau_grid(UNIT, 1, 1)
    np.testing.assert_allclose(g.centroids, [[0.5, 0.5]])
    np.testing.assert_allclose(g.areas, [1.0])


def test_grid_rectangular_bounds():
    g = build_bau_grid((0, 2, 0, 1), 2, 1)
    np.testing.assert_allclose(g.areas, [1.0, 1.0])


def test_grid_tiles_bounds():
    g = build_bau_grid((-1, 3, 2, 5), 7, 5)
    assert g.areas.sum() == pytest.approx(12.0)
    cells = [g.cell_bounds(i) for i in range(g.n_cells)]
    assert min(c[0] for c in cells) == pytest.approx(-1) and max(c[1] for c in cells) == pytest.approx(3)


@pytest.mark.parametrize("args", [(UNIT, 0, 2), (UNIT, 2, -1), ((0, 0, 0, 1), 2, 2), ((0, 1, 1, 1), 1, 1)])
def test_grid_rejects_bad_input(args):
    with pytest.raises(InvalidArgumentError):
        build_bau_grid(*args)


def test_point_footprint_maps_to_containing_bau():
    g = build_bau_grid(UNIT, 2, 2)
    C = build_obs_aggregation(g, [Footprint.point("a", 0.9, 0.8)])
    np.testing.assert_array_equal(C.toarray(), [[0, 0, 0, 1]])


def test_edge_point_goes_to_larger_index():
    g = build_bau_grid(UNIT, 2, 2)
    assert g.locate(0.5, 0.25)[0] == 1
    assert g.locate(0.25, 0.5)[0] == 2
    assert g.locate(0.5, 0.5)[0] == 3
    # outer boundary stays inside
    assert g.locate(1.0, 1.0)[0] == 3
    assert g.locate(0.0, 0.0)[0] == 0


def test_point_outside_bounds_rejected():
    g = build_bau_grid(UNIT, 2, 2)
    with pytest.raises(InvalidArgumentError):
        g.locate(1.2, 0.5)


def test_rect_covering_everything():
    g = build_bau_grid(UNIT, 2, 2)
    C = build_obs_aggregation(g, [Footprint.rect("all", 0, 1, 0, 1)])
    np.testing.assert_allclose(C.toarray(), [[0.25] * 4])


def test_rect_covering_bottom_row():
    g = build_bau_grid(UNIT, 2, 2)
    C = build_obs_aggregation(g, [Footprint.rect("b", 0, 1, 0, 0.5)])
    np.testing.assert_allclose(C.toarray(), [[0.5, 0.5, 0, 0]])


def test_empty_footprint_names_id():
    g = build_bau_grid(UNIT, 2, 2)
    with pytest.raises(EmptyFootprintError, match="tiny"):
        build_obs_aggregation(g, [Footprint.rect("tiny", 0.01, 0.02, 0.01, 0.02)])


def test_pred_aggregation_examples():
    g = build_bau_grid(UNIT, 2, 2)
    one = build_pred_aggregation(g, [Footprint.rect("c", 0.6, 0.9, 0.6, 0.9)])
    np.testing.assert_allclose(one.toarray(), [[0, 0, 0, 1]])
    whole = build_pred_aggregation(g, [Footprint.rect("w", 0, 1, 0, 1)])
    np.testing.assert_allclose(whole.toarray(), [[0.25] * 4])
    halves = build_pred_aggregation(g, [Footprint.rect("lo", 0, 1, 0, 0.5), Footprint.rect("hi", 0, 1, 0.5, 1)])
    np.testing.assert_allclose(halves.toarray(), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])


def test_unequal_areas_weight_by_area():
    # hand-built grid with unequal areas checks the |A_b| weights directly
    g = build_bau_grid(UNIT, 2, 1)
    g2 = type(g)(g.bounds, g.nx, g.ny, g.centroids, np.array([1.0, 3.0]))
    C = build_obs_aggregation(g2, [Footprint.rect("all", 0, 1, 0, 1)])
    np.testing.assert_allclose(C.toarray(), [[0.25, 0.75]])


def test_row_stochastic_and_partition():
    rng = np.random.default_rng(0)
    g = build_bau_grid(UNIT, 9, 7)
    fps = []
    for i in range(40):
        x0, y0 = rng.uniform(0, 0.6, 2)
        fps.append(Footprint.rect(i, x0, x0 + 0.4, y0, y0 + 0.4))
    C = build_obs_aggregation(g, fps)
    np.testing.assert_allclose(np.asarray(C.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert C.min() >= 0 and C.max() <= 1
    # regions partitioning the grid: each BAU in exactly one row's support
    parts = [Footprint.rect(k, k / 3, (k + 1) / 3 - 1e-9 if k < 2 else 1.0, 0, 1) for k in range(3)]
    P = build_pred_aggregation(g, parts)
    counts = np.asarray((P > 0).sum(axis=0)).ravel()
    np.testing.assert_array_equal(counts, 1)


def test_point_aggregation_matches_footprints():
    rng = np.random.default_rng(1)
    g = build_bau_grid(UNIT, 5, 4)
    xy = rng.uniform(0, 1, (30, 2))
    a = point_aggregation(g, xy).toarray()
    b = build_obs_aggregation(g, [Footprint.point(i, *p) for i, p in enumerate(xy)]).toarray()
    np.testing.assert_array_equal(a, b)


def test_deterministic():
    g = build_bau_grid(UNIT, 4, 4)
    fps = [Footprint.rect(0, 0.1, 0.6, 0.2, 0.9), Footprint.point(1, 0.3, 0.3)]
    a, b = build_obs_aggregation(g, fps), build_obs_aggregation(g, fps)
    assert (a != b).nnz == 0
