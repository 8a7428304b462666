import json

import numpy as np
import pytest

from cofrk.coregionalization import ModelParams
from cofrk.domain import Footprint
from cofrk.errors import ParseError
from cofrk.formats import (
    RunSettings, load_config, read_dataset, read_params, read_regions, write_dataset, write_params, write_rows,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_without_file():
    s = RunSettings()
    assert (s.nx, s.ny, s.lattices, s.scales) == (30, 30, (3, 9), (0.936, 0.234))
    np.testing.assert_allclose(s.params.sigma2_s, [0.7, 0.7])
    assert s.params.kappa0 == 0.05 and (s.params.r0, s.params.r1) == (0.9, 0.5)
    assert s.scenario_config().n_train == 800


def test_full_config_round_trip(tmp_path):
    path = write(tmp_path, "run.ini", """
[domain]
bounds = 0, 2, 0, 1
nx = 20
ny = 10

[basis]
lattices = 2, 6
scales = 1.0, 0.3

[params]
sigma2_s = 0.5, 0.6, 0.7
sigma2_xi = 0.02, 0.02, 0.02
sigma2_eps = 0.001, 0.001, 0.001
kappa0 = 0.2
r0 = 0.4
r1 = 1.0

[init]
kappa0 = 0.3

[fit]
rel_tol = 1e-5
max_iter = 50
covariates = intercept
fixed = kappa0, r

[scenario]
n_total = 500
n_train = 400
reps = 3
seed = 11
sample_fraction = 0.5, 1, 1
missing = fixed:0.1
""")
    s = load_config(path)
    assert s.bounds == (0.0, 2.0, 0.0, 1.0) and (s.nx, s.ny) == (20, 10)
    assert s.params.p == 3 and s.params.r0 == 0.4
    assert s.init == {"kappa0": 0.3}
    assert s.fit.rel_tol == 1e-5 and s.fit.max_iter == 50 and s.fit.fixed == ("kappa0", "r")
    assert s.covariates == "intercept"
    cfg = s.scenario_config()
    assert (cfg.n_total, cfg.n_train, cfg.n_test, cfg.reps, cfg.seed) == (500, 400, 100, 3, 11)
    assert cfg.missing == ("fixed", 0.1) and cfg.sample_fraction == (0.5, 1.0, 1.0)


@pytest.mark.parametrize("body,line,fragment", [
    ("[domain]\nnx = 3\n[colour]\nhue = 1\n", 3, "unknown section"),
    ("[domain]\nnx = 3\nwidth = 4\n", 3, "unknown key"),
    ("[domain]\nnx = 3\nny = many\n", 3, "domain.ny"),
    ("[fit]\n\nrel_tol = 1e-4\ncovariates = quadratic\n", 4, "covariates"),
    ("nx = 3\n", 1, "outside any section"),
    ("[scenario]\nmissing = fixed:half\n", 2, "missing"),
    ("[basis]\nlattices = 3, 9\nscales = 0.5\n", 3, "one scale per lattice"),
    ("[domain]\nnx = 3\nnx = 4\n", 3, "nx"),
    ("[domain]\nnx = 3\njust words\n", 3, "cannot parse"),
])
def test_config_errors_carry_line_numbers(tmp_path, body, line, fragment):
    path = write(tmp_path, "bad.ini", body)
    with pytest.raises(ParseError) as info:
        load_config(path)
    assert info.value.lineno == line
    assert fragment in str(info.value) and f":{line}:" in str(info.value)


def test_invalid_parameter_values_rejected(tmp_path):
    path = write(tmp_path, "bad.ini", "[params]\nsigma2_s = 0.7, -1\n")
    with pytest.raises(ParseError):
        load_config(path)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    xy = [rng.uniform(0, 1, (5, 2)), rng.uniform(0, 1, (3, 2))]
    z = [rng.normal(size=5), rng.normal(size=3)]
    path = tmp_path / "d.csv"
    write_dataset(path, xy, z)
    ds = read_dataset(path)
    assert ds.p == 2
    for j in range(2):
        np.testing.assert_array_equal(ds.supports[j], xy[j])
        np.testing.assert_array_equal(ds.values[j], z[j])


def test_dataset_with_footprints(tmp_path):
    path = write(tmp_path, "d.csv", "process_id,x,y,value,footprint_id,xmin,xmax,ymin,ymax\n"
                                    "1,0.2,0.2,1.5,,,,,\n"
                                    "1,,,2.5,county,0,0.5,0,0.5\n")
    ds = read_dataset(path)
    fps = ds.supports[0]
    assert isinstance(fps[1], Footprint) and fps[1].id == "county"
    np.testing.assert_array_equal(ds.values[0], [1.5, 2.5])


@pytest.mark.parametrize("text,line,fragment", [
    ("", 1, "empty"),
    ("pid,x,y,value\n", 1, "header"),
    ("process_id,x,y,value\n1,0.1,0.2\n", 2, "fields"),
    ("process_id,x,y,value\n1,0.1,0.2,0.3\nA,0.1,0.2,0.3\n", 3, "process_id"),
    ("process_id,x,y,value\n1,0.1,0.2,nan\n", 2, "finite"),
    ("process_id,x,y,value\n0,0.1,0.2,1\n", 2, "1 or larger"),
    ("process_id,x,y,value\n1,0.1,zero,1\n", 2, "y"),
    ("process_id,x,y,value\n2,0.1,0.2,1\n", 0, "contiguous"),
    ("process_id,x,y,value,footprint_id,xmin,xmax,ymin,ymax\n1,,,1,a,0.5,0.1,0,1\n", 2, "inverted"),
])
def test_dataset_errors(tmp_path, text, line, fragment):
    path = write(tmp_path, "d.csv", text)
    with pytest.raises(ParseError) as info:
        read_dataset(path)
    assert info.value.lineno == line and fragment in str(info.value)


def test_regions(tmp_path):
    path = write(tmp_path, "r.csv", "region_id,xmin,xmax,ymin,ymax\nnorth,0,1,0.5,1\nsouth,0,1,0,0.5\n")
    regions = read_regions(path)
    assert [r.id for r in regions] == ["north", "south"]
    bad = write(tmp_path, "b.csv", "region_id,xmin,xmax,ymin,ymax\nx,0,1,0.5\n")
    with pytest.raises(ParseError) as info:
        read_regions(bad)
    assert info.value.lineno == 2


def test_params_json_round_trip(tmp_path):
    params = ModelParams(sigma2_s=[0.5, 0.9], sigma2_xi=[0.01, 0.02], sigma2_eps=[1e-4, 2e-4],
                         kappa0=0.123456789, r0=-0.3, r1=1.5, beta=[[1.0], [2.0]])
    path = tmp_path / "p.json"
    write_params(path, params)
    back = read_params(path)
    np.testing.assert_array_equal(back.sigma2_s, params.sigma2_s)
    np.testing.assert_array_equal(back.beta, params.beta)
    assert (back.kappa0, back.r0, back.r1) == (params.kappa0, params.r0, params.r1)
    assert "version" in json.loads(path.read_text())


def test_write_rows_formats_missing_as_empty(tmp_path):
    path = tmp_path / "rows.csv"
    write_rows(path, [{"a": 1, "b": None, "c": 0.1}, {"a": 2, "b": 3.5, "c": 1e-20}])
    assert path.read_text().splitlines() == ["a,b,c", "1,,0.1", "2,3.5,1e-20"]
