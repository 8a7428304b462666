"""File formats: run configuration (INI), dataset and region CSVs, params JSON."""

from __future__ import annotations

import configparser
import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coregionalization import ModelParams
from .domain import Footprint
from .em import FitConfig
from .errors import ConfigError, ParseError
from .simulate import ScenarioConfig, default_params

DATASET_HEADER = ["process_id", "x", "y", "value"]
FOOTPRINT_COLUMNS = ["footprint_id", "xmin", "xmax", "ymin", "ymax"]
REGION_HEADER = ["region_id", "xmin", "xmax", "ymin", "ymax"]

# section -> key -> kind; kinds: float, int, floats, ints, str
CONFIG_SCHEMA = {
    "domain": {"bounds": "floats", "nx": "int", "ny": "int"},
    "basis": {"lattices": "ints", "scales": "floats"},
    "params": {"sigma2_s": "floats", "sigma2_xi": "floats", "sigma2_eps": "floats", "kappa0": "float",
               "r0": "float", "r1": "float", "nu": "floats"},
    "init": {"sigma2_s": "floats", "sigma2_xi": "floats", "kappa0": "float", "r0": "float", "r1": "float"},
    "fit": {"rel_tol": "float", "max_iter": "int", "inner_tol": "float", "inner_max_eval": "int",
            "ridge_lambda": "float", "covariates": "str", "fixed": "str"},
    "scenario": {"n_total": "int", "n_train": "int", "n_test": "int", "reps": "int", "seed": "int",
                 "sample_fraction": "floats", "missing": "str", "missing_process": "int"},
}


@dataclass
class RunSettings:
    """Everything a config file can set; defaults reproduce the bivariate simulation setup."""

    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    nx: int = 30
    ny: int = 30
    lattices: tuple = (3, 9)
    scales: tuple = (0.936, 0.234)
    params: ModelParams = field(default_factory=default_params)
    init: dict = field(default_factory=dict)
    fit: FitConfig = field(default_factory=FitConfig)
    covariates: str = "none"
    scenario: dict = field(default_factory=dict)

    def scenario_config(self, **overrides) -> ScenarioConfig:
        kw = dict(bounds=self.bounds, nx=self.nx, ny=self.ny, lattices=self.lattices, scales=self.scales,
                  params=self.params, fit=self.fit)
        kw.update(self.scenario)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return ScenarioConfig(**kw)


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = i
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = i
    return lines


def _convert(kind: str, raw: str):
    if kind == "str":
        return raw.strip()
    parts = [p for p in re.split(r"[,\s]+", raw.strip()) if p]
    if kind == "float":
        if len(parts) != 1:
            raise ValueError("expected one number")
        return float(parts[0])
    if kind == "int":
        if len(parts) != 1:
            raise ValueError("expected one integer")
        return int(parts[0])
    if kind == "floats":
        return tuple(float(p) for p in parts)
    if kind == "ints":
        return tuple(int(p) for p in parts)
    raise AssertionError(kind)


def _parse_missing(value: str):
    if value in ("", "none"):
        return None
    kind, *nums = value.split(":")
    return (kind, *[float(n) for n in nums])


def load_config(path) -> RunSettings:
    path = str(path)
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path)
    # MissingSectionHeaderError subclasses ParsingError, so it goes first
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(path, exc.lineno, "key outside any section") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ParseError(path, lineno, f"cannot parse line {line!r}") from exc
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ParseError(path, exc.lineno, exc.message.split(":")[-1].strip()) from exc
    where = _key_lines(text)
    values: dict = {}
    for section in parser.sections():
        line = where.get((section, None), 0)
        if section not in CONFIG_SCHEMA:
            raise ParseError(path, line, f"unknown section [{section}]")
        for key, raw in parser.items(section):
            line = where.get((section, key), 0)
            kind = CONFIG_SCHEMA[section].get(key)
            if kind is None:
                raise ParseError(path, line, f"unknown key {key!r} in [{section}]")
            try:
                values[(section, key)] = _convert(kind, raw)
            except ValueError as exc:
                raise ParseError(path, line, f"{section}.{key}: {exc}") from exc

    def get(section, key, default):
        return values.get((section, key), default)

    def fail(section, key, msg):
        raise ParseError(path, where.get((section, key), where.get((section, None), 0)), msg)

    s = RunSettings()
    try:
        s.bounds = get("domain", "bounds", s.bounds)
        if len(s.bounds) != 4:
            fail("domain", "bounds", "bounds needs four numbers xmin, xmax, ymin, ymax")
        s.nx, s.ny = get("domain", "nx", s.nx), get("domain", "ny", s.ny)
        s.lattices = get("basis", "lattices", s.lattices)
        s.scales = get("basis", "scales", s.scales)
        if len(s.lattices) != len(s.scales):
            fail("basis", "scales", "need one scale per lattice")
        base = s.params
        pk = {k: get("params", k, None) for k in CONFIG_SCHEMA["params"]}
        p = len(pk["sigma2_s"]) if pk["sigma2_s"] else base.p
        if pk["sigma2_s"] is not None and p != base.p:
            base = default_params(p)
        s.params = ModelParams(
            sigma2_s=pk["sigma2_s"] or base.sigma2_s, sigma2_xi=pk["sigma2_xi"] or base.sigma2_xi,
            sigma2_eps=pk["sigma2_eps"] or base.sigma2_eps,
            kappa0=base.kappa0 if pk["kappa0"] is None else pk["kappa0"],
            r0=base.r0 if pk["r0"] is None else pk["r0"], r1=base.r1 if pk["r1"] is None else pk["r1"],
            nu=pk["nu"] or None,
        )
        s.params.validate()
        s.init = {k: get("init", k, None) for k in CONFIG_SCHEMA["init"] if get("init", k, None) is not None}
        fk = {k: get("fit", k, None) for k in ("rel_tol", "max_iter", "inner_tol", "inner_max_eval",
                                              "ridge_lambda")}
        fixed = tuple(f for f in re.split(r"[,\s]+", get("fit", "fixed", "")) if f)
        s.fit = FitConfig(**{k: v for k, v in fk.items() if v is not None}, fixed=fixed)
        s.covariates = get("fit", "covariates", "none")
        if s.covariates not in ("none", "intercept"):
            fail("fit", "covariates", "covariates must be 'none' or 'intercept'")
        sc = {}
        for key in ("n_total", "n_train", "n_test", "reps", "seed", "missing_process"):
            if ("scenario", key) in values:
                sc[key] = values[("scenario", key)]
        if ("scenario", "sample_fraction") in values:
            sc["sample_fraction"] = values[("scenario", "sample_fraction")]
        if ("scenario", "missing") in values:
            try:
                sc["missing"] = _parse_missing(values[("scenario", "missing")])
            except ValueError:
                fail("scenario", "missing", "missing must look like fixed:0.25 or random:0.02:0.75")
        if "n_total" in sc and "n_test" not in sc:
            sc["n_test"] = sc["n_total"] - sc.get("n_train", 800)
        s.scenario = sc
        s.scenario_config()
    except ParseError:
        raise
    except (ValueError, TypeError) as exc:
        raise ParseError(path, 0, str(exc)) from exc
    return s


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Observations grouped by process (0-based internally, 1-based in files)."""

    supports: list
    values: list

    @property
    def p(self) -> int:
        return len(self.values)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(path, supports, values) -> None:
    """Point observations only; ``supports[j]`` is an ``(n_j, 2)`` array."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for j, (xy, z) in enumerate(zip(supports, values)):
            for (x, y), v in zip(np.asarray(xy).reshape(-1, 2), np.asarray(z).ravel()):
                w.writerow([j + 1, _fmt(x), _fmt(y), _fmt(v)])


def _num(path, lineno, name, raw) -> float:
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise ParseError(path, lineno, f"{name}: not a number: {raw!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, lineno, f"{name}: value must be finite")
    return v


def read_dataset(path) -> Dataset:
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if header[:4] != DATASET_HEADER:
            raise ParseError(path, 1, f"header must start with {','.join(DATASET_HEADER)}")
        extra = header[4:]
        if extra and extra != FOOTPRINT_COLUMNS:
            raise ParseError(path, 1, f"optional columns must be {','.join(FOOTPRINT_COLUMNS)}")
        rows: dict[int, list] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) not in (4, 4 + len(extra)) or (len(rec) > 4 and not extra):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(rec)}")
            try:
                pid = int(rec[0])
            except ValueError:
                raise ParseError(path, lineno, f"process_id: not an integer: {rec[0]!r}") from None
            if pid < 1:
                raise ParseError(path, lineno, "process_id must be 1 or larger")
            value = _num(path, lineno, "value", rec[3])
            fp_cols = rec[4:] if len(rec) > 4 else []
            if fp_cols and any(c.strip() for c in fp_cols[1:]):
                xmin, xmax, ymin, ymax = (_num(path, lineno, n, c) for n, c in zip(FOOTPRINT_COLUMNS[1:], fp_cols[1:]))
                if xmax < xmin or ymax < ymin:
                    raise ParseError(path, lineno, "footprint rectangle is inverted")
                fid = fp_cols[0].strip() or f"line{lineno}"
                geom = Footprint.rect(fid, xmin, xmax, ymin, ymax, pid - 1)
            else:
                x, y = _num(path, lineno, "x", rec[1]), _num(path, lineno, "y", rec[2])
                geom = (x, y)
            rows.setdefault(pid, []).append((geom, value, lineno))
    if not rows:
        raise ParseError(path, 2, "no observations")
    p = max(rows)
    missing = sorted(set(range(1, p + 1)) - set(rows))
    if missing:
        raise ParseError(path, 0, f"process ids must be contiguous from 1; missing {missing}")
    supports, values = [], []
    for pid in range(1, p + 1):
        recs = rows[pid]
        values.append(np.array([r[1] for r in recs]))
        if all(isinstance(r[0], tuple) for r in recs):
            supports.append(np.array([r[0] for r in recs], dtype=float).reshape(-1, 2))
        else:
            supports.append([r[0] if isinstance(r[0], Footprint) else Footprint.point(f"line{r[2]}", *r[0], pid - 1)
                             for r in recs])
    return Dataset(supports, values)


def read_regions(path) -> list[Footprint]:
    path = str(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != REGION_HEADER:
            raise ParseError(path, 1, f"header must be {','.join(REGION_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 5:
                raise ParseError(path, lineno, f"expected 5 fields, got {len(rec)}")
            xmin, xmax, ymin, ymax = (_num(path, lineno, n, c) for n, c in zip(REGION_HEADER[1:], rec[1:]))
            if xmax < xmin or ymax < ymin:
                raise ParseError(path, lineno, "region rectangle is inverted")
            out.append(Footprint.rect(rec[0].strip(), xmin, xmax, ymin, ymax))
    return out


def write_rows(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """CSV of dict rows; floats in shortest round-trip form, ``None`` as empty."""
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            out = []
            for c in columns:
                v = r.get(c)
                if v is None:
                    out.append("")
                elif isinstance(v, (bool, np.bool_)):
                    out.append(str(bool(v)).lower())
                elif isinstance(v, (float, np.floating)):
                    out.append(_fmt(v))
                else:
                    out.append(str(v))
            w.writerow(out)


# ---------------------------------------------------------------- params JSON

def write_params(path, params: ModelParams) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


def read_params(path) -> ModelParams:
    path = str(path)
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from exc
    try:
        return ModelParams.from_dict(d).validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid params ({exc})") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
