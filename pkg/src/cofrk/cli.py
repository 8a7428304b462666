"""Command-line entry point: simulate, fit, predict, experiment, compare."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import simulate as sim
from .basis import build_basis
from .coregionalization import ModelParams, build_precision
from .domain import build_bau_grid, build_pred_aggregation
from .em import e_step, fit, initial_params
from .errors import CoFRKError, ConfigError
from .formats import (
    RunSettings, load_config, read_dataset, read_params, read_regions, write_dataset, write_json,
    write_params, write_rows,
)
from .likelihood import build_stacked_model
from .predict import aggregate_predictions, posterior_bau, predict_points

log = logging.getLogger("cofrk")

EXPERIMENTS = ("recovery", "imbalance", "missing_fixed", "missing_random", "correlation_sweep",
               "univariate", "confounding", "ridge")
PRESETS = ("config",) + tuple(sim.RECOVERY_SCENARIOS) + ("imbalance", "missing_fixed", "missing_random",
                                                          "univariate")


def _settings(args) -> RunSettings:
    return load_config(args.config) if args.config else RunSettings()


def _fit_config(settings: RunSettings, args):
    fc = settings.fit
    if getattr(args, "tol", None) is not None:
        fc = replace(fc, rel_tol=args.tol)
    return fc


def _params_for(settings: RunSettings, p: int, explicit: bool) -> ModelParams:
    if settings.params.p == p:
        return settings.params
    if explicit:
        raise ConfigError(f"config describes {settings.params.p} processes but the data has {p}")
    return sim.default_params(p)


def _build(settings: RunSettings, args, params: ModelParams | None = None):
    data = read_dataset(args.data)
    grid = build_bau_grid(settings.bounds, settings.nx, settings.ny)
    basis = build_basis(settings.bounds, settings.lattices, settings.scales)
    params = params or _params_for(settings, data.p, bool(args.config))
    F = np.ones((grid.n_cells, 1)) if settings.covariates == "intercept" else None
    q = 0 if F is None else 1
    shell = ModelParams(sigma2_s=params.sigma2_s, sigma2_xi=params.sigma2_xi, sigma2_eps=params.sigma2_eps,
                        kappa0=params.kappa0, beta=np.zeros((data.p, q)), nu=params.nu)
    if params.q == q:
        shell.beta = params.beta
    model = build_stacked_model(grid, basis, data.supports, data.values, shell, F=F)
    return model, shell


def _initial(model, settings: RunSettings, params: ModelParams) -> ModelParams:
    init = initial_params(model, params.sigma2_eps, params.nu)
    for key, val in settings.init.items():
        if key in ("sigma2_s", "sigma2_xi"):
            val = np.asarray(val, dtype=float)
            if val.size != model.p:
                raise ConfigError(f"init.{key} needs {model.p} values")
        setattr(init, key, val if not isinstance(val, tuple) else np.asarray(val, dtype=float))
    return init


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> None:
    settings = _settings(args)
    preset = args.scenario or "config"
    seed = args.seed if args.seed is not None else settings.scenario.get("seed", 0)
    if preset == "config":
        config = settings.scenario_config(seed=seed)
    elif preset in sim.RECOVERY_SCENARIOS:
        config = sim.recovery_config(preset, 1, seed)
    elif preset == "univariate":
        config = sim.univariate_config(seed=seed)
    else:
        config = sim.gain_configs(preset, 1, seed)[0][1]
    ds = sim.simulate_dataset(config, args.rep)
    out = _out_dir(args)
    write_dataset(out / "dataset.csv", ds.supports(), ds.train_values())
    xy = ds.locations[ds.test_idx]
    write_dataset(out / "test.csv", [xy] * ds.p, [ds.z[j, ds.test_idx] for j in range(ds.p)])
    print(f"wrote {out / 'dataset.csv'} and {out / 'test.csv'}")


def cmd_fit(args) -> None:
    settings = _settings(args)
    model, params = _build(settings, args)
    result = fit(model, _initial(model, settings, params), _fit_config(settings, args))
    out = _out_dir(args)
    write_params(out / "params.json", result.params)
    report = result.report.to_dict()
    report["params"] = result.params.to_dict()
    write_json(out / "fit_report.json", report)
    if result.report.aborted:
        raise CoFRKError(f"fit aborted: {result.report.diagnostic}")
    status = "converged" if result.report.converged else "stopped at max_iter"
    print(f"{status} after {result.report.iterations} iterations; "
          f"log-likelihood {result.report.loglik_trace[-1]:.6f}")


def cmd_predict(args) -> None:
    if not args.params:
        raise ConfigError("predict needs --params (a params JSON written by fit)")
    settings = _settings(args)
    params = read_params(args.params)
    model, _ = _build(settings, args, params)
    model = model.with_noise(params.sigma2_xi, params.sigma2_eps)
    if params.q != model.q:
        raise ConfigError(f"params have {params.q} covariates but the config implies {model.q}")
    posterior = e_step(model, build_precision(params, model.basis), params.beta)
    result = posterior_bau(model, params, posterior)
    if args.regions:
        regions = read_regions(args.regions)
        C_P = build_pred_aggregation(model.grid, regions)
        result = aggregate_predictions(result, C_P, posterior, params, model, [r.id for r in regions])
    out = _out_dir(args)
    result.write_csv(out / "predictions.csv")
    print(f"wrote {out / 'predictions.csv'}")


def cmd_compare(args) -> None:
    settings = _settings(args)
    model, params = _build(settings, args)
    fc = _fit_config(settings, args)
    test = read_dataset(args.test) if args.test else None
    fits = [("cofrk", list(range(model.p)), fit(model, _initial(model, settings, params), fc))]
    if model.p > 1:
        for j in range(model.p):
            sub = model.subset([j])
            sub_params = params.copy(sigma2_s=params.sigma2_s[[j]], sigma2_xi=params.sigma2_xi[[j]],
                                     sigma2_eps=params.sigma2_eps[[j]], beta=params.beta[[j]],
                                     nu=params.nu[[j]])
            fits.append(("independent", [j], fit(sub, _initial(sub, settings, sub_params), fc)))
    rows = []
    for tag, procs, res in fits:
        for k, j in enumerate(procs):
            row = {"model": tag, "process_id": j + 1, "loglik": res.report.loglik_trace[-1],
                   "iterations": res.report.iterations, "sigma2_s": float(res.params.sigma2_s[k]),
                   "sigma2_xi": float(res.params.sigma2_xi[k]), "kappa0": res.params.kappa0,
                   "r0": res.params.r0 if res.params.p > 1 else None,
                   "r1": res.params.r1 if res.params.p > 1 else None,
                   "rmse": None, "mae": None, "r2": None}
            if test is not None and j < test.p:
                mean, _ = predict_points(res.model, res.params, res.posterior, test.supports[j])
                m = sim.compute_metrics(mean[k], test.values[j])
                row.update(rmse=m.rmse, mae=m.mae, r2=m.r2)
            rows.append(row)
    out = _out_dir(args)
    write_rows(out / "comparison.csv", rows)
    print(f"wrote {out / 'comparison.csv'}")


def _summary(rows, keys, group):
    out = {}
    for r in rows:
        out.setdefault(tuple(r[g] for g in group), []).append(r)
    table = []
    for gkey, rs in out.items():
        row = dict(zip(group, gkey))
        row["n"] = len(rs)
        for k in keys:
            vals = np.array([r[k] for r in rs if r.get(k) is not None], dtype=float)
            row[f"mean_{k}"] = float(vals.mean()) if vals.size else None
            row[f"sd_{k}"] = float(vals.std(ddof=1)) if vals.size >= 2 else None
        table.append(row)
    return table


def cmd_experiment(args) -> None:
    name = args.name
    settings = _settings(args)
    seed = args.seed if args.seed is not None else settings.scenario.get("seed", 0)
    reps = args.reps
    workers = max(1, args.threads or os.cpu_count() or 1)
    fc = _fit_config(settings, args)
    grid_kw = dict(bounds=settings.bounds, nx=settings.nx, ny=settings.ny, lattices=settings.lattices,
                   scales=settings.scales, fit=fc)
    out = _out_dir(args)
    if name == "recovery":
        scenario = args.scenario or "slow_decay"
        config = sim.recovery_config(scenario, reps or 30, seed, **grid_kw)
        res = sim.run_recovery_scenario(config, scenario, workers)
        write_rows(out / f"recovery_{scenario}.csv", res.rows)
        write_rows(out / f"recovery_{scenario}_table.csv", res.table)
        write_rows(out / f"recovery_{scenario}_curves.csv", res.curves)
        print(f"{len(res.rows)} replications, {res.failures} failed; wrote {out}/recovery_{scenario}*.csv")
    elif name in sim.GAIN_KINDS:
        rows = sim.run_gain_experiment(name, sim.gain_configs(name, reps or 10, seed, **grid_kw),
                                       workers=workers)
        write_rows(out / f"{name}_metrics.csv", rows)
        summary = _summary(rows, ["rmse", "mae", "r2", "rmse_region", "rel_improvement",
                                  "rel_improvement_region"], ["setting", "model", "process"])
        write_rows(out / f"{name}_summary.csv", summary)
        print(f"wrote {out}/{name}_metrics.csv ({len(rows)} rows)")
    elif name == "univariate":
        rows = sim.run_univariate(sim.univariate_config(reps=reps or 5, seed=seed, **grid_kw), 0.0, workers)
        write_rows(out / "univariate_metrics.csv", rows)
        print(f"wrote {out}/univariate_metrics.csv ({len(rows)} rows)")
    elif name == "confounding":
        rows = sim.run_confounding(reps or 10, seed, workers=workers, **grid_kw)
        write_rows(out / "confounding.csv", rows)
        write_rows(out / "confounding_summary.csv", _summary(rows, ["sigma2_s", "sigma2_xi"], ["sigma2_xi_true"]))
        print(f"wrote {out}/confounding*.csv")
    elif name == "ridge":
        res = sim.run_ridge_experiment(reps=reps or 10, seed=seed, workers=workers, **grid_kw)
        write_rows(out / "ridge_selection.csv", [{k: v for k, v in r.items() if k != "mean_sigma2_s"}
                                                 for r in res["selection"].table])
        rows = res["unpenalized"] + res["penalized"]
        write_rows(out / "ridge_fits.csv", rows)
        write_rows(out / "ridge_summary.csv", _summary(rows, ["sigma2_s", "sigma2_xi"], ["lambda"]))
        print(f"selected lambda {res['selection'].best}; wrote {out}/ridge_*.csv")
    else:
        raise ConfigError(f"unknown experiment {name!r}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofrk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--tol", type=float, help="EM relative log-likelihood tolerance")
        if data:
            p.add_argument("--data", required=True, help="dataset CSV")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--scenario", choices=PRESETS, help="parameter preset (default: the config file)")
    p.add_argument("--rep", type=int, default=0, help="replication index")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate parameters by EM")
    common(p, data=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior predictions on BAUs and regions")
    common(p, data=True)
    p.add_argument("--params", help="params JSON written by fit")
    p.add_argument("--regions", help="regions CSV (region_id,xmin,xmax,ymin,ymax)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run a named Monte Carlo experiment")
    p.add_argument("name", choices=EXPERIMENTS)
    common(p)
    p.add_argument("--scenario", choices=tuple(sim.RECOVERY_SCENARIOS), help="recovery scenario")
    p.add_argument("--reps", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: CPU count)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", help="joint versus independent fits on one dataset")
    common(p, data=True)
    p.add_argument("--test", help="held-out dataset CSV for predictive metrics")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if getattr(args, "reps", None) is not None and args.reps < 1:
        parser.error("--reps must be at least 1")
    try:
        args.func(args)
    except (CoFRKError, OSError) as exc:
        print(f"cofrk: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
