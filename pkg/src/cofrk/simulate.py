"""Synthetic data from the generative model and the Monte Carlo experiments.

Locations and the train/test split are drawn once per scenario from the
scenario seed and shared by all replications. Each replication draws the
latent coefficients, fine-scale effects, measurement errors and any sampling
masks from its own stream ``default_rng([seed, tag, rep])``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import BasisSystem, build_basis, build_phi
from .coregionalization import ModelParams, build_sar, kappa2_at_level, level_sigmas, rho_at_level
from .domain import BAUGrid, build_bau_grid, point_aggregation
from .em import FitConfig, FitResult, fit, initial_params, select_ridge_lambda
from .errors import CoFRKError, ConfigError, InvalidArgumentError
from .likelihood import build_stacked_model
from .predict import predict_points

log = logging.getLogger(__name__)

STREAM_LOCATIONS = 0
STREAM_DRAWS = 1
STREAM_MASKS = 2
STREAM_PILOT = 3
PILOT_SEED_OFFSET = 1_000_003

MAX_FAILURE_RATE = 0.2

RECOVERY_SCENARIOS = {
    "slow_decay": (0.9, 0.5),
    "no_decay": (0.6, 0.0),
    "fast_decay": (0.9, 2.0),
}
MISSING_PROPORTIONS = (0.05, 0.10, 0.25, 0.50)
SWEEP_R0 = (0.2, 0.5, 0.75, 0.9)
CONFOUNDING_XI = (0.001, 0.01, 0.1, 0.5)
RIDGE_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def default_params(p: int = 2) -> ModelParams:
    """Bivariate simulation parameters (``kappa0`` read as 0.05 directly)."""
    return ModelParams(sigma2_s=[0.7] * p, sigma2_xi=[0.01] * p, sigma2_eps=[1e-4] * p,
                       kappa0=0.05, r0=0.9 if p > 1 else 0.0, r1=0.5 if p > 1 else 0.0)


def imbalance_params(r0: float = 0.9) -> ModelParams:
    return ModelParams(sigma2_s=[0.7, 0.7], sigma2_xi=[0.001, 0.001], sigma2_eps=[0.0002, 0.0008],
                       kappa0=0.4, r0=r0, r1=0.5)


@dataclass
class ScenarioConfig:
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    nx: int = 30
    ny: int = 30
    lattices: tuple = (3, 9)
    scales: tuple = (0.936, 0.234)
    n_total: int = 1000
    n_train: int = 800
    n_test: int = 200
    params: ModelParams = field(default_factory=default_params)
    sample_fraction: tuple | None = None     # per process, of the training sites
    missing: tuple | None = None             # ("fixed", proportion) or ("random", lo, hi)
    missing_process: int = 0
    reps: int = 10
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.n_train + self.n_test != self.n_total:
            raise ConfigError(f"n_train + n_test = {self.n_train + self.n_test} but n_total = {self.n_total}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("need at least one training and one test location")
        if self.sample_fraction is not None:
            if len(self.sample_fraction) != self.params.p:
                raise ConfigError("sample_fraction needs one entry per process")
            if any(not 0 < f <= 1 for f in self.sample_fraction):
                raise ConfigError("sampling fractions must lie in (0, 1]")
        if self.missing is not None:
            kind = self.missing[0]
            if kind == "fixed":
                if not 0 < self.missing[1] < 1:
                    raise ConfigError("missing-area proportion must lie in (0, 1)")
            elif kind == "random":
                lo, hi = self.missing[1], self.missing[2]
                if not 0 < lo <= hi < 1:
                    raise ConfigError("random missing-area proportions must satisfy 0 < lo <= hi < 1")
            else:
                raise ConfigError(f"unknown missing-region kind {kind!r}")
            if not 0 <= self.missing_process < self.params.p:
                raise ConfigError("missing_process out of range")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")

    @property
    def p(self) -> int:
        return self.params.p

    def grid(self) -> BAUGrid:
        return build_bau_grid(self.bounds, self.nx, self.ny)

    def basis(self) -> BasisSystem:
        return build_basis(self.bounds, self.lattices, self.scales)


@dataclass
class SimulatedDataset:
    """Values of every process at every location, plus the observation masks.

    ``z`` is ``(p, n_total)``; ``train_mask[j]`` marks the locations where
    process ``j`` enters the fit. Test locations are never in a train mask.
    """

    locations: np.ndarray
    test_idx: np.ndarray
    z: np.ndarray
    train_mask: np.ndarray
    region: tuple | None = None
    c: np.ndarray | None = None

    @property
    def p(self) -> int:
        return self.z.shape[0]

    def supports(self) -> list[np.ndarray]:
        return [self.locations[m] for m in self.train_mask]

    def train_values(self) -> list[np.ndarray]:
        return [self.z[j, m] for j, m in enumerate(self.train_mask)]

    def in_region(self, xy: np.ndarray) -> np.ndarray:
        if self.region is None:
            return np.zeros(len(xy), dtype=bool)
        x0, x1, y0, y1 = self.region
        return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)


def scenario_layout(config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Locations, training indices and test indices shared by all replications."""
    rng = np.random.default_rng([config.seed, STREAM_LOCATIONS])
    xmin, xmax, ymin, ymax = config.bounds
    loc = np.column_stack([rng.uniform(xmin, xmax, config.n_total), rng.uniform(ymin, ymax, config.n_total)])
    perm = rng.permutation(config.n_total)
    return loc, np.sort(perm[:config.n_train]), np.sort(perm[config.n_train:])


def sample_latent(params: ModelParams, basis: BasisSystem, rng: np.random.Generator) -> np.ndarray:
    """Draw ``c ~ N(0, Q^-1)`` in process-major order.

    Level by level, ``c_l = B_l^-1 E chol(Sigma_l)^T`` with ``E`` an
    ``R_l x p`` white-noise matrix, so that ``Cov(vec c_l) = Sigma_l kron (B_l B_l^T)^-1``.
    """
    p, R = params.p, basis.R
    off = basis.offsets
    c = np.zeros(p * R)
    for l, (lv, sigma) in enumerate(zip(basis.levels, level_sigmas(params, basis.L))):
        B = build_sar(lv.gx, lv.gy, kappa2_at_level(params.kappa0, l + 1)).toarray()
        E = rng.standard_normal((lv.size, p))
        cl = np.linalg.solve(B, E @ np.linalg.cholesky(sigma).T)
        for j in range(p):
            c[j * R + off[l]:j * R + off[l + 1]] = cl[:, j]
    return c


def _region_rect(config: ScenarioConfig, rng: np.random.Generator) -> tuple:
    xmin, xmax, ymin, ymax = config.bounds
    w, h = xmax - xmin, ymax - ymin
    if config.missing[0] == "fixed":
        prop = config.missing[1]
        x0, y0 = xmin, ymin
    else:
        prop = rng.uniform(config.missing[1], config.missing[2])
    s = math.sqrt(prop)
    if config.missing[0] == "random":
        x0 = xmin + rng.uniform(0.0, (1.0 - s) * w)
        y0 = ymin + rng.uniform(0.0, (1.0 - s) * h)
    return (x0, x0 + s * w, y0, y0 + s * h)


def simulate_dataset(config: ScenarioConfig, rep: int, grid: BAUGrid | None = None,
                     basis: BasisSystem | None = None, zero_effects: bool = False) -> SimulatedDataset:
    """One replication. ``zero_effects`` forces ``c``, ``xi`` and ``eps`` to zero (test hook)."""
    grid = grid or config.grid()
    basis = basis or config.basis()
    params = config.params
    p = params.p
    loc, train_idx, test_idx = scenario_layout(config)
    rng = np.random.default_rng([config.seed, STREAM_DRAWS, rep])
    c = sample_latent(params, basis, rng)
    xi = rng.standard_normal((p, grid.n_cells))
    eps = rng.standard_normal((p, config.n_total))
    if zero_effects:
        c[:] = 0.0
        xi[:] = 0.0
        eps[:] = 0.0
    C = point_aggregation(grid, loc)
    Phi = _phi(grid, basis)
    R = basis.R
    z = np.empty((p, config.n_total))
    for j in range(p):
        v_xi = np.ones(grid.n_cells) if params.v_xi is None else np.asarray(params.v_xi[j])
        y = Phi @ c[j * R:(j + 1) * R] + np.sqrt(params.sigma2_xi[j] * v_xi) * xi[j]
        z[j] = C @ y + np.sqrt(params.sigma2_eps[j]) * eps[j]

    mask_rng = np.random.default_rng([config.seed, STREAM_MASKS, rep])
    train_mask = np.zeros((p, config.n_total), dtype=bool)
    train_mask[:, train_idx] = True
    if config.sample_fraction is not None:
        for j, frac in enumerate(config.sample_fraction):
            k = max(1, int(round(frac * config.n_train)))
            chosen = mask_rng.choice(train_idx, size=k, replace=False)
            train_mask[j] = False
            train_mask[j, chosen] = True
    region = None
    if config.missing is not None:
        region = _region_rect(config, mask_rng)
        ds = SimulatedDataset(loc, test_idx, z, train_mask, region)
        train_mask[config.missing_process] &= ~ds.in_region(loc)
    for j in range(p):
        if not train_mask[j].any():
            raise ConfigError(f"process {j + 1} has no training observations")
    return SimulatedDataset(loc, test_idx, z, train_mask, region, c)


def _phi(grid, basis):
    return build_phi(grid, basis)


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    rmse: float
    mae: float
    r2: float | None


def compute_metrics(pred, truth) -> Metrics:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise InvalidArgumentError("predictions and truth must be nonempty and of equal length")
    err = pred - truth
    sse = float(np.sum(err ** 2))
    sst = float(np.sum((truth - truth.mean()) ** 2)) if truth.size >= 2 else 0.0
    r2 = 1.0 - sse / sst if sst > 0 else None
    return Metrics(math.sqrt(sse / truth.size), float(np.mean(np.abs(err))), r2)


# ---------------------------------------------------------------- fitting helpers

def fit_dataset(ds: SimulatedDataset, config: ScenarioConfig, processes: Sequence[int] | None = None,
                fit_config: FitConfig | None = None, grid=None, basis=None, Phi=None,
                init: ModelParams | None = None) -> FitResult:
    """Fit the model to some processes of a dataset from the default initialization."""
    grid = grid or config.grid()
    basis = basis or config.basis()
    procs = list(range(ds.p)) if processes is None else list(processes)
    truth = config.params
    shell = ModelParams(sigma2_s=np.ones(len(procs)), sigma2_xi=truth.sigma2_xi[procs],
                        sigma2_eps=truth.sigma2_eps[procs])
    supports = [ds.locations[ds.train_mask[j]] for j in procs]
    values = [ds.z[j, ds.train_mask[j]] for j in procs]
    model = build_stacked_model(grid, basis, supports, values, shell, Phi=Phi)
    if init is None:
        init = initial_params(model)
    return fit(model, init, fit_config or config.fit)


def _test_metrics(ds: SimulatedDataset, result: FitResult, processes: Sequence[int]) -> list[dict]:
    xy = ds.locations[ds.test_idx]
    mean, _ = predict_points(result.model, result.params, result.posterior, xy)
    inside = ds.in_region(xy)
    out = []
    for k, j in enumerate(processes):
        truth = ds.z[j, ds.test_idx]
        m = compute_metrics(mean[k], truth)
        row = {"process": j + 1, "rmse": m.rmse, "mae": m.mae, "r2": m.r2, "rmse_region": None,
               "n_region": int(inside.sum())}
        if inside.any():
            row["rmse_region"] = compute_metrics(mean[k][inside], truth[inside]).rmse
        out.append(row)
    return out


def _check_failures(n_fail: int, reps: int, label: str) -> None:
    if n_fail > MAX_FAILURE_RATE * reps:
        raise CoFRKError(f"{label}: {n_fail} of {reps} replications failed")


# ---------------------------------------------------------------- experiments

def _map_reps(fn, args: tuple, reps: int, workers: int = 1) -> list:
    """``[fn(*args, rep) for rep in range(reps)]``, optionally in worker processes.

    Results come back in replication order either way, so output does not
    depend on the worker count.
    """
    if workers <= 1 or reps <= 1:
        return [fn(*args, rep) for rep in range(reps)]
    with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
        return list(pool.map(fn, *[[a] * reps for a in args], range(reps)))


def _layout(config: ScenarioConfig):
    grid, basis = config.grid(), config.basis()
    return grid, basis, _phi(grid, basis)


def recovery_config(scenario: str, reps: int = 30, seed: int = 0, **overrides) -> ScenarioConfig:
    if scenario not in RECOVERY_SCENARIOS:
        raise InvalidArgumentError(f"unknown scenario {scenario!r}; choose from {sorted(RECOVERY_SCENARIOS)}")
    r0, r1 = RECOVERY_SCENARIOS[scenario]
    params = default_params(2).copy(r0=r0, r1=r1)
    return ScenarioConfig(params=params, reps=reps, seed=seed, **overrides)


@dataclass
class RecoveryResult:
    rows: list            # per replication estimates
    table: list           # per parameter (name, true, mean, sd, n)
    curves: list          # (replication, level, rho_hat)
    failures: int = 0


def _recovery_rep(config: ScenarioConfig, scenario: str, rep: int):
    grid, basis, Phi = _layout(config)
    ds = simulate_dataset(config, rep, grid, basis)
    try:
        res = fit_dataset(ds, config, grid=grid, basis=basis, Phi=Phi)
    except CoFRKError as exc:
        log.warning("replication %d failed: %s", rep, exc)
        return None
    est = res.params
    row = {"scenario": scenario, "replication": rep, "r0": est.r0, "r1": est.r1,
           "kappa0": est.kappa0, "iterations": res.report.iterations,
           "converged": res.report.converged, "aborted": res.report.aborted}
    for j in range(est.p):
        row[f"sigma2_s_{j + 1}"] = float(est.sigma2_s[j])
        row[f"sigma2_xi_{j + 1}"] = float(est.sigma2_xi[j])
    for l in range(basis.L):
        row[f"rho_{l + 1}"] = rho_at_level(est.r0, est.r1, l + 1)
    return row


def run_recovery_scenario(config: ScenarioConfig, scenario: str = "", workers: int = 1) -> RecoveryResult:
    """Fit every replication from the default start and summarize the estimates."""
    truth = config.params
    L = len(config.lattices)
    results = _map_reps(_recovery_rep, (config, scenario), config.reps, workers)
    rows = [r for r in results if r is not None]
    failures = len(results) - len(rows)
    _check_failures(failures, config.reps, f"recovery {scenario}")
    curves = [{"replication": r["replication"], "level": l + 1, "rho_hat": r[f"rho_{l + 1}"]}
              for r in rows for l in range(L)]
    true_vals = {"r0": truth.r0, "r1": truth.r1, "kappa0": truth.kappa0}
    for l in range(L):
        true_vals[f"rho_{l + 1}"] = rho_at_level(truth.r0, truth.r1, l + 1)
    for j in range(truth.p):
        true_vals[f"sigma2_s_{j + 1}"] = float(truth.sigma2_s[j])
        true_vals[f"sigma2_xi_{j + 1}"] = float(truth.sigma2_xi[j])
    table = []
    for name, tv in true_vals.items():
        vals = np.array([r[name] for r in rows])
        table.append({"parameter": name, "true": tv,
                      "mean": float(vals.mean()) if vals.size else None,
                      "sd": float(np.std(vals, ddof=1)) if vals.size >= 2 else None,
                      "n": int(vals.size)})
    return RecoveryResult(rows, table, curves, failures)


GAIN_KINDS = ("imbalance", "missing_fixed", "missing_random", "correlation_sweep")


def gain_configs(kind: str, reps: int = 10, seed: int = 0, settings=None, **overrides) -> list[tuple]:
    """``(setting, ScenarioConfig)`` pairs for one gain experiment."""
    base = dict(reps=reps, seed=seed, **overrides)
    if kind == "imbalance":
        return [(None, ScenarioConfig(params=imbalance_params(), sample_fraction=(0.05, 0.8), **base))]
    if kind == "correlation_sweep":
        return [(r0, ScenarioConfig(params=imbalance_params(r0), sample_fraction=(0.05, 0.8), **base))
                for r0 in (settings or SWEEP_R0)]
    if kind == "missing_fixed":
        return [(prop, ScenarioConfig(params=imbalance_params(), missing=("fixed", prop), **base))
                for prop in (settings or MISSING_PROPORTIONS)]
    if kind == "missing_random":
        lo, hi = settings or (0.02, 0.75)
        return [(None, ScenarioConfig(params=imbalance_params(), missing=("random", lo, hi), **base))]
    raise InvalidArgumentError(f"unknown gain experiment {kind!r}; choose from {GAIN_KINDS}")


def _gain_rep(config: ScenarioConfig, kind: str, setting, rep: int):
    grid, basis, Phi = _layout(config)
    ds = simulate_dataset(config, rep, grid, basis)
    try:
        joint = fit_dataset(ds, config, grid=grid, basis=basis, Phi=Phi)
        indep = [fit_dataset(ds, config, [j], grid=grid, basis=basis, Phi=Phi) for j in range(ds.p)]
    except CoFRKError as exc:
        log.warning("%s rep %d failed: %s", kind, rep, exc)
        return None
    rows = []
    joint_rows = _test_metrics(ds, joint, range(ds.p))
    indep_rows = [_test_metrics(ds, r, [j])[0] for j, r in enumerate(indep)]
    for jr, ir in zip(joint_rows, indep_rows):
        imp = (ir["rmse"] - jr["rmse"]) / ir["rmse"] if ir["rmse"] > 0 else None
        imp_region = None
        if jr["rmse_region"] is not None and ir["rmse_region"]:
            imp_region = (ir["rmse_region"] - jr["rmse_region"]) / ir["rmse_region"]
        for tag, r in (("cofrk", jr), ("independent", ir)):
            row = {"kind": kind, "setting": setting, "replication": rep, "model": tag, **r,
                   "rel_improvement": imp if tag == "cofrk" else None,
                   "rel_improvement_region": imp_region if tag == "cofrk" else None,
                   "region_area": None}
            if ds.region is not None:
                row["region_area"] = (ds.region[1] - ds.region[0]) * (ds.region[3] - ds.region[2])
            rows.append(row)
    return rows


def run_gain_experiment(kind: str, configs: list[tuple] | None = None, reps: int = 10, seed: int = 0,
                        settings=None, workers: int = 1) -> list[dict]:
    """Joint fit versus independent ``p = 1`` fits; one metrics row per (rep, model, process).

    Relative improvements ``(RMSE_indep - RMSE_joint) / RMSE_indep`` sit on the
    joint-model rows, over the full test set and over test sites inside the
    missing region.
    """
    configs = configs or gain_configs(kind, reps, seed, settings)
    rows = []
    for setting, config in configs:
        results = _map_reps(_gain_rep, (config, kind, setting), config.reps, workers)
        _check_failures(sum(r is None for r in results), config.reps, f"{kind} setting {setting}")
        for r in results:
            rows.extend(r or [])
    return rows


def univariate_config(sigma2_xi: float = 0.01, reps: int = 5, seed: int = 0, **overrides) -> ScenarioConfig:
    params = ModelParams(sigma2_s=[0.7], sigma2_xi=[sigma2_xi], sigma2_eps=[1e-4], kappa0=0.05)
    return ScenarioConfig(params=params, reps=reps, seed=seed, **overrides)


def _univariate_rep(config: ScenarioConfig, lam: float, rep: int):
    grid, basis, Phi = _layout(config)
    ds = simulate_dataset(config, rep, grid, basis)
    try:
        res = fit_dataset(ds, config, fit_config=replace(config.fit, ridge_lambda=lam),
                          grid=grid, basis=basis, Phi=Phi)
    except CoFRKError as exc:
        log.warning("univariate rep %d failed: %s", rep, exc)
        return None
    m = _test_metrics(ds, res, [0])[0]
    return {"replication": rep, "sigma2_xi_true": float(config.params.sigma2_xi[0]), "lambda": lam,
            "sigma2_s": float(res.params.sigma2_s[0]), "sigma2_xi": float(res.params.sigma2_xi[0]),
            "kappa0": res.params.kappa0, "rmse": m["rmse"], "mae": m["mae"], "r2": m["r2"],
            "iterations": res.report.iterations}


def run_univariate(config: ScenarioConfig, lam: float = 0.0, workers: int = 1) -> list[dict]:
    """Univariate fits: parameter estimates and test metrics per replication."""
    results = _map_reps(_univariate_rep, (config, lam), config.reps, workers)
    _check_failures(sum(r is None for r in results), config.reps, "univariate")
    return [r for r in results if r is not None]


def run_confounding(reps: int = 10, seed: int = 0, xi_values=CONFOUNDING_XI, workers: int = 1,
                    **overrides) -> list[dict]:
    """True ``sigma2_s`` held at 0.7 while the true fine-scale variance varies."""
    rows = []
    for xi in xi_values:
        rows.extend(run_univariate(univariate_config(xi, reps, seed, **overrides), 0.0, workers))
    return rows


def run_ridge_experiment(sigma2_xi: float = 0.01, reps: int = 10, seed: int = 0, lambdas=RIDGE_GRID,
                         select_reps: int = 4, workers: int = 1, **overrides) -> dict:
    """Pick lambda on a pilot dataset, then compare lambda = 0 against it.

    The pilot replication comes from a separate stream, so the selection never
    sees the evaluation replications.
    """
    config = univariate_config(sigma2_xi, reps, seed, **overrides)
    grid, basis = config.grid(), config.basis()
    pilot = simulate_dataset(replace(config, seed=seed + PILOT_SEED_OFFSET), 0, grid, basis)
    truth = config.params
    shell = ModelParams(sigma2_s=[1.0], sigma2_xi=truth.sigma2_xi, sigma2_eps=truth.sigma2_eps)
    model = build_stacked_model(grid, basis, pilot.supports(), pilot.train_values(), shell)
    sel = select_ridge_lambda(model, lambdas, select_reps, config.fit,
                              np.random.default_rng([seed, STREAM_PILOT]))
    plain = run_univariate(config, 0.0, workers)
    ridge = run_univariate(config, sel.best, workers)
    return {"selection": sel, "unpenalized": plain, "penalized": ridge}
