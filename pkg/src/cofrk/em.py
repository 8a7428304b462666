"""EM estimation: Gaussian E-step and the M-step updates.

The M-step is a generalized-EM sweep: beta, then sigma2_xi, sigma2_s, kappa0
and (r0, r1), each maximizing its own piece of the expected complete-data
log-likelihood with the others held at their latest values, all against one
E-step posterior. Every numerical update keeps the previous value unless the
candidate scores at least as well, so each step is an ascent step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree

from .basis import BasisSystem
from .coregionalization import (
    ModelParams, alpha_matrix, build_precision, build_sar, equicorrelation_inverse, equicorrelation_logdet,
    kappa2_at_level, level_sigmas, rho_at_level, sar_logdet,
)
from .errors import (
    InvalidArgumentError, NotApplicableError, NumericalFailureError, SingularDesignError, ValidityError,
)
from .likelihood import NoiseStructure, StackedModel, capacity, marginal_loglik
from .optimize import bisect_root, maximize_scalar

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    rel_tol: float = 1e-4
    max_iter: int = 200
    inner_tol: float = 1e-6
    inner_max_eval: int = 200
    sigma2_s_bounds: tuple = (1e-8, 1e3)
    sigma2_xi_bounds: tuple = (1e-10, 1e2)
    kappa0_bounds: tuple = (-10.0, 10.0)
    r0_limit: float = 0.99
    r1_bounds: tuple = (0.0, 10.0)
    ridge_lambda: float = 0.0
    sigma2_s_cycles: int = 20
    r_sweeps: int = 3
    fixed: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.inner_tol > 0):
            raise InvalidArgumentError("tolerances must be positive")
        if self.max_iter < 1 or self.inner_max_eval < 3:
            raise InvalidArgumentError("iteration budgets too small")
        for name in ("sigma2_s_bounds", "sigma2_xi_bounds", "kappa0_bounds", "r1_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidArgumentError(f"{name} must be ordered, got {(lo, hi)}")
        if self.ridge_lambda < 0:
            raise InvalidArgumentError("ridge_lambda must be nonnegative")
        unknown = set(self.fixed) - {"beta", "sigma2_xi", "sigma2_s", "kappa0", "r"}
        if unknown:
            raise InvalidArgumentError(f"unknown fixed parameters {sorted(unknown)}")

    def r0_bounds(self, p: int) -> tuple[float, float]:
        return (-self.r0_limit / (p - 1), self.r0_limit)


@dataclass
class PosteriorState:
    """Moments of ``c | Z`` in process-major order."""

    mu: np.ndarray
    cov: np.ndarray

    @cached_property
    def S(self) -> np.ndarray:
        return self.cov + np.outer(self.mu, self.mu)

    def block(self, j: int, R: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(j * R, (j + 1) * R)
        return self.mu[sl], self.cov[sl, sl]


@dataclass
class FitReport:
    loglik_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    aborted: bool = False
    diagnostic: str = ""
    flags: list = field(default_factory=list)
    wall_time: float = 0.0
    timestamp: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: ModelParams
    posterior: PosteriorState
    report: FitReport
    model: StackedModel


# ---------------------------------------------------------------- E-step

def e_step(model: StackedModel, prec, beta) -> PosteriorState:
    cap = capacity(model, prec, beta)
    cov = sla.cho_solve(cap.chol, np.eye(cap.b.size))
    cov = 0.5 * (cov + cov.T)
    mu = sla.cho_solve(cap.chol, cap.b)
    return PosteriorState(mu, cov)


# ---------------------------------------------------------------- beta

def update_beta(model: StackedModel, posterior: PosteriorState) -> np.ndarray:
    """GLS update; D is block diagonal so each process solves separately."""
    p, q, R = model.p, model.q, model.R
    beta = np.zeros((p, q))
    if q == 0:
        return beta
    for j, (blk, (fac, _, _)) in enumerate(zip(model.blocks, model.factors)):
        mu_j = posterior.mu[j * R:(j + 1) * R]
        target = blk.z - blk.phi @ mu_j
        dinv_f = fac.solve(blk.f)
        gram = blk.f.T @ dinv_f
        if blk.z.size < q or np.linalg.matrix_rank(gram) < q:
            raise SingularDesignError(f"process {j}: covariate design is rank deficient")
        beta[j] = np.linalg.solve(gram, dinv_f.T @ target)
    return beta


# ---------------------------------------------------------------- sigma2_xi

class FineScaleObjective:
    """Expected complete-data terms in one process's fine-scale variance.

    ``omega_single`` and ``omega_groups`` are the diagonal entries and the
    component blocks of ``E[(r - Phi c)(r - Phi c)^T | Z]`` matching the
    noise structure's components.
    """

    def __init__(self, noise, s_eps: float, omega_single, omega_groups):
        self.noise = noise
        self.s_eps = float(s_eps)
        self.omega_single = np.asarray(omega_single, dtype=float)
        self.omega_groups = list(omega_groups)

    @classmethod
    def from_posterior(cls, model: StackedModel, posterior: PosteriorState, beta, j: int):
        blk = model.blocks[j]
        mu_j, cov_j = posterior.block(j, model.R)
        e = model.residuals(beta)[j] - blk.phi @ mu_j
        phi_s = blk.phi @ cov_j
        noise = blk.noise
        omega_single = e[noise.single] ** 2 + np.einsum("nr,nr->n", phi_s[noise.single], blk.phi[noise.single])
        groups = []
        for idx, _, _ in noise.groups:
            om = np.einsum("nir,njr->nij", phi_s[idx], blk.phi[idx]) + e[idx][:, :, None] * e[idx][:, None, :]
            groups.append(om)
        return cls(noise, model.sigma2_eps[j], omega_single, groups)

    def _blocks(self, s):
        for (idx, wb, eb), om in zip(self.noise.groups, self.omega_groups):
            dmat = s * wb + self.s_eps * eb[:, :, None] * np.eye(idx.shape[1])[None]
            yield wb, dmat, om

    def score(self, s: float) -> float:
        """``-tr(D^-1 dD) + tr(D^-1 dD D^-1 Omega)`` (twice the derivative)."""
        w = self.noise.w_single
        d = s * w + self.s_eps * self.noise.e_single
        total = float(np.sum(-w / d + w * self.omega_single / d ** 2))
        for wb, dmat, om in self._blocks(s):
            dinv = np.linalg.inv(dmat)
            dw = dinv @ wb
            total += float(np.sum(-np.einsum("nii->n", dw) + np.einsum("nij,nji->n", dw @ dinv, om)))
        return total

    def value(self, s: float) -> float:
        """``-1/2 log|D| - 1/2 tr(D^-1 Omega)`` up to a constant."""
        d = s * self.noise.w_single + self.s_eps * self.noise.e_single
        total = float(np.sum(np.log(d) + self.omega_single / d))
        for _, dmat, om in self._blocks(s):
            _, ld = np.linalg.slogdet(dmat)
            total += float(np.sum(ld + np.einsum("nij,nji->n", np.linalg.inv(dmat), om)))
        return -0.5 * total

    def solve(self, lo: float, hi: float):
        x, status = bisect_root(lambda t: self.score(math.exp(t)), math.log(lo), math.log(hi))
        return math.exp(x), status


def update_sigma_xi(model: StackedModel, posterior: PosteriorState, beta, current,
                    config: FitConfig | None = None, flags: list | None = None) -> np.ndarray:
    config = config or FitConfig()
    lo, hi = config.sigma2_xi_bounds
    out = np.asarray(current, dtype=float).copy()
    for j in range(model.p):
        if model.blocks[j].z.size == 0:
            continue
        obj = FineScaleObjective.from_posterior(model, posterior, beta, j)
        s, status = obj.solve(lo, hi)
        if status != "root" and flags is not None:
            flags.append(f"sigma2_xi[{j}] at {status} bound")
        if obj.value(s) >= obj.value(out[j]):
            out[j] = s
    return out


# ---------------------------------------------------------------- level statistics

@dataclass
class LevelStats:
    """Per level, ``p x p`` traces of the posterior second-moment sub-blocks.

    With ``B_l = M_l + kappa^2 I`` and ``M_l = 4I - adjacency``,
    ``tr(B B^T S_ij) = t2 + 2 kappa^2 t1 + kappa^4 t0`` so every kappa can be
    scored without touching R_l x R_l matrices again.
    """

    sizes: tuple
    shapes: tuple
    t0: list
    t1: list
    t2: list

    @property
    def L(self) -> int:
        return len(self.sizes)

    def T(self, level: int, kappa2: float) -> np.ndarray:
        return self.t2[level] + 2.0 * kappa2 * self.t1[level] + kappa2 ** 2 * self.t0[level]


def level_stats(posterior: PosteriorState, basis: BasisSystem, p: int) -> LevelStats:
    S = posterior.S
    R = basis.R
    off = basis.offsets
    t0, t1, t2 = [], [], []
    for l, lv in enumerate(basis.levels):
        M = build_sar(lv.gx, lv.gy, 0.0).toarray()
        M2 = M @ M
        a0, a1, a2 = (np.zeros((p, p)) for _ in range(3))
        for i in range(p):
            for j in range(i, p):
                blk = S[i * R + off[l]:i * R + off[l + 1], j * R + off[l]:j * R + off[l + 1]]
                a0[i, j] = a0[j, i] = np.trace(blk)
                a1[i, j] = a1[j, i] = np.sum(M * blk)
                a2[i, j] = a2[j, i] = np.sum(M2 * blk)
        t0.append(a0)
        t1.append(a1)
        t2.append(a2)
    return LevelStats(basis.sizes, tuple((lv.gx, lv.gy) for lv in basis.levels), t0, t1, t2)


# ---------------------------------------------------------------- Q-objectives

def q_sigma_s(sigma2_s, stats: LevelStats, params: ModelParams, ridge: float = 0.0) -> float:
    sigma2_s = np.asarray(sigma2_s, dtype=float)
    p = sigma2_s.size
    alpha = alpha_matrix(params.nu, stats.L)
    total = 0.0
    for l in range(stats.L):
        d = np.sqrt(alpha[l] * sigma2_s)
        G = stats.T(l, kappa2_at_level(params.kappa0, l + 1))
        C = equicorrelation_inverse(rho_at_level(params.r0, params.r1, l + 1), p)
        total += -2.0 * stats.sizes[l] * np.sum(np.log(d)) - np.sum(C * G / np.outer(d, d))
    return float(total - ridge * np.sum(sigma2_s ** 2))


def q_kappa0(kappa0: float, stats: LevelStats, params: ModelParams) -> float:
    p = params.p
    sigmas = level_sigmas(params, stats.L)
    total = 0.0
    for l in range(stats.L):
        k2 = kappa2_at_level(kappa0, l + 1)
        gx, gy = stats.shapes[l]
        total += 2.0 * p * sar_logdet(gx, gy, k2) - np.sum(np.linalg.inv(sigmas[l]) * stats.T(l, k2))
    return float(total)


def q_r(r0: float, r1: float, stats: LevelStats, params: ModelParams) -> float:
    p = params.p
    alpha = alpha_matrix(params.nu, stats.L)
    total = 0.0
    for l in range(stats.L):
        rho = rho_at_level(r0, r1, l + 1)
        try:
            C = equicorrelation_inverse(rho, p)
        except ValidityError:
            return -math.inf
        d = np.sqrt(alpha[l] * params.sigma2_s)
        M = stats.T(l, kappa2_at_level(params.kappa0, l + 1)) / np.outer(d, d)
        total += -stats.sizes[l] * equicorrelation_logdet(rho, p) - np.sum(C * M)
    return float(total)


# ---------------------------------------------------------------- covariance updates

def update_sigma_s(stats: LevelStats, params: ModelParams, ridge: float = 0.0,
                   config: FitConfig | None = None, flags: list | None = None) -> np.ndarray:
    """Coordinate-wise golden-section search in ``log sigma2_s``."""
    config = config or FitConfig()
    lo, hi = (math.log(b) for b in config.sigma2_s_bounds)
    current = params.sigma2_s.copy()
    f_cur = q_sigma_s(current, stats, params, ridge)
    for cycle in range(max(2, config.sigma2_s_cycles)):
        start = current.copy()
        for i in range(current.size):
            def f(t, i=i):
                trial = current.copy()
                trial[i] = math.exp(t)
                return q_sigma_s(trial, stats, params, ridge)

            t, ft, _ = maximize_scalar(f, lo, hi, config.inner_tol, config.inner_max_eval)
            if ft >= f_cur:
                current[i] = math.exp(t)
                f_cur = ft
        if cycle >= 1 and np.all(np.abs(np.log(current / start)) < config.inner_tol):
            break
    if flags is not None:
        lo_b, hi_b = config.sigma2_s_bounds
        at = np.isclose(current, lo_b, rtol=1e-4) | np.isclose(current, hi_b, rtol=1e-4)
        if np.all(at):
            flags.append("sigma2_s at bounds")
    return current


def update_kappa0(stats: LevelStats, params: ModelParams, config: FitConfig | None = None,
                  flags: list | None = None) -> float:
    config = config or FitConfig()
    lo, hi = config.kappa0_bounds
    f_cur = q_kappa0(params.kappa0, stats, params)
    k, fk, _ = maximize_scalar(lambda x: q_kappa0(x, stats, params), lo, hi,
                               config.inner_tol, config.inner_max_eval)
    if flags is not None and (abs(k - lo) < 1e-4 or abs(k - hi) < 1e-4):
        flags.append("kappa0 at bound")
    return k if fk >= f_cur else params.kappa0


def update_r0_r1(stats: LevelStats, params: ModelParams, config: FitConfig | None = None,
                 flags: list | None = None) -> tuple[float, float]:
    """Coordinate ascent over ``(r0, r1)`` with golden-section inner searches."""
    config = config or FitConfig()
    p = params.p
    if p < 2:
        raise NotApplicableError("cross-correlation parameters need at least two processes")
    r0_lo, r0_hi = config.r0_bounds(p)
    r1_lo, r1_hi = config.r1_bounds
    r0 = min(max(params.r0, r0_lo), r0_hi)
    r1 = 0.0 if stats.L == 1 else min(max(params.r1, r1_lo), r1_hi)
    f_cur = q_r(r0, r1, stats, params)
    if stats.L > 1 and q_r(params.r0, params.r1, stats, params) >= f_cur:
        r0, r1, f_cur = params.r0, params.r1, q_r(params.r0, params.r1, stats, params)
    for _ in range(config.r_sweeps):
        x, fx, _ = maximize_scalar(lambda a: q_r(a, r1, stats, params), r0_lo, r0_hi,
                                   config.inner_tol, config.inner_max_eval)
        if fx > f_cur:
            r0, f_cur = x, fx
        if stats.L > 1:
            x, fx, _ = maximize_scalar(lambda b: q_r(r0, b, stats, params), r1_lo, r1_hi,
                                       config.inner_tol, config.inner_max_eval)
            if fx > f_cur:
                r1, f_cur = x, fx
    if flags is not None and stats.L == 1:
        flags.append("r1 unidentified with one level; pinned to 0")
    return r0, r1


# ---------------------------------------------------------------- initialization

def _obs_locations(model: StackedModel, j: int) -> np.ndarray:
    return np.asarray(model.blocks[j].C @ model.grid.centroids)


def initial_params(model: StackedModel, sigma2_eps=None, nu=None) -> ModelParams:
    """Cheap data-driven starting values (OLS mean, residual-variance scales)."""
    p, q = model.p, model.q
    beta = np.zeros((p, q))
    resid, var = [], np.ones(p)
    for j, blk in enumerate(model.blocks):
        if q and blk.z.size >= q:
            beta[j] = np.linalg.lstsq(blk.f, blk.z, rcond=None)[0]
        r = blk.z - blk.f @ beta[j] if q else blk.z.copy()
        resid.append(r)
        if r.size >= 2 and np.var(r) > 0:
            var[j] = float(np.var(r))
    r0 = 0.0
    if p >= 2:
        cors = []
        for i in range(p):
            for j in range(i + 1, p):
                if resid[i].size < 3 or resid[j].size < 3:
                    continue
                tree = cKDTree(_obs_locations(model, j))
                _, nn = tree.query(_obs_locations(model, i))
                a, b = resid[i], resid[j][nn]
                if np.std(a) > 0 and np.std(b) > 0:
                    cors.append(np.corrcoef(a, b)[0, 1])
        if cors:
            r0 = 0.5 * float(np.sign(np.mean(cors)))
    r1 = 0.5 if (p >= 2 and model.basis.L > 1) else 0.0
    s_eps = model.sigma2_eps if sigma2_eps is None else sigma2_eps
    return ModelParams(sigma2_s=var, sigma2_xi=0.1 * var, sigma2_eps=s_eps, kappa0=0.1,
                       r0=r0, r1=r1, beta=beta, nu=nu)


# ---------------------------------------------------------------- driver

def fit(model: StackedModel, init: ModelParams | None = None, config: FitConfig | None = None) -> FitResult:
    """Run EM until the relative log-likelihood change drops below ``rel_tol``."""
    config = config or FitConfig()
    t_start = time.perf_counter()
    report = FitReport(timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    params = (init or initial_params(model)).copy()
    if params.p != model.p:
        raise InvalidArgumentError(f"initial parameters are for {params.p} processes, model has {model.p}")
    if model.N == 0:
        raise InvalidArgumentError("no observations to fit")
    params.validate()
    basis = model.basis
    model = model.with_noise(params.sigma2_xi, params.sigma2_eps)
    prec = build_precision(params, basis)
    ll = marginal_loglik(model, prec, params.beta)
    if not math.isfinite(ll):
        raise NumericalFailureError("initial log-likelihood is not finite", params.to_dict())
    report.loglik_trace.append(ll)
    posterior = e_step(model, prec, params.beta)
    fixed = set(config.fixed)

    for it in range(1, config.max_iter + 1):
        flags: list[str] = []
        try:
            new = params.copy()
            if "beta" not in fixed:
                new.beta = update_beta(model, posterior)
            if "sigma2_xi" not in fixed:
                new.sigma2_xi = update_sigma_xi(model, posterior, new.beta, new.sigma2_xi, config, flags)
            stats = level_stats(posterior, basis, model.p)
            if "sigma2_s" not in fixed:
                new.sigma2_s = update_sigma_s(stats, new, config.ridge_lambda, config, flags)
            if "kappa0" not in fixed:
                new.kappa0 = update_kappa0(stats, new, config, flags)
            if model.p >= 2 and "r" not in fixed:
                new.r0, new.r1 = update_r0_r1(stats, new, config, flags)
            new_model = model.with_noise(new.sigma2_xi)
            new_prec = build_precision(new, basis)
            new_ll = marginal_loglik(new_model, new_prec, new.beta)
            if not math.isfinite(new_ll):
                raise NumericalFailureError("log-likelihood is not finite", new.to_dict())
            new_post = e_step(new_model, new_prec, new.beta)
        except (NumericalFailureError, SingularDesignError, ValidityError) as exc:
            report.aborted = True
            report.diagnostic = f"iteration {it}: {exc}"
            log.warning("EM aborted: %s", report.diagnostic)
            break
        report.flags.extend(f"iter {it}: {f}" for f in flags)
        if new_ll < ll - 1e-8 * abs(ll):
            report.flags.append(f"iter {it}: log-likelihood decreased by {ll - new_ll:.3e}")
        params, model, prec, posterior = new, new_model, new_prec, new_post
        prev, ll = ll, new_ll
        report.loglik_trace.append(ll)
        report.iterations = it
        if abs(ll - prev) / abs(prev) < config.rel_tol:
            report.converged = True
            break

    report.wall_time = time.perf_counter() - t_start
    return FitResult(params, posterior, report, model)


# ---------------------------------------------------------------- ridge selection

def subset_rows(model: StackedModel, keep: Sequence[np.ndarray]) -> StackedModel:
    """Model restricted to the given observation rows of each process."""
    blocks = []
    for blk, rows in zip(model.blocks, keep):
        rows = np.asarray(rows, dtype=int)
        C = blk.C[rows]
        noise = NoiseStructure(C, blk.v_xi, blk.noise.v_eps[rows])
        blocks.append(replace(blk, C=C, z=blk.z[rows], phi=blk.phi[rows], f=blk.f[rows], noise=noise))
    return replace(model, blocks=tuple(blocks))


@dataclass
class RidgeSelection:
    best: float
    table: list
    flags: list


def select_ridge_lambda(model: StackedModel, lambdas: Sequence[float], repetitions: int,
                        config: FitConfig | None = None, rng: np.random.Generator | None = None,
                        n_folds: int = 5) -> RidgeSelection:
    """Choose the ridge weight minimizing ``B + C`` over refits on resampled folds.

    ``B = mean + sd`` of the fitted ``sigma2_s`` and ``C = |corr(sigma2_s, sigma2_xi)|``
    across the refits (summed over processes). Each refit drops one fold of a
    fresh random ``n_folds`` partition; the partitions are shared by all
    lambdas. Ties go to the larger lambda.
    """
    lambdas = [float(l) for l in lambdas]
    if not lambdas:
        raise InvalidArgumentError("lambda grid is empty")
    if any(l < 0 for l in lambdas):
        raise InvalidArgumentError("lambda values must be nonnegative")
    if len(lambdas) == 1:
        return RidgeSelection(lambdas[0], [], [])
    if repetitions < 2:
        raise InvalidArgumentError("need at least two repetitions")
    config = config or FitConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    keeps = []
    for r in range(repetitions):
        keep = []
        for blk in model.blocks:
            perm = rng.permutation(blk.z.size)
            fold = np.array_split(perm, n_folds)[r % n_folds]
            keep.append(np.sort(np.setdiff1d(perm, fold)))
        keeps.append(keep)
    table, flags = [], []
    for lam in lambdas:
        cfg = replace(config, ridge_lambda=lam)
        s_hat, x_hat = [], []
        for keep in keeps:
            sub = subset_rows(model, keep)
            res = fit(sub, initial_params(sub), cfg)
            s_hat.append(res.params.sigma2_s)
            x_hat.append(res.params.sigma2_xi)
        s_hat, x_hat = np.array(s_hat), np.array(x_hat)
        b = float(np.sum(s_hat.mean(axis=0) + s_hat.std(axis=0, ddof=1)))
        c = 0.0
        for j in range(model.p):
            if np.std(s_hat[:, j]) == 0 or np.std(x_hat[:, j]) == 0:
                flags.append(f"lambda {lam}: degenerate correlation for process {j}; C set to 0")
                continue
            c += abs(float(np.corrcoef(s_hat[:, j], x_hat[:, j])[0, 1]))
        table.append({"lambda": lam, "B": b, "C": c, "score": b + c,
                      "mean_sigma2_s": s_hat.mean(axis=0).tolist()})
    for msg in flags:
        log.info(msg)
    scores = np.array([row["score"] for row in table])
    best_score = scores.min()
    tied = [lam for lam, sc in zip(lambdas, scores) if sc == best_score]
    return RidgeSelection(max(tied), table, flags)
