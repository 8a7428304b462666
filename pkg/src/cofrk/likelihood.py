"""Stacked observation model and the marginal Gaussian log-likelihood.

The data vector is stacked process-major, ``Z = (Z_1, ..., Z_p)``, and each
process may be observed on its own footprints. Both the basis design and the
noise covariance ``D`` are therefore block diagonal across processes, so the
capacity matrix ``Q + Phi~^T D^-1 Phi~`` only receives ``p`` diagonal R x R
blocks from the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .basis import BasisSystem, build_phi
from .coregionalization import LatentPrecision, ModelParams
from .domain import BAUGrid, Footprint, build_obs_aggregation, point_aggregation
from .errors import InvalidArgumentError, NumericalFailureError, SizeGuardError

LOG_2PI = math.log(2.0 * math.pi)
DENSE_LOGLIK_LIMIT = 500


class NoiseStructure:
    """Sparsity pattern of one process block ``s_xi C V_xi C^T + s_eps V_eps``.

    Observations are split into connected components of ``C V_xi C^T``
    (footprints sharing a BAU). Singletons are handled elementwise and larger
    components in batches of equal size.
    """

    def __init__(self, C: sp.csr_matrix, v_xi: np.ndarray, v_eps: np.ndarray):
        C = sp.csr_matrix(C)
        self.n = C.shape[0]
        W = sp.csr_matrix(C @ sp.diags(v_xi) @ C.T)
        self.W = W
        self.v_eps = np.asarray(v_eps, dtype=float)
        if self.n == 0:
            labels = np.zeros(0, dtype=int)
        else:
            _, labels = connected_components(W, directed=False)
        order = np.argsort(labels, kind="stable")
        counts = np.bincount(labels) if self.n else np.zeros(0, dtype=int)
        starts = np.concatenate([[0], np.cumsum(counts)])
        members = [order[starts[i]:starts[i + 1]] for i in range(counts.size)]
        single = [m[0] for m in members if m.size == 1]
        self.single = np.asarray(single, dtype=int)
        self.w_single = W.diagonal()[self.single] if self.n else np.zeros(0)
        self.e_single = self.v_eps[self.single]
        by_size: dict[int, list] = {}
        for m in members:
            if m.size > 1:
                by_size.setdefault(int(m.size), []).append(np.sort(m))
        self.groups = []
        Wd = W.tocsr()
        for k in sorted(by_size):
            idx = np.vstack(by_size[k])
            wb = np.stack([Wd[i][:, i].toarray() for i in idx])
            self.groups.append((idx, wb, self.v_eps[idx]))

    def factor(self, s_xi: float, s_eps: float) -> "NoiseFactor":
        d = s_xi * self.w_single + s_eps * self.e_single
        if np.any(d <= 0):
            raise NumericalFailureError("noise variance not positive", {"sigma2_xi": s_xi, "sigma2_eps": s_eps})
        logdet = float(np.sum(np.log(d)))
        inv_groups = []
        for idx, wb, eb in self.groups:
            blk = s_xi * wb + s_eps * eb[:, :, None] * np.eye(idx.shape[1])[None]
            sign, ld = np.linalg.slogdet(blk)
            if np.any(sign <= 0):
                raise NumericalFailureError("noise covariance block not positive definite",
                                            {"sigma2_xi": s_xi, "sigma2_eps": s_eps})
            logdet += float(ld.sum())
            inv_groups.append((idx, np.linalg.inv(blk)))
        return NoiseFactor(self.n, self.single, d, inv_groups, logdet)

    def dense(self, s_xi: float, s_eps: float) -> np.ndarray:
        return s_xi * self.W.toarray() + s_eps * np.diag(self.v_eps)


@dataclass(frozen=True)
class NoiseFactor:
    n: int
    single: np.ndarray
    d: np.ndarray
    inv_groups: list
    logdet: float

    def solve(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        if x.ndim == 1:
            out[self.single] = x[self.single] / self.d
            for idx, inv in self.inv_groups:
                out[idx] = np.einsum("nij,nj->ni", inv, x[idx])
        else:
            out[self.single] = x[self.single] / self.d[:, None]
            for idx, inv in self.inv_groups:
                out[idx] = np.einsum("nij,njk->nik", inv, x[idx])
        return out

    def inverse(self) -> sp.csr_matrix:
        rows, cols, vals = [self.single], [self.single], [1.0 / self.d]
        for idx, inv in self.inv_groups:
            k = idx.shape[1]
            rows.append(np.repeat(idx, k, axis=1).ravel())
            cols.append(np.tile(idx, (1, k)).ravel())
            vals.append(inv.ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, self.n))


@dataclass(frozen=True)
class ProcessBlock:
    C: sp.csr_matrix
    z: np.ndarray
    phi: np.ndarray          # C Phi, dense n_j x R
    f: np.ndarray            # C F, n_j x q
    noise: NoiseStructure
    v_xi: np.ndarray         # BAU-level weights


@dataclass(frozen=True)
class StackedModel:
    """Data, designs and noise structure for all processes.

    ``sigma2_xi`` and ``sigma2_eps`` are the noise scales the cached
    factorizations were built with; use :meth:`with_noise` to change them.
    """

    grid: BAUGrid
    basis: BasisSystem
    Phi: sp.csr_matrix
    F: np.ndarray
    blocks: tuple
    sigma2_xi: np.ndarray
    sigma2_eps: np.ndarray
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def p(self) -> int:
        return len(self.blocks)

    @property
    def R(self) -> int:
        return self.basis.R

    @property
    def q(self) -> int:
        return self.F.shape[1]

    @property
    def n_obs(self) -> tuple[int, ...]:
        return tuple(b.z.size for b in self.blocks)

    @property
    def N(self) -> int:
        return sum(self.n_obs)

    @property
    def obs_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_obs)]).astype(int)

    @property
    def Z(self) -> np.ndarray:
        return np.concatenate([b.z for b in self.blocks])

    @property
    def phi_tilde(self) -> sp.csr_matrix:
        return sp.block_diag([sp.csr_matrix(b.phi) for b in self.blocks], format="csr")

    @property
    def F_tilde(self) -> sp.csr_matrix:
        return sp.block_diag([sp.csr_matrix(b.f) for b in self.blocks], format="csr")

    def with_noise(self, sigma2_xi, sigma2_eps=None) -> "StackedModel":
        s_eps = self.sigma2_eps if sigma2_eps is None else np.asarray(sigma2_eps, dtype=float)
        return replace(self, sigma2_xi=np.asarray(sigma2_xi, dtype=float).copy(),
                       sigma2_eps=np.asarray(s_eps, dtype=float).copy())

    def with_data(self, z_list: Sequence[np.ndarray]) -> "StackedModel":
        blocks = []
        for b, z in zip(self.blocks, z_list):
            z = np.asarray(z, dtype=float)
            if z.shape != b.z.shape:
                raise InvalidArgumentError("replacement data must keep the observation layout")
            blocks.append(replace(b, z=z))
        return replace(self, blocks=tuple(blocks))

    def subset(self, processes: Sequence[int]) -> "StackedModel":
        """Model restricted to some processes (used for independent fits)."""
        idx = list(processes)
        return replace(self, blocks=tuple(self.blocks[j] for j in idx),
                       sigma2_xi=self.sigma2_xi[idx].copy(), sigma2_eps=self.sigma2_eps[idx].copy())

    @cached_property
    def factors(self) -> tuple:
        """Per process ``(NoiseFactor, D^-1 Phi_j, Phi_j^T D^-1 Phi_j)``."""
        out = []
        for j, b in enumerate(self.blocks):
            fac = b.noise.factor(float(self.sigma2_xi[j]), float(self.sigma2_eps[j]))
            dphi = fac.solve(b.phi)
            out.append((fac, dphi, b.phi.T @ dphi))
        return tuple(out)

    @property
    def logdet_D(self) -> float:
        return float(sum(f[0].logdet for f in self.factors))

    def D_inverse(self) -> sp.csr_matrix:
        return sp.block_diag([f[0].inverse() for f in self.factors], format="csr")

    def D_dense(self) -> np.ndarray:
        n = self.N
        out = np.zeros((n, n))
        off = self.obs_offsets
        for j, b in enumerate(self.blocks):
            out[off[j]:off[j + 1], off[j]:off[j + 1]] = b.noise.dense(self.sigma2_xi[j], self.sigma2_eps[j])
        return out

    def residuals(self, beta: np.ndarray) -> list[np.ndarray]:
        beta = np.asarray(beta, dtype=float).reshape(self.p, -1)
        return [b.z - b.f @ beta[j] if self.q else b.z.copy() for j, b in enumerate(self.blocks)]


def _as_aggregation(grid, supports):
    if sp.issparse(supports):
        return sp.csr_matrix(supports)
    if len(supports) and isinstance(supports[0], Footprint):
        return build_obs_aggregation(grid, supports)
    return point_aggregation(grid, np.asarray(supports, dtype=float).reshape(-1, 2))


def build_stacked_model(grid: BAUGrid, basis: BasisSystem, supports: Sequence, z: Sequence,
                        params: ModelParams, F: np.ndarray | None = None,
                        v_eps: Sequence | None = None, Phi=None) -> StackedModel:
    """Assemble the stacked model.

    ``supports[j]`` is one of: a list of :class:`Footprint`, an ``(n_j, 2)``
    array of point coordinates, or a ready ``n_j x B`` aggregation matrix.
    ``F`` is the ``B x q`` BAU covariate matrix (``None`` for no covariates).
    """
    p = params.p
    if len(supports) != p or len(z) != p:
        raise InvalidArgumentError(f"expected supports and data for {p} processes")
    if Phi is None:
        Phi = build_phi(grid, basis)
    F = np.zeros((grid.n_cells, 0)) if F is None else np.asarray(F, dtype=float).reshape(grid.n_cells, -1)
    if F.shape[1] != params.q:
        raise InvalidArgumentError(f"covariate matrix has {F.shape[1]} columns but beta has {params.q}")
    blocks = []
    for j in range(p):
        C = _as_aggregation(grid, supports[j])
        zj = np.asarray(z[j], dtype=float).ravel()
        if C.shape != (zj.size, grid.n_cells):
            raise InvalidArgumentError(
                f"process {j}: {zj.size} values but aggregation matrix has shape {C.shape}")
        if not np.all(np.isfinite(zj)):
            raise InvalidArgumentError(f"process {j}: non-finite observations")
        v_xi = np.ones(grid.n_cells) if params.v_xi is None else np.asarray(params.v_xi[j], dtype=float)
        ve = None
        if v_eps is not None:
            ve = v_eps[j]
        elif params.v_eps is not None:
            ve = params.v_eps[j]
        ve = np.ones(zj.size) if ve is None else np.asarray(ve, dtype=float)
        if v_xi.shape != (grid.n_cells,) or ve.shape != (zj.size,):
            raise InvalidArgumentError(f"process {j}: heteroscedasticity weights have the wrong length")
        phi_j = np.asarray((C @ Phi).todense())
        blocks.append(ProcessBlock(C, zj, phi_j, np.asarray(C @ F), NoiseStructure(C, v_xi, ve), v_xi))
    return StackedModel(grid, basis, sp.csr_matrix(Phi), F, tuple(blocks),
                        params.sigma2_xi.copy(), params.sigma2_eps.copy())


# ---------------------------------------------------------------- likelihood

@dataclass
class Capacity:
    """Cholesky of ``A = Q + Phi~^T D^-1 Phi~`` and the projected residual."""

    chol: tuple
    b: np.ndarray
    quad_D: float
    logdet_A: float


def capacity(model: StackedModel, prec: LatentPrecision, beta) -> Capacity:
    R = model.R
    A = prec.Q.toarray()
    b = np.zeros(model.p * R)
    quad = 0.0
    for j, (r, (fac, dphi, H)) in enumerate(zip(model.residuals(beta), model.factors)):
        A[j * R:(j + 1) * R, j * R:(j + 1) * R] += H
        b[j * R:(j + 1) * R] = dphi.T @ r
        quad += float(r @ fac.solve(r))
    try:
        chol = sla.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailureError(f"capacity matrix not positive definite ({exc})", {
            "sigma2_xi": model.sigma2_xi.tolist(),
            "Q_logdet": prec.logdet,
            "sigmas": [s.tolist() for s in prec.sigmas],
        }) from exc
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return Capacity(chol, b, quad, logdet_a)


def marginal_loglik(model: StackedModel, prec: LatentPrecision, beta) -> float:
    """``log N(Z; F~ beta, Phi~ Q^-1 Phi~^T + D)`` via Woodbury and the determinant lemma."""
    cap = capacity(model, prec, beta)
    quad = cap.quad_D - float(cap.b @ sla.cho_solve(cap.chol, cap.b))
    logdet = -prec.logdet + model.logdet_D + cap.logdet_A
    return -0.5 * (model.N * LOG_2PI + logdet + quad)


def dense_loglik_oracle(model: StackedModel, K: np.ndarray, beta) -> float:
    """Direct Gaussian log-density with the N x N covariance formed densely."""
    if model.N > DENSE_LOGLIK_LIMIT:
        raise SizeGuardError(f"dense likelihood of size {model.N} exceeds limit {DENSE_LOGLIK_LIMIT}")
    phi = model.phi_tilde.toarray()
    cov = phi @ K @ phi.T + model.D_dense()
    r = np.concatenate(model.residuals(beta))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalFailureError("dense covariance not positive definite")
    return -0.5 * (model.N * LOG_2PI + logdet + float(r @ np.linalg.solve(cov, r)))
