"""Latent coefficient covariance: level-wise SAR lattices and cross-process
covariances combined into the sparse precision Q (and a dense K for checks).

Coefficient vectors use two orderings:

* process-major ``(j, level, r)``, the order of ``c`` everywhere outside this
  module, index ``j * R + offset[level] + r``;
* level-major ``(level, j, r)``, index ``p * offset[level] + j * R_level + r``,
  in which Q is block diagonal with blocks ``inv(Sigma_l) kron B_l B_l^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .basis import BasisSystem
from .errors import InvalidArgumentError, SizeGuardError, ValidityError

RHO_MARGIN = 1e-6
DENSE_K_LIMIT = 2000
PARAMS_VERSION = 1


def _vec(x, p=None, name="value"):
    a = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    if p is not None and a.shape != (p,):
        raise InvalidArgumentError(f"{name} must have length {p}, got shape {a.shape}")
    return a


@dataclass
class ModelParams:
    """All model parameters; per-process quantities are length-``p`` arrays.

    ``beta`` is ``p x q`` (``q`` may be zero). ``v_xi`` and ``v_eps`` hold the
    known heteroscedasticity weights per process (``None`` means all ones).
    """

    sigma2_s: np.ndarray
    sigma2_xi: np.ndarray
    sigma2_eps: np.ndarray
    kappa0: float = 0.05
    r0: float = 0.0
    r1: float = 0.0
    beta: np.ndarray | None = None
    nu: np.ndarray | None = None
    v_xi: list | None = field(default=None, repr=False)
    v_eps: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma2_s = _vec(self.sigma2_s, name="sigma2_s")
        p = self.sigma2_s.size
        self.sigma2_xi = _vec(self.sigma2_xi, p, "sigma2_xi")
        self.sigma2_eps = _vec(self.sigma2_eps, p, "sigma2_eps")
        self.nu = np.full(p, 0.5) if self.nu is None else _vec(self.nu, p, "nu")
        if self.beta is None:
            self.beta = np.zeros((p, 0))
        self.beta = np.asarray(self.beta, dtype=float).reshape(p, -1).copy()
        self.kappa0, self.r0, self.r1 = float(self.kappa0), float(self.r0), float(self.r1)

    @property
    def p(self) -> int:
        return self.sigma2_s.size

    @property
    def q(self) -> int:
        return self.beta.shape[1]

    def validate(self) -> "ModelParams":
        for name in ("sigma2_s", "sigma2_xi", "sigma2_eps", "nu"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise InvalidArgumentError(f"{name} must be finite and strictly positive, got {v}")
        if self.r1 < 0:
            raise InvalidArgumentError(f"r1 must be nonnegative, got {self.r1}")
        check_rho(self.r0, self.p)
        return self

    def copy(self, **changes) -> "ModelParams":
        # __post_init__ copies every array field
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "version": PARAMS_VERSION,
            "p": self.p,
            "q": self.q,
            "beta": self.beta.tolist(),
            "sigma2_s": self.sigma2_s.tolist(),
            "nu": self.nu.tolist(),
            "r0": self.r0,
            "r1": self.r1,
            "kappa0": self.kappa0,
            "sigma2_xi": self.sigma2_xi.tolist(),
            "sigma2_eps": self.sigma2_eps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        version = d.get("version", PARAMS_VERSION)
        if version > PARAMS_VERSION:
            raise InvalidArgumentError(f"unsupported params version {version}")
        p = len(d["sigma2_s"])
        beta = np.asarray(d.get("beta", [[]] * p), dtype=float).reshape(p, -1)
        return cls(
            sigma2_s=d["sigma2_s"],
            sigma2_xi=d["sigma2_xi"],
            sigma2_eps=d["sigma2_eps"],
            kappa0=d["kappa0"],
            r0=d.get("r0", 0.0),
            r1=d.get("r1", 0.0),
            beta=beta,
            nu=d.get("nu"),
        )


# ---------------------------------------------------------------- scalars

def alpha_weights(nu: float, L: int) -> np.ndarray:
    """Level variance shares ``2^(-2 nu l)``, normalized to sum to one."""
    if not nu > 0 or int(L) != L or L < 1:
        raise InvalidArgumentError(f"need nu > 0 and integer L >= 1, got nu={nu}, L={L}")
    w = 2.0 ** (-2.0 * nu * np.arange(1, int(L) + 1))
    return w / w.sum()


def alpha_matrix(nu: np.ndarray, L: int) -> np.ndarray:
    """``(L, p)`` array of level shares, one column per process."""
    return np.column_stack([alpha_weights(v, L) for v in np.atleast_1d(nu)])


def rho_at_level(r0: float, r1: float, level: int) -> float:
    if level < 1:
        raise InvalidArgumentError("levels are numbered from 1")
    return r0 * math.exp(-r1 * (level - 1))


def kappa2_at_level(kappa0: float, level: int) -> float:
    return math.exp(kappa0 * level)


def rho_bounds(p: int) -> tuple[float, float]:
    lo = -1.0 / (p - 1) if p > 1 else -1.0
    return lo, 1.0


def check_rho(rho: float, p: int) -> None:
    if p < 2:
        return
    lo, hi = rho_bounds(p)
    if not (lo + RHO_MARGIN < rho < hi - RHO_MARGIN):
        raise ValidityError(f"correlation {rho} outside the valid interval ({lo}, {hi}) for p={p}")


# ---------------------------------------------------------------- SAR lattice

def _path_adjacency(n: int) -> sp.csr_matrix:
    return sp.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n), format="csr")


def lattice_adjacency(gx: int, gy: int) -> sp.csr_matrix:
    """Rook adjacency of a row-major ``gx`` by ``gy`` lattice, no wraparound."""
    a = sp.kron(sp.identity(gy), _path_adjacency(gx)) + sp.kron(_path_adjacency(gy), sp.identity(gx))
    return sp.csr_matrix(a)


def build_sar(gx: int, gy: int, kappa2: float) -> sp.csr_matrix:
    """SAR matrix with ``4 + kappa2`` on the diagonal and ``-1`` for neighbours."""
    if kappa2 < 0:
        raise InvalidArgumentError("kappa^2 must be nonnegative")
    n = gx * gy
    b = (4.0 + kappa2) * sp.identity(n, format="csr") - lattice_adjacency(gx, gy)
    b = sp.csr_matrix(b)
    b.eliminate_zeros()
    return b


def sar_base_spectrum(gx: int, gy: int) -> np.ndarray:
    """Eigenvalues of ``B - kappa2 I``; the lattice Laplacian spectrum is closed form."""
    ax = 2.0 * np.cos(np.pi * np.arange(1, gx + 1) / (gx + 1))
    ay = 2.0 * np.cos(np.pi * np.arange(1, gy + 1) / (gy + 1))
    return (4.0 - ax[None, :] - ay[:, None]).ravel()


def sar_logdet(gx: int, gy: int, kappa2: float) -> float:
    return float(np.sum(np.log(sar_base_spectrum(gx, gy) + kappa2)))


# ---------------------------------------------------------------- cross-process

def equicorrelation(rho: float, p: int) -> np.ndarray:
    return (1.0 - rho) * np.eye(p) + rho * np.ones((p, p))


def equicorrelation_inverse(rho: float, p: int) -> np.ndarray:
    check_rho(rho, p)
    return (np.eye(p) - (rho / (1.0 + (p - 1) * rho)) * np.ones((p, p))) / (1.0 - rho)


def equicorrelation_logdet(rho: float, p: int) -> float:
    """``log |R(rho)| = (p-1) log(1-rho) + log(1+(p-1) rho)``."""
    return (p - 1) * math.log1p(-rho) + math.log1p((p - 1) * rho)


def build_sigma_level(sigma2_s, alpha_l, rho: float) -> np.ndarray:
    """Level covariance ``D R(rho) D`` with ``D = diag(sqrt(alpha * sigma2_s))``."""
    sigma2_s = np.atleast_1d(np.asarray(sigma2_s, dtype=float))
    alpha_l = np.atleast_1d(np.asarray(alpha_l, dtype=float))
    p = sigma2_s.size
    check_rho(rho, p)
    d = np.sqrt(alpha_l * sigma2_s)
    return d[:, None] * equicorrelation(rho, p) * d[None, :]


def level_sigmas(params: ModelParams, L: int) -> list[np.ndarray]:
    alpha = alpha_matrix(params.nu, L)
    return [
        build_sigma_level(params.sigma2_s, alpha[l], rho_at_level(params.r0, params.r1, l + 1))
        for l in range(L)
    ]


# ---------------------------------------------------------------- assembly

def level_permutation(p: int, sizes: Sequence[int]) -> np.ndarray:
    """``perm[k]`` is the process-major index of level-major position ``k``."""
    sizes = list(sizes)
    R = sum(sizes)
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    perm = np.empty(p * R, dtype=np.int64)
    for l, Rl in enumerate(sizes):
        for j in range(p):
            start = p * off[l] + j * Rl
            perm[start:start + Rl] = j * R + off[l] + np.arange(Rl)
    return perm


def level_to_process(mat_level, perm: np.ndarray):
    """Apply ``P^T M P`` to a level-major matrix (dense or sparse)."""
    inv = np.argsort(perm)
    if sp.issparse(mat_level):
        m = sp.csr_matrix(mat_level)
        return m[inv][:, inv].tocsr()
    return mat_level[np.ix_(inv, inv)]


def process_to_level(mat_proc, perm: np.ndarray):
    if sp.issparse(mat_proc):
        m = sp.csr_matrix(mat_proc)
        return m[perm][:, perm].tocsr()
    return mat_proc[np.ix_(perm, perm)]


@dataclass(frozen=True)
class LatentPrecision:
    """Sparse process-major precision with its level-major factors."""

    Q: sp.csr_matrix
    perm: np.ndarray
    sigmas: tuple
    bbt: tuple
    sizes: tuple
    logdet: float

    @property
    def p(self) -> int:
        return self.sigmas[0].shape[0]

    def level_blocks(self) -> list[sp.csr_matrix]:
        return [sp.csr_matrix(sp.kron(np.linalg.inv(s), b)) for s, b in zip(self.sigmas, self.bbt)]

    def level_major(self) -> sp.csr_matrix:
        return sp.block_diag(self.level_blocks(), format="csr")


def build_precision(params: ModelParams, basis: BasisSystem) -> LatentPrecision:
    params.validate()
    p, L = params.p, basis.L
    sigmas = level_sigmas(params, L)
    bbts, logdet = [], 0.0
    for l, lv in enumerate(basis.levels):
        k2 = kappa2_at_level(params.kappa0, l + 1)
        b = build_sar(lv.gx, lv.gy, k2)
        bbts.append(sp.csr_matrix(b @ b.T))
        _, logdet_sigma = np.linalg.slogdet(sigmas[l])
        logdet += -lv.size * logdet_sigma + 2.0 * p * sar_logdet(lv.gx, lv.gy, k2)
    perm = level_permutation(p, basis.sizes)
    blocks = [sp.kron(np.linalg.inv(s), b) for s, b in zip(sigmas, bbts)]
    q_level = sp.block_diag(blocks, format="csr")
    q = level_to_process(q_level, perm)
    return LatentPrecision(q, perm, tuple(sigmas), tuple(bbts), basis.sizes, float(logdet))


def build_K_dense(params: ModelParams, basis: BasisSystem) -> np.ndarray:
    """Dense process-major covariance of ``c``, for testing only."""
    params.validate()
    p = params.p
    if p * basis.R > DENSE_K_LIMIT:
        raise SizeGuardError(f"dense K of size {p * basis.R} exceeds limit {DENSE_K_LIMIT}")
    sigmas = level_sigmas(params, basis.L)
    blocks = []
    for l, lv in enumerate(basis.levels):
        b = build_sar(lv.gx, lv.gy, kappa2_at_level(params.kappa0, l + 1)).toarray()
        blocks.append(np.kron(sigmas[l], np.linalg.inv(b @ b.T)))
    n = p * basis.R
    k_level = np.zeros((n, n))
    start = 0
    for blk in blocks:
        k_level[start:start + blk.shape[0], start:start + blk.shape[0]] = blk
        start += blk.shape[0]
    k = level_to_process(k_level, level_permutation(p, basis.sizes))
    return 0.5 * (k + k.T)
