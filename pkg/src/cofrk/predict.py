"""Posterior predictive means and variances at BAU level and on regions.

The predictor is the smooth component ``F beta + Phi mu_c`` with variance
``diag(Phi Sigma_c Phi^T) + sigma2_xi V_xi``; the fine-scale term keeps its
prior mean of zero and measurement error is left out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .coregionalization import ModelParams
from .domain import point_aggregation
from .em import PosteriorState
from .errors import InvalidArgumentError
from .likelihood import StackedModel


@dataclass
class PredictionResult:
    bau_mean: np.ndarray        # (p, B)
    bau_var: np.ndarray         # (p, B)
    region_mean: np.ndarray | None = None   # (p, K)
    region_var: np.ndarray | None = None
    region_ids: list | None = None

    @property
    def p(self) -> int:
        return self.bau_mean.shape[0]

    def rows(self, include_bau: bool = True):
        """``(process_id, target_id, target_kind, mean, variance)`` with 1-based process ids."""
        for j in range(self.p):
            if include_bau:
                for b in range(self.bau_mean.shape[1]):
                    yield j + 1, b, "bau", self.bau_mean[j, b], self.bau_var[j, b]
            if self.region_mean is not None:
                ids = self.region_ids or list(range(self.region_mean.shape[1]))
                for k, rid in enumerate(ids):
                    yield j + 1, rid, "region", self.region_mean[j, k], self.region_var[j, k]

    def write_csv(self, path, include_bau: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["process_id", "target_id", "target_kind", "mean", "variance"])
            for pid, tid, kind, m, v in self.rows(include_bau):
                w.writerow([pid, tid, kind, repr(float(m)), repr(float(v))])


def posterior_bau(model: StackedModel, params: ModelParams, posterior: PosteriorState) -> PredictionResult:
    R, B = model.R, model.grid.n_cells
    Phi = sp.csr_matrix(model.Phi)
    means = np.empty((model.p, B))
    var = np.empty((model.p, B))
    for j, blk in enumerate(model.blocks):
        mu_j, cov_j = posterior.block(j, R)
        fixed = model.F @ params.beta[j] if params.q else 0.0
        means[j] = fixed + Phi @ mu_j
        smooth = np.asarray((Phi @ cov_j) * Phi.toarray()).sum(axis=1)
        var[j] = np.maximum(smooth, 0.0) + params.sigma2_xi[j] * blk.v_xi
    return PredictionResult(means, var)


def aggregate_predictions(result: PredictionResult, C_P, posterior: PosteriorState, params: ModelParams,
                          model: StackedModel, region_ids=None) -> PredictionResult:
    """Region means ``C_P mean`` and variances with BAU-independent fine scale."""
    C_P = sp.csr_matrix(C_P)
    B = result.bau_mean.shape[1]
    if C_P.shape[1] != B:
        raise InvalidArgumentError(f"aggregation matrix has {C_P.shape[1]} columns, grid has {B} BAUs")
    R = model.R
    Wphi = np.asarray((C_P @ model.Phi).todense())          # rows (Phi^T w_k)^T
    W2 = C_P.multiply(C_P)
    r_mean = np.asarray(C_P @ result.bau_mean.T).T
    r_var = np.empty_like(r_mean)
    for j, blk in enumerate(model.blocks):
        _, cov_j = posterior.block(j, R)
        smooth = np.einsum("kr,kr->k", Wphi @ cov_j, Wphi)
        r_var[j] = np.maximum(smooth, 0.0) + params.sigma2_xi[j] * (W2 @ blk.v_xi)
    return PredictionResult(result.bau_mean, result.bau_var, r_mean, r_var,
                            list(region_ids) if region_ids is not None else None)


def predict_points(model: StackedModel, params: ModelParams, posterior: PosteriorState, xy) -> tuple:
    """Means and variances ``(p, n)`` at point locations (each its containing BAU)."""
    res = posterior_bau(model, params, posterior)
    C = point_aggregation(model.grid, np.asarray(xy, dtype=float).reshape(-1, 2))
    agg = aggregate_predictions(res, C, posterior, params, model)
    return agg.region_mean, agg.region_var
