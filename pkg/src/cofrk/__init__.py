"""Multivariate fixed rank co-kriging with multiresolution GMRF basis coefficients."""

from .basis import BasisSystem, build_basis, build_default_basis, build_phi, eval_parent_bisquare
from .coregionalization import ModelParams, build_K_dense, build_precision
from .domain import BAUGrid, Footprint, build_bau_grid, build_obs_aggregation, build_pred_aggregation
from .em import FitConfig, FitResult, e_step, fit, initial_params
from .likelihood import build_stacked_model, dense_loglik_oracle, marginal_loglik
from .predict import aggregate_predictions, posterior_bau

__version__ = "0.1.0"

__all__ = [
    "BasisSystem", "build_basis", "build_default_basis", "build_phi", "eval_parent_bisquare",
    "ModelParams", "build_K_dense", "build_precision",
    "BAUGrid", "Footprint", "build_bau_grid", "build_obs_aggregation", "build_pred_aggregation",
    "FitConfig", "FitResult", "e_step", "fit", "initial_params",
    "build_stacked_model", "dense_loglik_oracle", "marginal_loglik",
    "aggregate_predictions", "posterior_bau",
]
