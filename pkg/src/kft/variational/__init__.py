"""Variational Bayesian inference for kernel tensor-train regression."""
from .kl import (
    DenseMode,
    LowRankMode,
    kl_kronecker,
    kl_multivariate_rff,
    kl_univariate,
    kron_cholesky,
    logdet_lowrank_plus_diag,
)
from .predictive import (
    ALPHAS,
    CalibrationReport,
    calibration,
    calibration_heatmap,
    coverage,
    mean_prediction,
    posterior_predictive,
    write_heatmap_csv,
)
from .recon import (
    chain_second_moment,
    elbo,
    expected_loglik,
    output_moments,
    recon_ls_multivariate,
    recon_ls_univariate,
    recon_wlr_multivariate,
    recon_wlr_univariate,
    vi_loss_terms,
)
from .state import FAMILIES, PriorHyper, VariationalKft, kronecker_sample, sample_core
from .training import VariationalResult, vi_param_groups, vi_train

__all__ = [
    "ALPHAS",
    "FAMILIES",
    "CalibrationReport",
    "DenseMode",
    "LowRankMode",
    "PriorHyper",
    "VariationalKft",
    "VariationalResult",
    "calibration",
    "calibration_heatmap",
    "chain_second_moment",
    "coverage",
    "elbo",
    "expected_loglik",
    "kl_kronecker",
    "kl_multivariate_rff",
    "kl_univariate",
    "kron_cholesky",
    "kronecker_sample",
    "logdet_lowrank_plus_diag",
    "mean_prediction",
    "output_moments",
    "posterior_predictive",
    "recon_ls_multivariate",
    "recon_ls_univariate",
    "recon_wlr_multivariate",
    "recon_wlr_univariate",
    "sample_core",
    "vi_loss_terms",
    "vi_param_groups",
    "vi_train",
    "write_heatmap_csv",
]
