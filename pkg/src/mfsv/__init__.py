"""Simulation and two-step estimation of factor stochastic volatility models."""

from .params import (
    ArsvParams,
    LoadingMatrix,
    ParamLayout,
    ReturnPanel,
    Theta1,
    Theta2,
    conditional_covariance,
    mu_from_psi,
    param_count,
    psi_from_arsv,
)
from .simulate import SimOutput, simulate, simulate_paths
from .factor_ml import (
    EmConfig,
    StaticFactorEstimate,
    em_fit,
    extract_series,
    pca_init,
    project_factors,
    residuals,
    rotate,
    sample_covariance,
)
from .garch import GarchAuxParams, fit_garch_pml, garch_loglik, garch_score, garch_variance_path
from .qml import QmlStart, log_square_transform, qml_fit
from .emm import EmmConfig, EmmSeriesResult, emm_fit_all, emm_fit_series, resolve_H
from .inference import (
    AuxiliaryModel,
    JacobianConfig,
    VcovResult,
    delta_method_mu,
    emm_vcov,
    simulated_fisher,
    static_factor_score,
)
from .montecarlo import (
    McDesign,
    McResult,
    build_design_params,
    mse,
    outlier_check,
    run_study,
    std_ratio,
)
from .bpf import FilterOutput, bootstrap_filter
from .pipeline import EstimateConfig, EstimateResult, estimate, ingest, scree

__version__ = "0.1.0"

__all__ = [
    "ArsvParams",
    "AuxiliaryModel",
    "EmConfig",
    "EmmConfig",
    "EmmSeriesResult",
    "EstimateConfig",
    "EstimateResult",
    "FilterOutput",
    "GarchAuxParams",
    "JacobianConfig",
    "LoadingMatrix",
    "McDesign",
    "McResult",
    "ParamLayout",
    "QmlStart",
    "ReturnPanel",
    "SimOutput",
    "StaticFactorEstimate",
    "Theta1",
    "Theta2",
    "VcovResult",
    "bootstrap_filter",
    "build_design_params",
    "conditional_covariance",
    "delta_method_mu",
    "em_fit",
    "emm_fit_all",
    "emm_fit_series",
    "emm_vcov",
    "estimate",
    "extract_series",
    "fit_garch_pml",
    "garch_loglik",
    "garch_score",
    "garch_variance_path",
    "ingest",
    "log_square_transform",
    "mse",
    "mu_from_psi",
    "outlier_check",
    "param_count",
    "pca_init",
    "project_factors",
    "psi_from_arsv",
    "qml_fit",
    "residuals",
    "resolve_H",
    "rotate",
    "run_study",
    "sample_covariance",
    "scree",
    "simulate",
    "simulate_paths",
    "simulated_fisher",
    "static_factor_score",
    "std_ratio",
]
