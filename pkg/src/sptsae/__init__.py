"""Spatio-temporal Poisson mixed models for small area estimation.

Area-level Poisson models with SAR(1)-correlated domain effects and
independent domain-time effects, fitted by the method of moments, with
Monte Carlo empirical best prediction and parametric-bootstrap inference.
"""

from .bootstrap import (BootstrapError, BootstrapTestResult, MseEstimate,
                        bootstrap_ci, bootstrap_mse, generate_bootstrap_data,
                        test_phi1, test_phi2, test_rho)
from .estimator import SpatioTemporalPoissonEstimator
from .fit import FitError, FitOptions, FitResult, fit_glm_poisson, fit_mm, seed_parameters
from .model import (ModelError, ModelSpec, OverflowGuardError, PanelData,
                    ParamVector, moment_jacobian, moment_residuals,
                    pearson_residuals)
from .predict import (McConfig, PredictionError, PredictionSet, bp_plug_in_p,
                      ebp_approx_p, ebp_exact_p, ebp_random_effects, plug_in_p,
                      synthetic_p)
from .simstudy import SimScenario, SimTable, generate_scenario_data, run_sim1, run_sim2
from .spatial import (ProximityMatrix, SarCovariance, SpatialError,
                      build_adjacency_proximity, build_distance_proximity,
                      build_knn_proximity, build_seven_diagonal, from_raw,
                      morans_i, sample_sar, sar_covariance)

__version__ = "0.1.0"

__all__ = [
    "BootstrapError", "BootstrapTestResult", "FitError", "FitOptions", "FitResult",
    "McConfig", "ModelError", "ModelSpec", "MseEstimate", "OverflowGuardError",
    "PanelData", "ParamVector", "PredictionError", "PredictionSet",
    "ProximityMatrix", "SarCovariance", "SimScenario", "SimTable", "SpatialError",
    "SpatioTemporalPoissonEstimator", "bootstrap_ci", "bootstrap_mse",
    "bp_plug_in_p", "build_adjacency_proximity", "build_distance_proximity",
    "build_knn_proximity", "build_seven_diagonal", "ebp_approx_p", "ebp_exact_p",
    "ebp_random_effects", "fit_glm_poisson", "fit_mm", "from_raw",
    "generate_bootstrap_data", "generate_scenario_data", "moment_jacobian",
    "moment_residuals", "morans_i", "pearson_residuals", "plug_in_p", "run_sim1",
    "run_sim2", "sample_sar", "sar_covariance", "seed_parameters",
    "synthetic_p", "test_phi1", "test_phi2", "test_rho",
]
