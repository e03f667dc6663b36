"""scikit-learn style estimator wrapper around the functional fitting API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import predict
from .fit import FitOptions, fit_mm
from .model import ModelSpec, PanelData
from .spatial import ProximityMatrix, sar_covariance


class SpatioTemporalPoissonEstimator(BaseEstimator):
    """Poisson mixed model with SAR(1) domain effects, fit by moments.

    Parameters follow scikit-learn conventions so the estimator composes
    with `clone`, `get_params` and `set_params`.  `fit` takes a PanelData
    and a ProximityMatrix instead of (X, y) because the model is defined on
    a balanced domain-by-period panel, not on flat samples.
    """

    def __init__(self, model: str = "ST1", option: str = "opt2",
                 tol: float = 1e-8, max_iter: int = 100,
                 s1: int = 500, s2: int = 700, seed: int = 0):
        self.model = model
        self.option = option
        self.tol = tol
        self.max_iter = max_iter
        self.s1 = s1
        self.s2 = s2
        self.seed = seed

    def fit(self, data: PanelData, w: ProximityMatrix):
        spec = ModelSpec(self.model)
        opts = FitOptions(option=self.option, tol=self.tol, max_iter=self.max_iter,
                          moran_mc=predict.McConfig(s1=100, s2=100, seed=self.seed))
        result = fit_mm(data, w, spec, opts)
        self.result_ = result
        self.theta_ = result.theta_hat
        self.converged_ = result.converged
        self.w_ = w
        return self

    def predict(self, data: PanelData, kind: str = "ebp-approx") -> np.ndarray:
        """Predicted proportions p_dt for the requested predictor kind."""
        if not hasattr(self, "theta_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        theta = self.theta_
        cfg = predict.McConfig(s1=self.s1, s2=self.s2, seed=self.seed)
        cov = sar_covariance(self.w_, theta.rho)
        if kind == "synthetic":
            return predict.synthetic_p(theta, data).p_hat
        if kind == "ebp-exact":
            return predict.ebp_exact_p(theta, data, cov, cfg).p_hat
        if kind == "ebp-approx":
            return predict.ebp_approx_p(theta, data, cov, cfg).p_hat
        if kind == "plugin":
            p_hat, v1_hat, v2_hat = predict.ebp_all_approx(theta, data, cov, cfg)
            return predict.plug_in_p(theta, data, v1_hat, v2_hat).p_hat
        raise ValueError(f"unknown predictor kind {kind!r}")
