"""Parametric bootstrap: significance tests, MSE estimates and percentile CIs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from . import predict
from .fit import FitError, FitOptions, FitResult, fit_mm
from .model import (ModelError, ModelSpec, OverflowGuardError, PanelData,
                    ParamVector, _checked_exp)
from .spatial import ProximityMatrix, SarCovariance, sample_sar, sar_covariance

MAX_FAILURE_FRACTION = 0.10


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed to converge."""


@dataclass(frozen=True)
class BootstrapTestResult:
    null_model: ModelSpec
    alt_model: ModelSpec
    statistic_observed: float
    statistics_boot: np.ndarray
    p_value: float
    b: int
    failures: int


@dataclass(frozen=True)
class MseEstimate:
    kind: str
    mse: np.ndarray
    rrmse: np.ndarray
    b: int
    failures: int


def generate_bootstrap_data(theta: ParamVector, data: PanelData, cov: SarCovariance,
                            rng: np.random.Generator) -> PanelData:
    """Resample a panel from the fitted model (or a null restriction of it)."""
    boot, _, _, _ = _generate_with_truth(theta, data, cov, rng)
    return boot


def _generate_with_truth(theta: ParamVector, data: PanelData, cov: SarCovariance,
                         rng: np.random.Generator):
    d, t = data.n_domains, data.n_periods
    # parameters fixed at zero by the null never enter the resampling
    v1 = sample_sar(cov, rng) if theta.phi1 != 0.0 else np.zeros(d)
    v2 = rng.standard_normal((d, t)) if theta.phi2 != 0.0 else np.zeros((d, t))
    p_star = _checked_exp(data.x @ theta.beta + theta.phi1 * v1[:, None] + theta.phi2 * v2)
    y_star = rng.poisson(data.nu * p_star)
    return data.replace_counts(y_star), p_star, v1, v2


def _replicate_seeds(rng: np.random.Generator, b: int) -> list:
    """Independent child seeds; deterministic and order-insensitive."""
    ss = np.random.SeedSequence(rng.integers(0, 2 ** 63 - 1))
    return ss.spawn(b)


def _check_failures(failures: int, b: int, what: str) -> None:
    if failures > MAX_FAILURE_FRACTION * b:
        raise BootstrapError(
            f"{failures} of {b} bootstrap replicates failed to converge during {what}")
    if failures:
        warnings.warn(f"{failures} of {b} bootstrap replicates excluded ({what})",
                      RuntimeWarning)


def _null_test(data: PanelData, w: ProximityMatrix, b: int, rng: np.random.Generator,
               alt_spec: ModelSpec, null_spec: ModelSpec, statistic, null_cov_rho,
               opts: FitOptions, n_jobs: int) -> BootstrapTestResult:
    alt_fit = fit_mm(data, w, alt_spec, opts)
    null_fit = fit_mm(data, w, null_spec, opts)
    observed = statistic(alt_fit.theta_hat)
    theta0 = null_spec.constrain(null_fit.theta_hat)
    cov0 = sar_covariance(w, null_cov_rho(theta0))
    seeds = _replicate_seeds(rng, b)

    def one(seed_seq):
        child = np.random.default_rng(seed_seq)
        boot = generate_bootstrap_data(theta0, data, cov0, child)
        try:
            refit = fit_mm(boot, w, alt_spec, opts)
        except (FitError, OverflowGuardError, np.linalg.LinAlgError):
            return None
        if not refit.converged:
            return None
        return statistic(refit.theta_hat)

    stats = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    kept = np.array([s for s in stats if s is not None])
    failures = b - kept.size
    _check_failures(failures, b, f"test of {null_spec.variant} vs {alt_spec.variant}")
    p_value = float((kept > observed).sum() / kept.size)
    return BootstrapTestResult(null_model=null_spec, alt_model=alt_spec,
                               statistic_observed=float(observed),
                               statistics_boot=kept, p_value=p_value,
                               b=int(kept.size), failures=failures)


def _family(data: PanelData) -> tuple[ModelSpec, dict]:
    """Alternative model and per-test null models for the panel's shape."""
    if data.n_periods == 1:
        return ModelSpec("S1"), {"phi1": ModelSpec("M0"), "rho": ModelSpec("M1")}
    return ModelSpec("ST1"), {"phi1": ModelSpec("T1_2"), "rho": ModelSpec("T1"),
                              "phi2": ModelSpec("ST1_1")}


def test_phi1(data: PanelData, w: ProximityMatrix, b: int, rng: np.random.Generator,
              opts: FitOptions = FitOptions(), n_jobs: int = 1) -> BootstrapTestResult:
    """Bootstrap test of H0: phi1 = 0 (no domain random effect)."""
    alt, nulls = _family(data)
    return _null_test(data, w, b, rng, alt, nulls["phi1"],
                      statistic=lambda th: th.phi1,
                      null_cov_rho=lambda th: 0.0, opts=opts, n_jobs=n_jobs)


def test_rho(data: PanelData, w: ProximityMatrix, b: int, rng: np.random.Generator,
             opts: FitOptions = FitOptions(), n_jobs: int = 1) -> BootstrapTestResult:
    """Bootstrap test of H0: rho = 0 (no spatial autocorrelation), two-sided."""
    alt, nulls = _family(data)
    return _null_test(data, w, b, rng, alt, nulls["rho"],
                      statistic=lambda th: abs(th.rho),
                      null_cov_rho=lambda th: 0.0, opts=opts, n_jobs=n_jobs)


def test_phi2(data: PanelData, w: ProximityMatrix, b: int, rng: np.random.Generator,
              opts: FitOptions = FitOptions(), n_jobs: int = 1) -> BootstrapTestResult:
    """Bootstrap test of H0: phi2 = 0 (no domain-time random effect)."""
    alt, nulls = _family(data)
    if "phi2" not in nulls:
        raise ModelError("phi2 test requires T > 1")
    return _null_test(data, w, b, rng, alt, nulls["phi2"],
                      statistic=lambda th: th.phi2,
                      null_cov_rho=lambda th: th.rho, opts=opts, n_jobs=n_jobs)


def _predict_p(kind: str, theta: ParamVector, data: PanelData, w: ProximityMatrix,
               cfg: predict.McConfig) -> np.ndarray:
    cov = sar_covariance(w, theta.rho)
    if kind == "synthetic":
        return predict.synthetic_p(theta, data).p_hat
    if kind == "ebp-approx":
        return predict.ebp_approx_p(theta, data, cov, cfg).p_hat
    if kind == "ebp-exact":
        return predict.ebp_exact_p(theta, data, cov, cfg).p_hat
    if kind == "plugin":
        _, v1_hat, v2_hat = predict.ebp_all_approx(theta, data, cov, cfg)
        return predict.plug_in_p(theta, data, v1_hat, v2_hat).p_hat
    raise ValueError(f"unknown predictor kind {kind!r}")


def bootstrap_mse(fit: FitResult, data: PanelData, w: ProximityMatrix,
                  kind: str = "ebp-approx", b: int = 500,
                  cfg: predict.McConfig = predict.McConfig(),
                  rng: np.random.Generator | None = None,
                  n_jobs: int = 1) -> MseEstimate:
    """Parametric-bootstrap MSE and relative root-MSE of a p_dt predictor."""
    if not fit.converged:
        raise BootstrapError("bootstrap MSE requires a converged fit")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = fit.theta_hat
    cov = sar_covariance(w, theta.rho)
    seeds = _replicate_seeds(rng, b)
    opts = FitOptions(option=fit.option)

    def one(seed_seq):
        child = np.random.default_rng(seed_seq)
        boot, p_star, _, _ = _generate_with_truth(theta, data, cov, child)
        try:
            refit = fit_mm(boot, w, fit.spec, opts)
            if not refit.converged:
                return None
            sub_cfg = predict.McConfig(s1=cfg.s1, s2=cfg.s2,
                                       seed=int(child.integers(0, 2 ** 31)))
            p_hat_star = _predict_p(kind, refit.theta_hat, boot, w, sub_cfg)
        except (FitError, OverflowGuardError, predict.PredictionError,
                np.linalg.LinAlgError):
            return None
        return (p_hat_star - p_star) ** 2

    sq = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    kept = [s for s in sq if s is not None]
    failures = b - len(kept)
    _check_failures(failures, b, f"MSE bootstrap of {kind}")
    mse = np.mean(kept, axis=0)
    p_hat = _predict_p(kind, theta, data, w, cfg)
    rrmse = np.sqrt(mse) / p_hat
    return MseEstimate(kind=kind, mse=mse, rrmse=rrmse, b=len(kept), failures=failures)


def bootstrap_ci(fit: FitResult, data: PanelData, w: ProximityMatrix, b: int,
                 level: float, rng: np.random.Generator,
                 n_jobs: int = 1) -> dict:
    """Percentile bootstrap confidence intervals for the free parameters."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    theta = fit.theta_hat
    cov = sar_covariance(w, theta.rho)
    seeds = _replicate_seeds(rng, b)
    opts = FitOptions(option=fit.option)

    def one(seed_seq):
        child = np.random.default_rng(seed_seq)
        boot = generate_bootstrap_data(theta, data, cov, child)
        try:
            refit = fit_mm(boot, w, fit.spec, opts)
        except (FitError, OverflowGuardError, np.linalg.LinAlgError):
            return None
        return refit.theta_hat.as_array() if refit.converged else None

    draws = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    kept = np.array([d for d in draws if d is not None])
    failures = b - kept.shape[0]
    _check_failures(failures, b, "percentile CI bootstrap")
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(kept, alpha, axis=0)
    hi = np.quantile(kept, 1.0 - alpha, axis=0)
    names = [f"beta{k + 1}" for k in range(theta.p)] + ["phi1", "phi2", "rho"]
    free = fit.spec.param_indices(theta.p)
    return {names[i]: (float(lo[i]), float(hi[i])) for i in free}
