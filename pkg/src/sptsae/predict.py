"""Empirical best, plug-in and synthetic predictors of domain-time proportions.

All conditional expectations are approximated with antithetic Monte Carlo and
evaluated in log space (max-subtracted log-sum-exp) so that the products over
domains and periods do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import EXP_CAP, OverflowGuardError, PanelData, ParamVector, _checked_exp
from .spatial import SarCovariance, sample_sar


class PredictionError(RuntimeError):
    """Monte Carlo approximation degenerated (all weights underflowed)."""


@dataclass(frozen=True)
class McConfig:
    """Antithetic Monte Carlo sizes; effective draw counts are 2*s1 and 2*s2."""

    s1: int = 500
    s2: int = 700
    seed: int = 0

    def __post_init__(self):
        if self.s1 < 1 or self.s2 < 1:
            raise ValueError("draw counts s1 and s2 must be >= 1")


@dataclass(frozen=True)
class PredictionSet:
    """Per-cell predictions of p_dt and mu_dt = nu_dt p_dt."""

    kind: str
    p_hat: np.ndarray
    mu_hat: np.ndarray
    v1_hat: np.ndarray | None = None
    v2_hat: np.ndarray | None = None


def _finish(kind: str, data: PanelData, p_hat: np.ndarray,
            v1_hat=None, v2_hat=None) -> PredictionSet:
    if not np.all(np.isfinite(p_hat)) or (p_hat <= 0).any():
        raise PredictionError(f"{kind} predictor produced non-finite or nonpositive p_hat")
    return PredictionSet(kind=kind, p_hat=p_hat, mu_hat=data.nu * p_hat,
                         v1_hat=v1_hat, v2_hat=v2_hat)


def antithetic_draws(cov: SarCovariance, d: int, t: int, cfg: McConfig):
    """Antithetic draw pools: v1 of shape (2*s1, D), v2 of shape (2*s2, D, T)."""
    rng = np.random.default_rng(cfg.seed)
    v1_half = sample_sar(cov, rng, size=cfg.s1)
    v2_half = rng.standard_normal((cfg.s2, d, t))
    v1 = np.concatenate([v1_half, -v1_half], axis=0)
    v2 = np.concatenate([v2_half, -v2_half], axis=0)
    return v1, v2


def _outer_draws(cov: SarCovariance, cfg: McConfig):
    """Antithetic v1 pool of shape (2*s1, D) plus the generator for the
    inner pools, which are drawn fresh per v1 draw so that inner Monte Carlo
    noise averages out over the outer sum."""
    rng = np.random.default_rng(cfg.seed)
    v1_half = sample_sar(cov, rng, size=cfg.s1)
    v1 = np.concatenate([v1_half, -v1_half], axis=0)
    return v1, rng


def _log_kernel(y, nu, a):
    """log of exp{y a - nu e^a} for one cell and draw combination."""
    if np.max(a) > EXP_CAP:
        raise OverflowGuardError("linear predictor exceeded the exponent cap")
    return y * a - nu * np.exp(a)


def _inner_sums(theta: ParamVector, data: PanelData, v1: np.ndarray, s2: int,
                rng: np.random.Generator, chunk: int, dtype=np.float64):
    """Inner antithetic sums over fresh v2 pools, per (v1 draw, domain, period).

    Each v1 draw gets its own antithetic pool of 2*s2 v2 draws per cell, so
    inner Monte Carlo noise averages out over the outer sum.  Returns
    log sum_{s2} e^g and log sum_{s2} e^{g+a}, where g = y a - nu e^a and a is
    the linear predictor; their difference is the inner posterior mean of
    e^a = p_dt at fixed v1.
    """
    eta = (data.x @ theta.beta).astype(dtype)
    n1 = v1.shape[0]
    d, t = data.n_domains, data.n_periods
    y, nu = data.y.astype(dtype), data.nu.astype(dtype)
    v1 = v1.astype(dtype)
    log_inner = np.empty((n1, d, t))      # log sum_{s2} e^{g}
    log_inner_num = np.empty((n1, d, t))  # log sum_{s2} e^{g + a}
    for lo in range(0, n1, chunk):
        hi = min(lo + chunk, n1)
        z = rng.standard_normal((hi - lo, d, t, s2), dtype=dtype)
        a = np.concatenate([z, -z], axis=3)
        a *= dtype(theta.phi2)
        a += eta[None, :, :, None]
        a += dtype(theta.phi1) * v1[lo:hi, :, None, None]
        if np.max(a) > EXP_CAP:
            raise OverflowGuardError("linear predictor exceeded the exponent cap")
        ea = np.exp(a)
        g = y[None, :, :, None] * a - nu[None, :, :, None] * ea
        m = g.max(axis=3)
        g -= m[..., None]
        np.exp(g, out=g)
        log_inner[lo:hi] = m + np.log(g.sum(axis=3))
        g *= ea
        log_inner_num[lo:hi] = m + np.log(g.sum(axis=3))
    return log_inner, log_inner_num


def _approx_pass(theta: ParamVector, data: PanelData, cov: SarCovariance,
                 v1: np.ndarray, s2: int, rng: np.random.Generator,
                 chunk: int = 50):
    """Per-domain approximate EBP quantities.

    The outer antithetic sum runs over v1 draws and the inner sum over v2
    draws, nested as sum_{s1} prod_tau sum_{s2}; domain d conditions only on
    its own data.  The effect predictors use the same Gaussian-prior
    identities as the exact pass, with the marginal prior var(v1_d) = gamma_dd.
    """
    d, t = data.n_domains, data.n_periods
    if theta.phi1 == 0.0 and theta.phi2 == 0.0:
        return _checked_exp(data.x @ theta.beta), np.zeros(d), np.zeros((d, t))
    # single precision in the inner kernel: its rounding noise is orders of
    # magnitude below the Monte Carlo noise of the per-domain estimator
    log_inner, log_inner_num = _inner_sums(theta, data, v1, s2, rng, chunk,
                                           dtype=np.float32)
    logw = log_inner.sum(axis=2)                   # (n1, D)
    logb = logsumexp(logw, axis=0)                 # (D,)
    if not np.all(np.isfinite(logb)):
        raise PredictionError("approximate EBP denominator underflowed")
    log_num = logsumexp(logw[:, :, None] - log_inner + log_inner_num, axis=0)
    p_hat = np.exp(log_num - logb[:, None])
    resid = (data.y - data.nu * p_hat)
    v1_hat = theta.phi1 * cov.gamma_diag * resid.sum(axis=1)
    v2_hat = theta.phi2 * resid
    return p_hat, v1_hat, v2_hat


def _exact_adaptive(theta: ParamVector, data: PanelData, cov: SarCovariance,
                    cfg: McConfig):
    """Exact EBP with a pilot-tuned Gaussian importance proposal for v1.

    A pilot pass with prior draws locates the posterior of v1; the main pass
    then draws v1 from an inflated Gaussian fitted to it and reweights by
    prior/proposal.  The estimand is unchanged; the proposal only reduces the
    outer Monte Carlo variance.
    """
    d, t = data.n_domains, data.n_periods
    if theta.phi1 == 0.0 and theta.phi2 == 0.0:
        return _checked_exp(data.x @ theta.beta), np.zeros(d), np.zeros((d, t))
    rng = np.random.default_rng(cfg.seed)
    s1p, s2p = min(cfg.s1, 2000), min(cfg.s2, 200)
    a = np.eye(d) - cov.rho * cov.w

    def posterior_moments(v1p, log_extra):
        log_inner, _ = _inner_sums(theta, data, v1p, s2p, rng, chunk=50)
        logw = log_inner.sum(axis=(1, 2)) + log_extra
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = w @ v1p
        centered = v1p - mean
        c = np.einsum("s,si,sj->ij", w, centered, centered)
        return mean, c

    # pilot stage 1: locate the posterior with prior draws
    v1p = sample_sar(cov, rng, size=s1p)
    v1p = np.concatenate([v1p, -v1p], axis=0)
    mean, c = posterior_moments(v1p, 0.0)
    # pilot stage 2: refit the proposal from its own draws, which is robust
    # when the posterior sits far from the prior and stage 1 has few
    # effective draws
    lc = np.linalg.cholesky(2.0 * c + 1e-8 * np.eye(d))
    z = rng.standard_normal((s1p, d))
    v1p = np.concatenate([mean + z @ lc.T, mean - z @ lc.T], axis=0)
    u = v1p @ a.T
    zz = 0.5 * np.einsum("si,si->s", z, z)
    mean, c = posterior_moments(
        v1p, -0.5 * np.einsum("si,si->s", u, u) + np.concatenate([zz, zz]))

    lc = np.linalg.cholesky(1.5 * c + 1e-8 * np.eye(d))
    z = rng.standard_normal((cfg.s1, d))
    v1 = np.concatenate([mean + z @ lc.T, mean - z @ lc.T], axis=0)
    # log prior N(0, Gamma) minus log proposal, up to shared constants
    u = v1 @ a.T
    log_prior = -0.5 * np.einsum("si,si->s", u, u)
    zz = 0.5 * np.einsum("si,si->s", z, z)
    log_prop = -np.concatenate([zz, zz])
    log_inner, log_inner_num = _inner_sums(theta, data, v1, cfg.s2, rng, chunk=50)
    logw = log_inner.sum(axis=(1, 2)) + log_prior - log_prop
    m = logw.max()
    if not np.isfinite(m):
        raise PredictionError("exact EBP weights degenerated; use the approximate EBP")
    w = np.exp(logw - m)
    w /= w.sum()
    p_hat = np.einsum("s,sdt->dt", w, np.exp(log_inner_num - log_inner))
    resid = data.y - data.nu * p_hat
    v1_hat = theta.phi1 * (cov.gamma @ resid.sum(axis=1))
    v2_hat = theta.phi2 * resid
    return p_hat, v1_hat, v2_hat


def ebp_exact_p(theta_hat: ParamVector, data: PanelData, cov: SarCovariance,
                cfg: McConfig) -> PredictionSet:
    """Exact EBP of p_dt, conditioning jointly on all domains."""
    p_hat, _, _ = _exact_adaptive(theta_hat, data, cov, cfg)
    return _finish("ebp_exact", data, p_hat)


def ebp_approx_p(theta_hat: ParamVector, data: PanelData, cov: SarCovariance,
                 cfg: McConfig) -> PredictionSet:
    """Approximate EBP of p_dt, computed domain by domain."""
    v1, rng = _outer_draws(cov, cfg)
    p_hat, _, _ = _approx_pass(theta_hat, data, cov, v1, cfg.s2, rng)
    return _finish("ebp_approx", data, p_hat)


def ebp_random_effects(theta_hat: ParamVector, data: PanelData, cov: SarCovariance,
                       cfg: McConfig, mode: str = "approx"):
    """EBPs of the domain effects v1 and the domain-time effects v2."""
    if mode == "exact":
        _, v1_hat, v2_hat = _exact_adaptive(theta_hat, data, cov, cfg)
    elif mode == "approx":
        v1, rng = _outer_draws(cov, cfg)
        _, v1_hat, v2_hat = _approx_pass(theta_hat, data, cov, v1, cfg.s2, rng)
    else:
        raise ValueError(f"mode must be 'exact' or 'approx', got {mode!r}")
    return v1_hat, v2_hat


def ebp_all_approx(theta_hat: ParamVector, data: PanelData, cov: SarCovariance,
                   cfg: McConfig):
    """Approximate EBPs of p, v1 and v2 from a single shared Monte Carlo pass."""
    v1, rng = _outer_draws(cov, cfg)
    return _approx_pass(theta_hat, data, cov, v1, cfg.s2, rng)


def plug_in_p(theta_hat: ParamVector, data: PanelData, v1_hat: np.ndarray,
              v2_hat: np.ndarray) -> PredictionSet:
    """Plug-in predictor exp{x beta + phi1 v1_hat + phi2 v2_hat}."""
    z = (data.x @ theta_hat.beta + theta_hat.phi1 * np.asarray(v1_hat)[:, None]
         + theta_hat.phi2 * np.asarray(v2_hat))
    return _finish("plug_in", data, _checked_exp(z),
                   v1_hat=np.asarray(v1_hat), v2_hat=np.asarray(v2_hat))


def synthetic_p(theta_hat: ParamVector, data: PanelData) -> PredictionSet:
    """Synthetic (fixed-effects only) predictor exp{x beta}."""
    return _finish("synthetic", data, _checked_exp(data.x @ theta_hat.beta))


def bp_plug_in_p(theta_true: ParamVector, data: PanelData, cov: SarCovariance,
                 cfg: McConfig) -> PredictionSet:
    """Plug-in predictor evaluated at the true parameters with BP effects."""
    _, v1_hat, v2_hat = ebp_all_approx(theta_true, data, cov, cfg)
    out = plug_in_p(theta_true, data, v1_hat, v2_hat)
    return PredictionSet(kind="bp_plug_in", p_hat=out.p_hat, mu_hat=out.mu_hat,
                         v1_hat=out.v1_hat, v2_hat=out.v2_hat)
