import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from sptsae.model import PanelData, ParamVector
from sptsae.predict import (McConfig, PredictionError, antithetic_draws,
                            bp_plug_in_p, ebp_all_approx, ebp_approx_p,
                            ebp_exact_p, ebp_random_effects, plug_in_p,
                            synthetic_p)
from sptsae.spatial import from_raw, sar_covariance

from conftest import make_panel, ring_w


def gh_posterior(theta, data, cov, n=30):
    """Tensor Gauss-Hermite posterior means of (p, v1, v2) for D = 2, T = 1."""
    xq, wq = hermegauss(n)
    wq = wq / wq.sum()
    z = np.array(np.meshgrid(xq, xq, xq, xq, indexing="ij")).reshape(4, -1)
    wts = (wq[:, None, None, None] * wq[None, :, None, None]
           * wq[None, None, :, None] * wq[None, None, None, :]).ravel()
    lchol = np.linalg.cholesky(cov.gamma)
    v1 = lchol @ z[:2]
    v2 = z[2:]
    eta = (data.x @ theta.beta).ravel()
    a = eta[:, None] + theta.phi1 * v1 + theta.phi2 * v2
    y, nu = data.y.ravel(), data.nu.ravel()
    g = (y[:, None] * a - nu[:, None] * np.exp(a)).sum(axis=0)
    g -= g.max()
    w = wts * np.exp(g)
    w /= w.sum()
    return np.exp(a) @ w, v1 @ w, v2 @ w


def pair_instance(seed):
    rng = np.random.default_rng(seed)
    w = from_raw(np.array([[0.0, 1.0], [1.0, 0.0]]))
    nu = np.full((2, 1), float(rng.integers(5, 10)))
    x = np.stack([np.ones((2, 1)), rng.uniform(-1, 1, (2, 1))], axis=2)
    theta = ParamVector(beta=np.array([rng.uniform(-1.5, -0.5), rng.uniform(-1, 1)]),
                        phi1=rng.uniform(0.5, 0.9), phi2=rng.uniform(0.5, 0.9),
                        rho=rng.uniform(-0.6, 0.6))
    p0 = np.exp(x @ theta.beta)
    y = np.maximum(1, np.rint(nu * p0 * rng.uniform(2.0, 3.0, (2, 1)))).astype(int)
    return theta, PanelData(y=y, nu=nu, x=x), w


def test_antithetic_draw_pools():
    cov = sar_covariance(ring_w(4), 0.3)
    v1, v2 = antithetic_draws(cov, 4, 2, McConfig(s1=10, s2=15, seed=3))
    assert v1.shape == (20, 4) and v2.shape == (30, 4, 2)
    assert np.array_equal(v1[:10], -v1[10:])
    assert np.array_equal(v2[:15], -v2[15:])


def test_antithetic_exactness_at_zero_phis(small_panel):
    # with phi1 = phi2 = 0 every predictor reduces exactly to the synthetic one
    data, w = small_panel
    theta = ParamVector(beta=np.array([-2.0, 0.8]), phi1=0.0, phi2=0.0, rho=0.0)
    cov = sar_covariance(w, 0.0)
    cfg = McConfig(s1=5, s2=5, seed=1)
    synth = synthetic_p(theta, data).p_hat
    assert np.array_equal(ebp_approx_p(theta, data, cov, cfg).p_hat, synth)
    assert np.array_equal(ebp_exact_p(theta, data, cov, cfg).p_hat, synth)
    v1_hat, v2_hat = ebp_random_effects(theta, data, cov, cfg, mode="exact")
    assert not v1_hat.any() and not v2_hat.any()


def test_exact_ebp_matches_quadrature_quickly():
    # a light version of the quadrature comparison on a single instance
    theta, data, w = pair_instance(3)
    cov = sar_covariance(w, theta.rho)
    p_gh, v1_gh, v2_gh = gh_posterior(theta, data, cov)
    p_hat, _, _ = (ebp_exact_p(theta, data, cov, McConfig(s1=20000, s2=500, seed=9)).p_hat,
                   None, None)
    assert np.max(np.abs(p_hat.ravel() - p_gh) / p_gh) < 5e-3
    v1_hat, v2_hat = ebp_random_effects(theta, data, cov,
                                        McConfig(s1=20000, s2=500, seed=9), mode="exact")
    assert np.max(np.abs(v1_hat - v1_gh) / np.abs(v1_gh)) < 5e-2
    assert np.max(np.abs(v2_hat.ravel() - v2_gh) / np.abs(v2_gh)) < 5e-2


def test_approx_equals_exact_for_single_domain():
    # with D = 1 conditioning per domain and jointly coincide; both must
    # approximate the same quadrature value
    x = np.ones((1, 1, 1))
    theta = ParamVector(beta=np.array([-1.0]), phi1=0.6, phi2=0.0, rho=0.0)
    nu = np.full((1, 1), 8.0)
    y = np.array([[14.0]])
    data = PanelData(y=y, nu=nu, x=x)
    cov = sar_covariance(np.zeros((1, 1)), 0.0)
    xq, wq = hermegauss(80)
    wq = wq / wq.sum()
    a = float(x[0, 0] @ theta.beta) + theta.phi1 * xq
    g = y[0, 0] * a - nu[0, 0] * np.exp(a)
    g -= g.max()
    wpost = wq * np.exp(g)
    p_gh = float(np.exp(a) @ wpost / wpost.sum())
    cfg = McConfig(s1=40000, s2=1, seed=2)
    p_a = ebp_approx_p(theta, data, cov, cfg).p_hat[0, 0]
    assert abs(p_a - p_gh) / p_gh < 5e-3


def test_plug_in_and_synthetic_identities(theta_st1, small_panel):
    data, w = small_panel
    d = data.n_domains
    v1 = np.linspace(-1, 1, d)
    v2 = np.zeros((d, data.n_periods))
    pred = plug_in_p(theta_st1, data, v1, v2)
    expect = np.exp(data.x @ theta_st1.beta + theta_st1.phi1 * v1[:, None])
    assert np.allclose(pred.p_hat, expect)
    assert np.allclose(pred.mu_hat, data.nu * expect)
    synth = synthetic_p(theta_st1, data)
    assert np.allclose(synth.p_hat, np.exp(data.x @ theta_st1.beta))


def test_shared_pass_consistency(theta_st1, small_panel):
    # ebp_all_approx and ebp_approx_p agree when given the same configuration
    data, w = small_panel
    cov = sar_covariance(w, theta_st1.rho)
    cfg = McConfig(s1=50, s2=60, seed=7)
    p_all, v1_hat, v2_hat = ebp_all_approx(theta_st1, data, cov, cfg)
    assert np.array_equal(p_all, ebp_approx_p(theta_st1, data, cov, cfg).p_hat)
    # the effect predictors satisfy the residual identities exactly
    resid = data.y - data.nu * p_all
    assert np.allclose(v2_hat, theta_st1.phi2 * resid)
    assert np.allclose(v1_hat, theta_st1.phi1 * cov.gamma_diag * resid.sum(axis=1))


def test_bp_plug_in_uses_truth(theta_st1, small_panel):
    data, w = small_panel
    cov = sar_covariance(w, theta_st1.rho)
    pred = bp_plug_in_p(theta_st1, data, cov, McConfig(s1=50, s2=60, seed=7))
    assert pred.kind == "bp_plug_in"
    assert pred.v1_hat is not None and pred.v2_hat is not None
    assert (pred.p_hat > 0).all()


def test_predictions_reproducible(theta_st1, small_panel):
    data, w = small_panel
    cov = sar_covariance(w, theta_st1.rho)
    cfg = McConfig(s1=40, s2=40, seed=11)
    a = ebp_approx_p(theta_st1, data, cov, cfg).p_hat
    b = ebp_approx_p(theta_st1, data, cov, cfg).p_hat
    assert np.array_equal(a, b)


def test_mc_config_validation():
    with pytest.raises(ValueError):
        McConfig(s1=0, s2=10)
