import numpy as np
import pytest

from sptsae.model import PanelData, ParamVector
from sptsae.spatial import from_raw, sample_sar, sar_covariance


def ring_w(d: int):
    """Ring adjacency: every domain borders its two cyclic neighbours."""
    w0 = np.zeros((d, d))
    idx = np.arange(d)
    w0[idx, (idx + 1) % d] = 1.0
    w0[idx, (idx - 1) % d] = 1.0
    return from_raw(w0)


def make_panel(theta: ParamVector, w, d: int, t: int, rng: np.random.Generator,
               nu: float = 100.0):
    """Draw one panel from the model at theta; x = (1, smooth trend)."""
    grid = (np.arange(1, d + 1)[:, None] + np.arange(1, t + 1)[None, :] / t) / d
    x = np.stack([np.ones((d, t)), grid], axis=2)
    cov = sar_covariance(w, theta.rho)
    v1 = sample_sar(cov, rng)
    v2 = rng.standard_normal((d, t))
    p = np.exp(x @ theta.beta + theta.phi1 * v1[:, None] + theta.phi2 * v2)
    nu_mat = np.full((d, t), float(nu))
    y = rng.poisson(nu_mat * p)
    return PanelData(y=y, nu=nu_mat, x=x), v1, v2, p


@pytest.fixture
def theta_st1():
    return ParamVector(beta=np.array([-2.0, 0.8]), phi1=0.4, phi2=0.3, rho=0.4)


@pytest.fixture
def small_panel(theta_st1):
    w = ring_w(9)
    rng = np.random.default_rng(6)
    data, _, _, _ = make_panel(theta_st1, w, 9, 2, rng)
    return data, w
