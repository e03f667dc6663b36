import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sptsae.spatial import (ProximityMatrix, SpatialError, build_adjacency_proximity,
                            build_distance_proximity, build_knn_proximity,
                            build_seven_diagonal, conditional_sar_moments, from_raw,
                            morans_i, sample_sar, sar_covariance)

from conftest import ring_w


@st.composite
def raw_proximities(draw):
    d = draw(st.integers(min_value=2, max_value=8))
    w0 = np.array(draw(st.lists(
        st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=d, max_size=d),
        min_size=d, max_size=d)))
    np.fill_diagonal(w0, 0.0)
    # guarantee no isolated domain
    idx = np.arange(d)
    w0[idx, (idx + 1) % d] += 1.0
    return w0


@given(raw_proximities())
@settings(max_examples=50, deadline=None)
def test_from_raw_is_row_stochastic(w0):
    w = from_raw(w0)
    assert np.allclose(w.w.sum(axis=1), 1.0, atol=1e-12)
    assert (w.w >= 0).all()
    assert not np.diag(w.w).any()


@given(raw_proximities(), st.floats(min_value=-0.95, max_value=0.95))
@settings(max_examples=50, deadline=None)
def test_gamma_inverts_its_precision(w0, rho):
    w = from_raw(w0)
    cov = sar_covariance(w, rho)
    a = np.eye(w.n_domains) - rho * w.w
    assert np.max(np.abs(cov.gamma @ (a.T @ a) - np.eye(w.n_domains))) < 1e-10
    assert np.allclose(cov.gamma, cov.gamma.T)


def test_gamma_at_rho_zero_is_identity():
    cov = sar_covariance(ring_w(6), 0.0)
    assert np.array_equal(cov.gamma, np.eye(6))


def test_gamma_dot_matches_finite_differences():
    w = ring_w(8)
    rho, h = 0.37, 1e-6
    cov = sar_covariance(w, rho)
    fd = (sar_covariance(w, rho + h).gamma - sar_covariance(w, rho - h).gamma) / (2 * h)
    assert np.max(np.abs(cov.gamma_dot - fd)) < 1e-7


def test_seven_diagonal_structure():
    w = build_seven_diagonal(9)
    # interior row: 5/16, 2/16, 1/16 on each side
    row = w.w[4]
    assert row[5] == pytest.approx(5.0 / 16.0)
    assert row[6] == pytest.approx(2.0 / 16.0)
    assert row[7] == pytest.approx(1.0 / 16.0)
    assert row[3] == pytest.approx(5.0 / 16.0)
    # edge rows renormalize the same numerators
    assert w.w[0, 1] == pytest.approx(5.0 / 8.0)
    assert w.w[0, 2] == pytest.approx(2.0 / 8.0)
    assert w.w[0, 3] == pytest.approx(1.0 / 8.0)
    assert np.allclose(w.w.sum(axis=1), 1.0)
    with pytest.raises(SpatialError):
        build_seven_diagonal(6)


def test_adjacency_and_errors():
    w = build_adjacency_proximity([("a", "b"), ("b", "c")], ["a", "b", "c"])
    assert w.w[1, 0] == pytest.approx(0.5)
    with pytest.raises(SpatialError):
        build_adjacency_proximity([("a", "a")], ["a", "b"])
    with pytest.raises(SpatialError):
        build_adjacency_proximity([("a", "z")], ["a", "b"])
    with pytest.raises(SpatialError):
        # c has no neighbours
        build_adjacency_proximity([("a", "b")], ["a", "b", "c"])


def test_distance_and_knn():
    dist = np.array([[0.0, 1.0, 4.0], [1.0, 0.0, 2.0], [4.0, 2.0, 0.0]])
    w = build_distance_proximity(dist)
    assert w.w[0, 1] == pytest.approx((1 / 1.0) / (1 / 1.0 + 1 / 4.0))
    knn = build_knn_proximity(dist, 1)
    assert np.array_equal(knn.w0, np.array([[0, 1, 0], [1, 0, 0], [0, 1, 0.0]]))
    with pytest.raises(SpatialError):
        build_knn_proximity(dist, 3)


def test_sample_sar_covariance_matches_gamma():
    w = ring_w(5)
    cov = sar_covariance(w, 0.5)
    rng = np.random.default_rng(0)
    draws = sample_sar(cov, rng, size=200_000)
    emp = np.cov(draws.T)
    assert np.max(np.abs(emp - cov.gamma)) < 0.03


def test_conditional_sar_moments_match_gamma():
    cov = sar_covariance(ring_w(5), 0.4)
    coef, var = conditional_sar_moments(cov, 0, 2)
    g = cov.gamma
    assert coef == pytest.approx(g[0, 2] / g[0, 0])
    assert var == pytest.approx(g[2, 2] - g[0, 2] ** 2 / g[0, 0])
    with pytest.raises(SpatialError):
        conditional_sar_moments(cov, 1, 1)


def test_morans_i_sign_and_errors():
    w = ring_w(10)
    smooth = np.sin(np.linspace(0, 2 * np.pi, 10, endpoint=False))
    assert morans_i(smooth, w) > 0.5
    alternating = np.array([1.0, -1.0] * 5)
    assert morans_i(alternating, w) < -0.5
    with pytest.raises(SpatialError):
        morans_i(np.ones(10), w)


def test_proximity_matrix_validation():
    with pytest.raises(SpatialError):
        ProximityMatrix(w0=np.ones((2, 3)), w=np.ones((2, 3)), labels=(1, 2))
    with pytest.raises(SpatialError):
        from_raw(np.array([[0.0, -1.0], [1.0, 0.0]]))
    with pytest.raises(SpatialError):
        from_raw(np.array([[0.0, 0.0], [1.0, 0.0]]))  # isolated domain
    with pytest.raises(SpatialError):
        sar_covariance(ring_w(4), 1.0)
