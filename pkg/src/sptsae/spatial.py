"""Proximity matrices, SAR(1) covariance structure and Moran's I."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg


class SpatialError(ValueError):
    """Invalid proximity structure or SAR(1) configuration."""


def _row_standardize(w0: np.ndarray, labels: Sequence) -> np.ndarray:
    sums = w0.sum(axis=1)
    dead = np.flatnonzero(sums == 0.0)
    if dead.size:
        names = ", ".join(str(labels[i]) for i in dead)
        raise SpatialError(f"isolated domain(s) with no neighbours: {names}")
    return w0 / sums[:, None]


@dataclass(frozen=True)
class ProximityMatrix:
    """Raw proximities ``w0`` and their row-stochastic standardization ``w``."""

    w0: np.ndarray
    w: np.ndarray
    labels: tuple

    def __post_init__(self):
        w0 = np.asarray(self.w0, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if w0.ndim != 2 or w0.shape[0] != w0.shape[1]:
            raise SpatialError("proximity matrix must be square")
        if w0.shape != w.shape or len(self.labels) != w0.shape[0]:
            raise SpatialError("inconsistent proximity matrix dimensions")
        if (w0 < 0).any() or (w < 0).any():
            raise SpatialError("proximity entries must be nonnegative")
        if np.diag(w0).any() or np.diag(w).any():
            raise SpatialError("proximity diagonal must be zero")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-12:
            raise SpatialError("row-standardized matrix must be row stochastic")
        w0.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_domains(self) -> int:
        return self.w.shape[0]


def from_raw(w0: np.ndarray, labels: Sequence | None = None) -> ProximityMatrix:
    """Row-standardize a raw nonnegative proximity matrix."""
    w0 = np.asarray(w0, dtype=float).copy()
    if labels is None:
        labels = list(range(1, w0.shape[0] + 1))
    return ProximityMatrix(w0=w0, w=_row_standardize(w0, labels), labels=tuple(labels))


def build_adjacency_proximity(edges, labels) -> ProximityMatrix:
    """Common-border proximity: w0[i, j] = 1 iff {i, j} is an edge."""
    labels = tuple(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    if len(index) != len(labels):
        raise SpatialError("duplicate domain labels")
    d = len(labels)
    w0 = np.zeros((d, d))
    for a, b in edges:
        if a not in index or b not in index:
            unknown = a if a not in index else b
            raise SpatialError(f"unknown domain label in edge list: {unknown!r}")
        if a == b:
            raise SpatialError(f"self-edge not allowed: {a!r}")
        w0[index[a], index[b]] = 1.0
        w0[index[b], index[a]] = 1.0
    return from_raw(w0, labels)


def build_distance_proximity(dist: np.ndarray, labels=None) -> ProximityMatrix:
    """Inverse-distance proximity: w0[i, j] = 1 / dist[i, j]."""
    dist = np.asarray(dist, dtype=float)
    d = dist.shape[0]
    if dist.shape != (d, d) or np.abs(dist - dist.T).max() > 0:
        raise SpatialError("distance matrix must be square and symmetric")
    if np.diag(dist).any():
        raise SpatialError("distance diagonal must be zero")
    off = ~np.eye(d, dtype=bool)
    if (dist[off] <= 0).any():
        raise SpatialError("off-diagonal distances must be positive")
    w0 = np.zeros((d, d))
    w0[off] = 1.0 / dist[off]
    return from_raw(w0, labels)


def build_knn_proximity(dist: np.ndarray, k: int, labels=None) -> ProximityMatrix:
    """k-nearest-neighbour proximity by distance; ties go to the smaller index."""
    dist = np.asarray(dist, dtype=float)
    d = dist.shape[0]
    if k < 1 or k >= d:
        raise SpatialError(f"k must satisfy 1 <= k < D, got k={k}, D={d}")
    w0 = np.zeros((d, d))
    for i in range(d):
        others = [j for j in range(d) if j != i]
        # stable sort on distance keeps the smaller index on ties
        order = sorted(others, key=lambda j: (dist[i, j], j))
        w0[i, order[:k]] = 1.0
    return from_raw(w0, labels)


def build_seven_diagonal(d: int) -> ProximityMatrix:
    """Banded proximity with numerators 5, 2, 1 at lags 1, 2, 3, row-renormalized.

    Interior rows carry weights 5/16, 2/16, 1/16; the first and last three rows
    keep the numerators and renormalize so every row sums to one.
    """
    if d < 7:
        raise SpatialError(f"seven-diagonal matrix requires D >= 7, got D={d}")
    numer = {1: 5.0, 2: 2.0, 3: 1.0}
    w0 = np.zeros((d, d))
    for lag, value in numer.items():
        idx = np.arange(d - lag)
        w0[idx, idx + lag] = value
        w0[idx + lag, idx] = value
    return from_raw(w0)


@dataclass(frozen=True)
class SarCovariance:
    """SAR(1) covariance Gamma(rho) with its derivative in rho."""

    rho: float
    gamma: np.ndarray
    gamma_dot: np.ndarray
    w: np.ndarray = field(repr=False)

    @property
    def n_domains(self) -> int:
        return self.gamma.shape[0]

    @property
    def gamma_diag(self) -> np.ndarray:
        return np.diag(self.gamma)

    @property
    def gamma_dot_diag(self) -> np.ndarray:
        return np.diag(self.gamma_dot)


def sar_covariance(w: ProximityMatrix | np.ndarray, rho: float) -> SarCovariance:
    """Covariance Gamma(rho) = [(I - rho W)'(I - rho W)]^{-1} and its rho-derivative.

    The derivative uses dGamma/drho = -Gamma (dC/drho) Gamma with
    dC/drho = -W'(I - rho W) - (I - rho W)'W.
    """
    wm = w.w if isinstance(w, ProximityMatrix) else np.asarray(w, dtype=float)
    d = wm.shape[0]
    if not -1.0 < rho < 1.0:
        raise SpatialError(f"rho must lie in (-1, 1), got {rho}")
    eye = np.eye(d)
    a = eye - rho * wm
    if rho == 0.0:
        gamma = eye.copy()
        gamma_dot = wm + wm.T
        return SarCovariance(rho=0.0, gamma=gamma, gamma_dot=gamma_dot, w=wm)
    c = a.T @ a
    try:
        cf = linalg.cho_factor(c)
    except linalg.LinAlgError as exc:
        raise SpatialError(f"(I - rho W) is singular at rho={rho}") from exc
    gamma = linalg.cho_solve(cf, eye)
    gamma = 0.5 * (gamma + gamma.T)
    c_dot = -(wm.T @ a) - (a.T @ wm)
    gamma_dot = -gamma @ c_dot @ gamma
    gamma_dot = 0.5 * (gamma_dot + gamma_dot.T)
    return SarCovariance(rho=rho, gamma=gamma, gamma_dot=gamma_dot, w=wm)


def sample_sar(cov: SarCovariance, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw v1 = (I - rho W)^{-1} u1 with u1 iid standard normal.

    With ``size`` set, returns a (size, D) array of independent draws.
    At rho = 0 the raw normal stream is returned unchanged.
    """
    d = cov.n_domains
    n = 1 if size is None else size
    u = rng.standard_normal((n, d))
    if cov.rho == 0.0:
        v = u
    else:
        a = np.eye(d) - cov.rho * cov.w
        v = np.linalg.solve(a, u.T).T
    return v[0] if size is None else v


def conditional_sar_moments(cov: SarCovariance, d1: int, d2: int) -> tuple[float, float]:
    """Mean coefficient and variance of v1[d2] given v1[d1]."""
    if d1 == d2:
        raise SpatialError("conditional moments require two distinct domains")
    g = cov.gamma
    coef = g[d1, d2] / g[d1, d1]
    var = g[d2, d2] - g[d1, d2] ** 2 / g[d1, d1]
    return coef, var


def morans_i(values: np.ndarray, w: ProximityMatrix | np.ndarray) -> float:
    """Global Moran's I of ``values`` with respect to a proximity matrix."""
    wm = w.w if isinstance(w, ProximityMatrix) else np.asarray(w, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.shape[0] != wm.shape[0]:
        raise SpatialError("values must be a vector matching the proximity matrix")
    z = v - v.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise SpatialError("Moran's I undefined for constant values")
    d = v.shape[0]
    return float(d / wm.sum() * (z @ wm @ z) / denom)
