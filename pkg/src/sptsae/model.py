"""Panel data model, submodel family and the method-of-moments system.

Implements the closed-form moment expectations of the spatio-temporal Poisson
mixed model, the moment residual vector f(theta) and its analytic Jacobian
H(theta), for the full model and all submodels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .spatial import SarCovariance

EXP_CAP = 700.0

# Flattened parameter layout: (beta_1..beta_p, phi1, phi2, rho).
PHI1, PHI2, RHO = -3, -2, -1


class ModelError(ValueError):
    """Invalid panel data or model configuration."""


class OverflowGuardError(FloatingPointError):
    """An exponent exceeded the cap; the iterate is likely diverging."""


def _checked_exp(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.size and np.max(z) > EXP_CAP:
        raise OverflowGuardError(
            f"exponent {np.max(z):.3g} exceeds cap {EXP_CAP:g}; "
            "parameter iterate is likely diverging"
        )
    return np.exp(z)


@dataclass(frozen=True)
class PanelData:
    """Balanced D x T panel of counts with known sizes and covariates."""

    y: np.ndarray
    nu: np.ndarray
    x: np.ndarray
    domains: tuple = ()
    times: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        nu = np.asarray(self.nu, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2:
            raise ModelError("y must be a D x T matrix")
        if nu.shape != y.shape:
            raise ModelError("nu must match the shape of y")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise ModelError("x must be a D x T x p array aligned with y")
        if (y < 0).any() or (y != np.floor(y)).any():
            raise ModelError("counts y must be nonnegative integers")
        if (nu < 1).any() or (nu != np.floor(nu)).any():
            raise ModelError("sizes nu must be integers >= 1")
        p = x.shape[2]
        if np.linalg.matrix_rank(x.reshape(-1, p)) < p:
            raise ModelError("covariate design is rank deficient")
        domains = self.domains or tuple(range(1, y.shape[0] + 1))
        times = self.times or tuple(range(1, y.shape[1] + 1))
        if len(domains) != y.shape[0] or len(times) != y.shape[1]:
            raise ModelError("domain/time labels do not match the panel shape")
        for arr in (y, nu, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "domains", tuple(domains))
        object.__setattr__(self, "times", tuple(times))

    @property
    def n_domains(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[2]

    @property
    def y_domain_totals(self) -> np.ndarray:
        return self.y.sum(axis=1)

    def replace_counts(self, y: np.ndarray) -> "PanelData":
        return PanelData(y=np.asarray(y), nu=self.nu, x=self.x,
                         domains=self.domains, times=self.times)


@dataclass(frozen=True)
class ParamVector:
    """Model parameters (beta, phi1, phi2, rho)."""

    beta: np.ndarray
    phi1: float
    phi2: float
    rho: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "phi1", float(self.phi1))
        object.__setattr__(self, "phi2", float(self.phi2))
        object.__setattr__(self, "rho", float(self.rho))
        if not -1.0 < self.rho < 1.0:
            raise ModelError(f"rho must lie in (-1, 1), got {self.rho}")

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.phi1, self.phi2, self.rho]])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        return cls(beta=values[:-3], phi1=values[PHI1], phi2=values[PHI2], rho=values[RHO])

    def replace(self, **changes) -> "ParamVector":
        fields = {"beta": self.beta, "phi1": self.phi1, "phi2": self.phi2, "rho": self.rho}
        fields.update(changes)
        return ParamVector(**fields)


_VARIANTS = {
    # variant: (free phi1, free phi2, free rho, requires T == 1)
    "ST1": (True, True, True, False),
    "ST1_1": (True, False, True, False),
    "T1": (True, True, False, False),
    "T1_2": (False, True, False, False),
    "S1": (True, False, True, True),
    "M1": (True, False, False, False),
    "M0": (False, False, False, False),
}


@dataclass(frozen=True)
class ModelSpec:
    """Submodel selector: which of phi1, phi2, rho are free parameters."""

    variant: str

    def __post_init__(self):
        key = self.variant.upper().replace("-", "_")
        if key not in _VARIANTS:
            raise ModelError(f"unknown model variant {self.variant!r}; "
                             f"choose one of {sorted(_VARIANTS)}")
        object.__setattr__(self, "variant", key)

    @property
    def free_phi1(self) -> bool:
        return _VARIANTS[self.variant][0]

    @property
    def free_phi2(self) -> bool:
        return _VARIANTS[self.variant][1]

    @property
    def free_rho(self) -> bool:
        return _VARIANTS[self.variant][2]

    @property
    def requires_single_period(self) -> bool:
        return _VARIANTS[self.variant][3]

    def param_indices(self, p: int) -> np.ndarray:
        """Indices of the free parameters in the flattened (p+3)-vector."""
        mask = [True] * p + [self.free_phi1, self.free_phi2, self.free_rho]
        return np.flatnonzero(mask)

    def equation_indices(self, p: int) -> np.ndarray:
        """Active MM equation indices, matched to the free-parameter count.

        The mean equations 1..p are always active.  f_{p+1} (domain-sum second
        moment) identifies phi1, f_{p+2} (cellwise second moment) identifies
        phi2, and the cross-domain equation f_{p+3} identifies rho.  With T = 1
        the equations f_{p+1} and f_{p+2} coincide, so only f_{p+1} is kept.
        """
        idx = list(range(p))
        if self.free_phi1:
            idx.append(p)
        if self.free_phi2:
            idx.append(p + 1)
        if self.free_rho:
            idx.append(p + 2)
        return np.asarray(idx)

    def constrain(self, theta: ParamVector) -> ParamVector:
        """Zero out the parameters this submodel fixes."""
        changes = {}
        if not self.free_phi1:
            changes["phi1"] = 0.0
        if not self.free_phi2:
            changes["phi2"] = 0.0
        if not self.free_rho:
            changes["rho"] = 0.0
        return theta.replace(**changes) if changes else theta

    def validate_data(self, data: PanelData) -> None:
        if self.requires_single_period and data.n_periods != 1:
            raise ModelError(f"model {self.variant} requires T = 1, "
                             f"got T = {data.n_periods}")

    def drop_rho(self) -> "ModelSpec":
        """The rho = 0 counterpart used as the null model of the Moran step."""
        mapping = {"ST1": "T1", "S1": "M1", "ST1_1": "M1", "T1": "T1",
                   "T1_2": "T1_2", "M1": "M1", "M0": "M0"}
        return ModelSpec(mapping[self.variant])


_BY_FLAGS = {
    (True, True, True): "ST1", (True, False, True): "ST1_1",
    (True, True, False): "T1", (False, True, False): "T1_2",
    (True, False, False): "M1", (False, False, False): "M0",
}


def spec_from_flags(free_phi1: bool, free_phi2: bool, free_rho: bool) -> ModelSpec:
    """Submodel with the given free parameters; rho requires phi1."""
    key = (bool(free_phi1), bool(free_phi2), bool(free_rho))
    if key not in _BY_FLAGS:
        raise ModelError(f"no submodel with free (phi1, phi2, rho) = {key}; "
                         "rho is identified only when phi1 is free")
    return ModelSpec(_BY_FLAGS[key])


def linear_predictor_p(theta: ParamVector, x_dt: np.ndarray, v1d: float, v2dt: float) -> float:
    """Target parameter p_dt = exp{x_dt beta + phi1 v1_d + phi2 v2_dt}."""
    z = float(np.dot(x_dt, theta.beta)) + theta.phi1 * v1d + theta.phi2 * v2dt
    return float(_checked_exp(z))


def expected_count(theta: ParamVector, nu_dt: float, x_dt: np.ndarray, gamma_dd: float) -> float:
    """E[y_dt] = nu exp{x beta + (phi1^2 gamma_dd + phi2^2) / 2}."""
    z = float(np.dot(x_dt, theta.beta)) + 0.5 * (theta.phi1 ** 2 * gamma_dd + theta.phi2 ** 2)
    return nu_dt * float(_checked_exp(z))


def expected_count_sq(theta: ParamVector, nu_dt: float, x_dt: np.ndarray, gamma_dd: float) -> float:
    """E[y_dt^2] = E[y_dt] + nu^2 exp{2(x beta + phi1^2 gamma_dd + phi2^2)}."""
    xb = float(np.dot(x_dt, theta.beta))
    first = nu_dt * float(_checked_exp(xb + 0.5 * (theta.phi1 ** 2 * gamma_dd + theta.phi2 ** 2)))
    second = nu_dt ** 2 * float(_checked_exp(2.0 * (xb + theta.phi1 ** 2 * gamma_dd + theta.phi2 ** 2)))
    return first + second


def expected_domain_sum_sq(theta: ParamVector, data: PanelData, d: int, gamma_dd: float) -> float:
    """E[y_d.^2] via the P/Q/R/S closed form."""
    xb = data.x[d] @ theta.beta
    nu = data.nu[d]
    a = theta.phi1 ** 2 * gamma_dd
    b = theta.phi2 ** 2
    p_term = _checked_exp(xb + 0.5 * (a + b))
    q_term = _checked_exp(2.0 * xb + 2.0 * (a + b))
    r_term = _checked_exp(2.0 * xb + 2.0 * a + b)
    s_term = _checked_exp(xb + a + 0.5 * b)
    return float((nu * p_term).sum() + (nu ** 2 * q_term).sum()
                 - (nu ** 2 * r_term).sum() + (nu * s_term).sum() ** 2)


def expected_cross_product(theta: ParamVector, data: PanelData, d1: int, d2: int,
                           cov: SarCovariance) -> float:
    """E[y_{d1.} y_{d2.}] for distinct domains d1 and d2."""
    if d1 == d2:
        raise ModelError("cross product requires two distinct domains")
    g = cov.gamma
    spatial_term = 0.5 * theta.phi1 ** 2 * (g[d1, d1] + 2.0 * g[d1, d2] + g[d2, d2]) + theta.phi2 ** 2
    a1 = data.nu[d1] * _checked_exp(data.x[d1] @ theta.beta)
    a2 = data.nu[d2] * _checked_exp(data.x[d2] @ theta.beta)
    return float(a1.sum() * a2.sum() * _checked_exp(spatial_term))


def _pieces(theta: ParamVector, data: PanelData, cov: SarCovariance):
    """Shared intermediate quantities of f(theta) and H(theta)."""
    eta = data.x @ theta.beta                      # (D, T)
    g = cov.gamma_diag                             # (D,)
    a = theta.phi1 ** 2 * g[:, None]
    b = theta.phi2 ** 2
    nu = data.nu
    p_mat = _checked_exp(eta + 0.5 * (a + b))      # P_dt
    q_mat = _checked_exp(2.0 * eta + 2.0 * (a + b))
    r_mat = _checked_exp(2.0 * eta + 2.0 * a + b)
    s_mat = _checked_exp(eta + a + 0.5 * b)
    e1 = nu * p_mat                                # E[y_dt]
    e2 = e1 + nu ** 2 * q_mat                      # E[y_dt^2]
    amp = nu * _checked_exp(eta)                   # nu e^{x beta}, per cell
    a_dom = amp.sum(axis=1)                        # (D,)
    cross_exp = _checked_exp(
        0.5 * theta.phi1 ** 2 * (g[:, None] + g[None, :] + 2.0 * cov.gamma) + b)
    cross = np.outer(a_dom, a_dom) * cross_exp     # E[y_{d1.} y_{d2.}] matrix
    return eta, g, nu, p_mat, q_mat, r_mat, s_mat, e1, e2, amp, a_dom, cross_exp, cross


def moment_residuals(theta: ParamVector, data: PanelData, cov: SarCovariance,
                     spec: ModelSpec | None = None) -> np.ndarray:
    """MM residual vector f(theta); only the spec's active equations are returned."""
    d, t, p = data.n_domains, data.n_periods, data.n_covariates
    (_, _, nu, p_mat, q_mat, r_mat, s_mat, e1, e2, _, _, _, cross) = \
        _pieces(theta, data, cov)
    f = np.empty(p + 3)
    diff1 = e1 - data.y
    f[:p] = np.einsum("dt,dtk->k", diff1, data.x) / (d * t)
    theo_sum_sq = ((nu * p_mat).sum(axis=1) + (nu ** 2 * q_mat).sum(axis=1)
                   - (nu ** 2 * r_mat).sum(axis=1) + (nu * s_mat).sum(axis=1) ** 2)
    y_dom = data.y_domain_totals
    f[p] = (theo_sum_sq - y_dom ** 2).sum() / d
    f[p + 1] = (e2 - data.y ** 2).sum() / (d * t)
    theo_cross = cross.sum() - np.trace(cross)
    obs_cross = y_dom.sum() ** 2 - (y_dom ** 2).sum()
    f[p + 2] = (theo_cross - obs_cross) / (d * (d - 1))
    if spec is None:
        return f
    return f[spec.equation_indices(p)]


def moment_jacobian(theta: ParamVector, data: PanelData, cov: SarCovariance,
                    spec: ModelSpec | None = None) -> np.ndarray:
    """Analytic Jacobian H(theta) of the active MM equations."""
    d, t, p = data.n_domains, data.n_periods, data.n_covariates
    (_, g, nu, p_mat, q_mat, r_mat, s_mat, e1, _, amp, a_dom, cross_exp, cross) = \
        _pieces(theta, data, cov)
    gd = cov.gamma_dot_diag
    x = data.x
    phi1, phi2 = theta.phi1, theta.phi2
    h = np.zeros((p + 3, p + 3))

    # rows 1..p: derivatives of (1/DT) sum E[y_dt] x_dtk
    de1_phi1 = e1 * phi1 * g[:, None]
    de1_phi2 = e1 * phi2
    de1_rho = 0.5 * e1 * phi1 ** 2 * gd[:, None]
    h[:p, :p] = np.einsum("dt,dtk,dtr->kr", e1, x, x) / (d * t)
    h[:p, p] = np.einsum("dt,dtk->k", de1_phi1, x) / (d * t)
    h[:p, p + 1] = np.einsum("dt,dtk->k", de1_phi2, x) / (d * t)
    h[:p, p + 2] = np.einsum("dt,dtk->k", de1_rho, x) / (d * t)

    # row p+1: derivatives of (1/D) sum E[y_d.^2] (P/Q/R/S terms)
    nup = nu * p_mat
    nu2q = nu ** 2 * q_mat
    nu2r = nu ** 2 * r_mat
    nus = nu * s_mat
    nus_dom = nus.sum(axis=1)
    for k in range(p):
        xk = x[:, :, k]
        h[p, k] = ((nup * xk).sum() + 2.0 * (nu2q * xk).sum() - 2.0 * (nu2r * xk).sum()
                   + 2.0 * (nus_dom * (nus * xk).sum(axis=1)).sum()) / d
    h[p, p] = phi1 * ((nup * g[:, None]).sum() + 4.0 * (nu2q * g[:, None]).sum()
                      - 4.0 * (nu2r * g[:, None]).sum()
                      + 4.0 * (nus_dom ** 2 * g).sum()) / d
    h[p, p + 1] = phi2 * (nup.sum() + 4.0 * nu2q.sum() - 2.0 * nu2r.sum()
                          + 2.0 * (nus_dom ** 2).sum()) / d
    h[p, p + 2] = phi1 ** 2 * (0.5 * (nup * gd[:, None]).sum()
                               + 2.0 * (nu2q * gd[:, None]).sum()
                               - 2.0 * (nu2r * gd[:, None]).sum()
                               + 2.0 * (nus_dom ** 2 * gd).sum()) / d

    # row p+2: derivatives of (1/DT) sum E[y_dt^2]
    de2_beta = e1[..., None] * x + 2.0 * (nu2q)[..., None] * x
    h[p + 1, :p] = de2_beta.sum(axis=(0, 1)) / (d * t)
    h[p + 1, p] = phi1 * ((e1 * g[:, None]).sum() + 4.0 * (nu2q * g[:, None]).sum()) / (d * t)
    h[p + 1, p + 1] = phi2 * (e1.sum() + 4.0 * nu2q.sum()) / (d * t)
    h[p + 1, p + 2] = phi1 ** 2 * (0.5 * (e1 * gd[:, None]).sum()
                                   + 2.0 * (nu2q * gd[:, None]).sum()) / (d * t)

    # row p+3: derivatives of the cross-domain equation
    off = ~np.eye(d, dtype=bool)
    b_dom = np.einsum("dt,dtk->dk", amp, x)        # sum_t nu e^{eta} x_k
    scale = 1.0 / (d * (d - 1))
    for k in range(p):
        m = (np.outer(b_dom[:, k], a_dom) + np.outer(a_dom, b_dom[:, k])) * cross_exp
        h[p + 2, k] = m[off].sum() * scale
    gsum = g[:, None] + g[None, :] + 2.0 * cov.gamma
    gdsum = gd[:, None] + gd[None, :] + 2.0 * cov.gamma_dot
    h[p + 2, p] = phi1 * (cross * gsum)[off].sum() * scale
    h[p + 2, p + 1] = 2.0 * phi2 * cross[off].sum() * scale
    h[p + 2, p + 2] = 0.5 * phi1 ** 2 * (cross * gdsum)[off].sum() * scale

    if spec is None:
        return h
    return h[np.ix_(spec.equation_indices(p), spec.param_indices(p))]


def pearson_residuals(data: PanelData, p_hat: np.ndarray) -> np.ndarray:
    """Pearson residuals (y - nu p_hat) / sqrt(nu p_hat)."""
    p_hat = np.asarray(p_hat, dtype=float)
    if p_hat.shape != data.y.shape:
        raise ModelError("p_hat must cover every panel cell")
    if (p_hat <= 0).any():
        raise ModelError("Pearson residuals require strictly positive p_hat")
    mu = data.nu * p_hat
    return (data.y - mu) / np.sqrt(mu)
