"""Method-of-moments fitting by Newton-Raphson, with two estimation options.

Option 1 solves the full nonlinear moment system.  Option 2 first fixes the
spatial autocorrelation at Moran's I of the predicted domain effects under the
rho = 0 submodel, then solves the remaining equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import predict
from .model import (ModelError, ModelSpec, OverflowGuardError, PanelData,
                    ParamVector, moment_jacobian, moment_residuals,
                    pearson_residuals, spec_from_flags)
from .spatial import ProximityMatrix, SarCovariance, SpatialError, morans_i, sar_covariance

RHO_BOUND = 0.999
SEED_RHO_BOUND = 0.9
THETA_NORM_CAP = 1e3
PHI_STALL = 0.05


class FitError(RuntimeError):
    """Newton-Raphson failure (singular Jacobian or divergence)."""


@dataclass(frozen=True)
class FitOptions:
    """Solver configuration.

    ``option`` selects the estimation route: "opt1" solves all active moment
    equations jointly; "opt2" fixes rho by Moran's I over predicted domain
    effects under the rho = 0 submodel.  ``moran_mc`` sizes the Monte Carlo
    pools of that prediction step; the defaults are deliberately smaller than
    the prediction defaults because Moran's I averages over domains and is
    insensitive to per-domain Monte Carlo noise.
    """

    option: str = "opt2"
    max_iter: int = 100
    tol: float = 1e-8
    damping: int = 10
    moran_mc: predict.McConfig = field(default_factory=lambda: predict.McConfig(s1=100, s2=100))

    def __post_init__(self):
        if self.option not in ("opt1", "opt2"):
            raise ValueError(f"option must be 'opt1' or 'opt2', got {self.option!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")


@dataclass(frozen=True)
class FitResult:
    theta_hat: ParamVector
    iterations: int
    residual_norm: float
    converged: bool
    trace: tuple
    seed_used: ParamVector
    spec: ModelSpec
    option: str


def fit_glm_poisson(data: PanelData, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Fixed-effects Poisson regression log mu = log nu + x beta, by IRLS."""
    x = data.x.reshape(-1, data.n_covariates)
    y = data.y.ravel()
    offset = np.log(data.nu.ravel())
    beta = np.linalg.lstsq(x, np.log(y + 0.5) - offset, rcond=None)[0]
    for _ in range(max_iter):
        mu = np.exp(offset + x @ beta)
        score = x.T @ (y - mu)
        info = x.T @ (mu[:, None] * x)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise FitError("IRLS information matrix is singular") from exc
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            mu = np.exp(offset + x @ beta)
            if np.max(np.abs(x.T @ (y - mu))) > 1e-6 * max(1.0, y.sum()):
                break
            return beta
    raise FitError(f"Poisson IRLS did not converge in {max_iter} iterations")


def seed_parameters(data: PanelData, w: ProximityMatrix) -> ParamVector:
    """Deterministic algorithm seed: GLM betas, small positive phis, Moran rho.

    rho is seeded from Moran's I of the fixed-effects Pearson residuals
    averaged over periods within each domain; it falls back to 0 when the
    residuals are constant.
    """
    beta = fit_glm_poisson(data)
    p_hat = np.exp(data.x @ beta)
    resid = pearson_residuals(data, p_hat).mean(axis=1)
    try:
        rho = float(np.clip(morans_i(resid, w), -SEED_RHO_BOUND, SEED_RHO_BOUND))
    except SpatialError:
        rho = 0.0
    return ParamVector(beta=beta, phi1=0.1, phi2=0.1, rho=rho)


def _project(values: np.ndarray, spec: ModelSpec, p: int) -> np.ndarray:
    """Reflect phi parameters at zero and clamp rho into its open interval."""
    out = values.copy()
    free = spec.param_indices(p)
    pos = {int(i): j for j, i in enumerate(free)}
    for phi_idx in (p, p + 1):
        if phi_idx in pos:
            out[pos[phi_idx]] = abs(out[pos[phi_idx]])
    if p + 2 in pos:
        out[pos[p + 2]] = np.clip(out[pos[p + 2]], -RHO_BOUND, RHO_BOUND)
    return out


def _assemble(theta0: ParamVector, free_values: np.ndarray, spec: ModelSpec) -> ParamVector:
    full = spec.constrain(theta0).as_array()
    full[spec.param_indices(theta0.p)] = free_values
    return ParamVector.from_array(full)


def _equation_scales(data: PanelData) -> np.ndarray:
    """Magnitudes of the sample moments, for relative convergence checks."""
    d, t, p = data.n_domains, data.n_periods, data.n_covariates
    s = np.empty(p + 3)
    s[:p] = np.abs(np.einsum("dt,dtk->k", data.y, data.x)) / (d * t)
    y_dom = data.y_domain_totals
    s[p] = (y_dom ** 2).sum() / d
    s[p + 1] = (data.y ** 2).sum() / (d * t)
    s[p + 2] = abs(y_dom.sum() ** 2 - (y_dom ** 2).sum()) / (d * (d - 1))
    return np.maximum(1.0, s)


def _newton_solve(data: PanelData, w: ProximityMatrix, spec: ModelSpec,
                  opts: FitOptions, theta0: ParamVector, fix_rho: float | None,
                  option_label: str, allow_boundary: bool = True) -> FitResult:
    p = data.n_covariates
    work_spec = spec
    if fix_rho is not None:
        # rho is frozen: drop it from the unknowns and drop the cross equation
        work_spec = spec.drop_rho()
        theta0 = theta0.replace(rho=fix_rho)
    scales = _equation_scales(data)[work_spec.equation_indices(p)]

    def residual(theta: ParamVector):
        cov = sar_covariance(w, theta.rho)
        f = moment_residuals(theta, data, cov, work_spec) / scales
        return f, cov

    theta = work_spec.constrain(theta0)
    if fix_rho is not None:
        theta = theta.replace(rho=fix_rho)
    # a free phi at exactly zero zeroes its Jacobian column; nudge it inside
    if work_spec.free_phi1 and abs(theta.phi1) < PHI_STALL:
        theta = theta.replace(phi1=PHI_STALL)
    if work_spec.free_phi2 and abs(theta.phi2) < PHI_STALL:
        theta = theta.replace(phi2=PHI_STALL)
    free = theta.as_array()[work_spec.param_indices(p)]
    f, cov = residual(theta)
    fnorm = float(np.max(np.abs(f)))
    trace = [(theta, fnorm)]
    converged = fnorm <= opts.tol
    it = 0
    while not converged and it < opts.max_iter:
        it += 1
        h = moment_jacobian(theta, data, cov, work_spec) / scales[:, None]
        try:
            step = np.linalg.solve(h, f)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular Jacobian at iteration {it}") from exc
        accepted = False
        scale = 1.0
        for _ in range(opts.damping + 1):
            cand_free = _project(free - scale * step, work_spec, p)
            cand = _assemble(theta, cand_free, work_spec)
            if fix_rho is not None:
                cand = cand.replace(rho=fix_rho)
            try:
                f_new, cov_new = residual(cand)
            except (OverflowGuardError, SpatialError):
                scale *= 0.5
                continue
            fnorm_new = float(np.max(np.abs(f_new)))
            if fnorm_new <= fnorm or fnorm_new <= opts.tol:
                theta, free, f, cov, fnorm = cand, cand_free, f_new, cov_new, fnorm_new
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        trace.append((theta, fnorm))
        if np.linalg.norm(theta.as_array()) > THETA_NORM_CAP:
            raise FitError(f"parameter norm exceeded {THETA_NORM_CAP:g}; diverging fit")
        step_norm = float(np.max(np.abs(scale * step)))
        converged = fnorm <= opts.tol
        if step_norm <= opts.tol and not converged:
            break
    if fix_rho is not None:
        theta = theta.replace(rho=fix_rho)
    if (not converged and allow_boundary and fix_rho is None and spec.free_rho
            and abs(theta.rho) >= RHO_BOUND - 1e-6):
        # no interior root in rho: pin it at the boundary and solve the rest
        pinned = _newton_solve(data, w, spec, opts, theta,
                               fix_rho=float(np.sign(theta.rho)) * RHO_BOUND,
                               option_label=option_label)
        if pinned.converged:
            return FitResult(theta_hat=pinned.theta_hat, iterations=it + pinned.iterations,
                             residual_norm=pinned.residual_norm, converged=True,
                             trace=tuple(trace) + pinned.trace,
                             seed_used=theta0, spec=spec, option=option_label)
    if not converged and allow_boundary:
        # a phi stalled at the zero boundary: the moment system wants a
        # negative variance component, so the estimate is truncated at zero
        # (dropping rho alongside phi1, without which it is unidentified)
        pin1 = work_spec.free_phi1 and abs(theta.phi1) <= PHI_STALL
        pin2 = work_spec.free_phi2 and abs(theta.phi2) <= PHI_STALL
        if pin1 or pin2:
            sub = spec_from_flags(work_spec.free_phi1 and not pin1,
                                  work_spec.free_phi2 and not pin2,
                                  work_spec.free_rho and not pin1)
            theta0b = theta.replace(phi1=0.0 if pin1 else theta.phi1,
                                    phi2=0.0 if pin2 else theta.phi2,
                                    rho=theta.rho if sub.free_rho else 0.0)
            pinned = _newton_solve(data, w, sub, opts, theta0b,
                                   fix_rho=None if pin1 else fix_rho,
                                   option_label=option_label)
            if pinned.converged:
                return FitResult(theta_hat=pinned.theta_hat,
                                 iterations=it + pinned.iterations,
                                 residual_norm=pinned.residual_norm, converged=True,
                                 trace=tuple(trace) + pinned.trace,
                                 seed_used=theta0, spec=spec, option=option_label)
    return FitResult(theta_hat=theta, iterations=it, residual_norm=fnorm,
                     converged=bool(converged), trace=tuple(trace),
                     seed_used=theta0, spec=spec, option=option_label)


def predicted_effects_rho0(data: PanelData, theta_rho0: ParamVector,
                           cfg: predict.McConfig) -> np.ndarray:
    """Approximate EBP of the domain effects under the rho = 0 submodel."""
    cov0 = sar_covariance(np.zeros((data.n_domains, data.n_domains)), 0.0)
    v1_hat, _ = predict.ebp_random_effects(theta_rho0, data, cov0, cfg, mode="approx")
    return v1_hat


def fit_mm(data: PanelData, w: ProximityMatrix, spec: ModelSpec = ModelSpec("ST1"),
           opts: FitOptions = FitOptions(), seed: ParamVector | None = None) -> FitResult:
    """Fit the moment system for the requested submodel.

    With option "opt2" and a model containing rho, the rho = 0 counterpart is
    fitted first, the domain effects are predicted under it, and Moran's I of
    those predictions fixes rho for the final solve.
    """
    spec.validate_data(data)
    if seed is None:
        seed = seed_parameters(data, w)
    if spec.free_rho and opts.option == "opt2":
        null_fit = _newton_solve(data, w, spec.drop_rho(), opts, seed,
                                 fix_rho=None, option_label="opt2")
        v1_hat = predicted_effects_rho0(data, null_fit.theta_hat, opts.moran_mc)
        try:
            rho_hat = float(np.clip(morans_i(v1_hat, w), -RHO_BOUND, RHO_BOUND))
        except SpatialError:
            rho_hat = 0.0
        return _newton_solve(data, w, spec, opts, null_fit.theta_hat,
                             fix_rho=rho_hat, option_label="opt2")
    return _newton_solve(data, w, spec, opts, seed, fix_rho=None,
                         option_label=opts.option)
