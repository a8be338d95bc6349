"""Wald tests of DIF built on the robust scaling estimates."""

import math

import numpy as np
from scipy import special

from .calibration import DifReport, ItemResult
from .exceptions import SingularCovarianceError, VarianceOrderError
from .robust import SOLVERS, PsiSpec, start_value
from .scaling import ScalingKind, cov_yz, null_weights, scaling_problem


def normal_pvalue(t):
    """Two-sided p-value ``2 (1 - Phi(|t|))``."""
    return 2.0 * special.ndtr(-np.abs(t))


def chi2_2df_pvalue(q):
    # chi-square with 2 df has survival function exp(-q/2)
    return np.exp(-0.5 * np.asarray(q, dtype=float))


def t_statistic(i, ys, taus, fit):
    """Wald statistic ``(Y_i - theta) / sqrt(tau_i - var(theta))`` for item ``i``."""
    taus = np.asarray(taus, dtype=float)
    denom = taus[i] - fit.var_theta
    if not denom > 0:
        raise VarianceOrderError(f"item position {i}: var(Y_i) <= var(theta)")
    return float((np.asarray(ys, dtype=float)[i] - fit.theta) / math.sqrt(denom))


def t_statistics(fit):
    """All Wald statistics of a fit, using its values and final null variances."""
    denom = fit.taus - fit.var_theta
    if np.any(~(denom > 0)):
        raise VarianceOrderError("var(Y_i) <= var(theta) for some item")
    return (fit.values - fit.theta) / np.sqrt(denom)


def _natural_sigma(zfit):
    return math.exp(zfit.theta) if zfit.kind is ScalingKind.LOG_SLOPE else zfit.theta


def joint_covariance(i, yfit, zfit, pair):
    """2x2 null covariance of ``(Y_i - theta, Z_i - sigma)``."""
    sigma = _natural_sigma(zfit)
    cyz = np.asarray(cov_yz(pair, yfit.theta, sigma), dtype=float)
    if zfit.kind is ScalingKind.LOG_SLOPE:
        cyz = cyz / sigma
    wy = null_weights(yfit.taus)
    wz = null_weights(zfit.taus)
    wy_t = wy.copy()
    wz_t = wz.copy()
    wy_t[i] = 1.0 - wy[i]
    wz_t[i] = 1.0 - wz[i]
    off = float(np.sum(wy_t * wz_t * cyz))
    return np.array([
        [yfit.taus[i] - yfit.var_theta, off],
        [off, zfit.taus[i] - zfit.var_theta],
    ])


def joint_q(i, yfit, zfit, pair):
    """Quadratic form testing intercept and slope of item ``i`` together (2 df)."""
    sig = joint_covariance(i, yfit, zfit, pair)
    det = sig[0, 0] * sig[1, 1] - sig[0, 1] ** 2
    if not (sig[0, 0] > 0 and det > 0):
        raise SingularCovarianceError(f"item position {i}: joint covariance is not positive definite")
    v = np.array([yfit.values[i] - yfit.theta, zfit.values[i] - zfit.theta])
    return float(v @ np.linalg.solve(sig, v))


def fit_scaling(pair, kind, alpha=0.05, update_tau=True, start="med3", downtune_alpha=None,
                solver="irls", tol=1e-5, max_iter=100):
    """Robust estimate of one scaling parameter of ``pair``."""
    values, tau_fn = scaling_problem(pair, kind)
    spec = PsiSpec(alpha=alpha, downtune_alpha=downtune_alpha)
    theta0 = float(start) if isinstance(start, (int, float)) else start_value(values, tau_fn, spec, start)
    return SOLVERS[solver](values, tau_fn, spec, theta0, update_tau=update_tau, tol=tol,
                           max_iter=max_iter, kind=kind)


def analyze(pair, alpha=0.05, log_slope=False, update_tau=True, start="med3", downtune_alpha=None,
            solver="irls"):
    """Run the intercept and slope problems and assemble per-item DIF tests.

    Estimation may use a down-tuned alpha; the reported tests always use ``alpha``.
    When either fit fails to converge the joint statistic is left missing.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0,1)")
    opts = dict(alpha=alpha, update_tau=update_tau, start=start, downtune_alpha=downtune_alpha, solver=solver)
    yfit = fit_scaling(pair, ScalingKind.INTERCEPT, **opts)
    zfit = fit_scaling(pair, ScalingKind.LOG_SLOPE if log_slope else ScalingKind.SLOPE, **opts)

    t_int = t_statistics(yfit)
    t_slo = t_statistics(zfit)
    p_int = normal_pvalue(t_int)
    p_slo = normal_pvalue(t_slo)
    both = yfit.converged and zfit.converged
    rows = []
    for i, item in enumerate(pair.items):
        if both:
            q = joint_q(i, yfit, zfit, pair)
            pq = float(chi2_2df_pvalue(q))
        else:
            q = pq = None
        rows.append(ItemResult(
            index=item.index,
            y=float(yfit.values[i]),
            z=float(zfit.values[i]),
            t_intercept=float(t_int[i]),
            p_intercept=float(p_int[i]),
            flag_intercept=bool(p_int[i] < alpha),
            t_slope=float(t_slo[i]),
            p_slope=float(p_slo[i]),
            flag_slope=bool(p_slo[i] < alpha),
            q_joint=q,
            p_joint=pq,
            flag_joint=bool(pq is not None and pq < alpha),
        ))
    return DifReport(alpha=alpha, theta_fit=yfit, sigma_fit=zfit, items=tuple(rows), log_slope=log_slope)
