"""Scaling functions of the two-group 2PL linking problem and their null variances.

Every function here accepts either a single :class:`~rdif.calibration.ItemCalibration`
or a whole :class:`~rdif.calibration.CalibrationPair`.  Both expose ``a0, d0, a1, d1``
and a covariance ``cov`` whose last two axes are ordered ``[a0, d0, a1, d1]``, so the
same expressions broadcast over items.  ``theta``/``sigma`` may also be arrays shaped
to broadcast against the item axis (e.g. a column vector for a grid of values).

All covariances are finite-sample covariances of the estimates; no sample-size
factor appears anywhere.
"""

import enum

import numpy as np

from .exceptions import DegenerateSlopeError, NonPositiveVarianceError

A0, D0, A1, D1 = range(4)
SLOPE_EPS = 1e-12


class ScalingKind(str, enum.Enum):
    INTERCEPT = "intercept"  # target theta = mu / sigma
    SLOPE = "slope"  # target sigma
    LOG_SLOPE = "log_slope"  # target log(sigma)


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def _check_slope(a, name):
    a = np.asarray(a, dtype=float)
    if np.any(np.abs(a) < SLOPE_EPS):
        raise DegenerateSlopeError(f"{name} is numerically zero")
    return a


def _check_positive(v, what):
    if np.any(~(np.asarray(v) > 0)):
        raise NonPositiveVarianceError(f"{what} is not positive; covariance block is not positive definite")
    return v


def _cov(item, r, c):
    return np.asarray(item.cov, dtype=float)[..., r, c]


def y_intercept(item):
    """Intercept scaling function ``(d1 - d0) / a1``."""
    a1 = _check_slope(item.a1, "a1")
    return _out((np.asarray(item.d1) - np.asarray(item.d0)) / a1)


def z_slope(item, log_scale=False):
    """Slope scaling function ``a1 / a0`` (or its log)."""
    a0 = _check_slope(item.a0, "a0")
    a1 = _check_slope(item.a1, "a1")
    z = a1 / a0
    return _out(np.log(z) if log_scale else z)


def tau_intercept(item, theta):
    """Null variance of the intercept scaling function at ``theta``.

    ``a1**-2 * (theta**2 var(a1) - 2 theta cov(a1, d1) + var(d1) + var(d0))``
    """
    a1 = _check_slope(item.a1, "a1")
    theta = np.asarray(theta, dtype=float)
    quad = (
        theta**2 * _cov(item, A1, A1)
        - 2.0 * theta * _cov(item, A1, D1)
        + _cov(item, D1, D1)
        + _cov(item, D0, D0)
    )
    return _out(_check_positive(quad / a1**2, "tau"))


def var_slope(item, sigma, log_scale=False):
    """Null variance of the slope scaling function at ``sigma``.

    On the log scale the variance is divided by ``sigma**2`` and ``sigma`` is still
    given on the natural scale.
    """
    a0 = _check_slope(item.a0, "a0")
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    v = (sigma**2 * _cov(item, A0, A0) + _cov(item, A1, A1)) / a0**2
    if log_scale:
        v = v / sigma**2
    return _out(_check_positive(v, "slope variance"))


def cov_yz(item, theta, sigma):
    """Null covariance between the intercept and (natural-scale) slope functions."""
    a0 = _check_slope(item.a0, "a0")
    a1 = _check_slope(item.a1, "a1")
    num = sigma * _cov(item, A0, D0) + _cov(item, A1, D1) - theta * _cov(item, A1, A1)
    return _out(num / (a0 * a1))


def _taus(taus):
    taus = np.asarray(taus, dtype=float)
    if taus.shape[-1:] == (0,) or taus.ndim == 0:
        raise ValueError("taus must be a non-empty list")
    if np.any(~(taus > 0)):
        raise NonPositiveVarianceError("all taus must be positive")
    return taus


def null_weights(taus):
    """Inverse-variance weights normalised to sum to one (along the last axis)."""
    inv = 1.0 / _taus(taus)
    return inv / inv.sum(axis=-1, keepdims=True)


def var_estimator(taus):
    """Null variance of the efficient scaling estimate, ``1 / sum(1 / tau)``."""
    return _out(1.0 / (1.0 / _taus(taus)).sum(axis=-1))


def omegas(taus):
    """Null variances of the residuals ``(Y_i - theta) / tau_i`` for all items."""
    taus = _taus(taus)
    if taus.shape[-1] < 2:
        raise ValueError("omega needs at least two items")
    v = np.asarray(var_estimator(taus))[..., None]
    return (taus - v) / taus**2


def omega(taus, i):
    taus = _taus(taus)
    if not -taus.shape[-1] <= i < taus.shape[-1]:
        raise IndexError(f"item position {i} out of range for {taus.shape[-1]} items")
    return _out(omegas(taus)[..., i])


def scaling_problem(pair, kind):
    """Return ``(values, tau_fn)`` for one of the scaling problems of ``pair``.

    ``tau_fn`` maps a target value (scalar, or column array for a grid) to the
    per-item null variances.
    """
    kind = ScalingKind(kind)
    if kind is ScalingKind.INTERCEPT:
        return np.asarray(y_intercept(pair), dtype=float), lambda t: np.asarray(tau_intercept(pair, t))
    if kind is ScalingKind.SLOPE:
        return np.asarray(z_slope(pair), dtype=float), lambda s: np.asarray(var_slope(pair, s))
    return (
        np.asarray(z_slope(pair, log_scale=True), dtype=float),
        lambda t: np.asarray(var_slope(pair, np.exp(t), log_scale=True)),
    )
