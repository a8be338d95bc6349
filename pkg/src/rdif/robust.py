"""Redescending M-estimation of a scaling parameter.

The estimating equation is ``Psi(theta) = sum_i psi(U_i) = 0`` with residuals
``U_i = (Y_i - theta) / tau_i`` scaled by the null *variance* ``tau_i`` (not its
square root).  ``tau_i`` is a known function of ``theta`` supplied as ``tau_fn``;
the bisquare tuning constant of each item is the ``1 - alpha/2`` quantile of the
null distribution of ``U_i``.
"""

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

from .exceptions import AllWeightsZeroError, NonPositiveVarianceError, StationaryStartError
from .scaling import ScalingKind, omegas, var_estimator

TauFn = Callable[[object], np.ndarray]

STRATEGIES = ("median", "lts_half", "grid", "med3")
GRID_STEP = 0.05
GRID_MAX_POINTS = 200_001
STATIONARY_EPS = 1e-10


@dataclass(frozen=True)
class PsiSpec:
    """Loss family and tuning for the robust scaling estimate.

    ``k`` fixes the tuning constants; when left as ``None`` they are re-derived
    from the current null variances via :func:`tune_k` at ``downtune_alpha`` if
    given, else ``alpha``.
    """

    alpha: float = 0.05
    k: Optional[np.ndarray] = None
    downtune_alpha: Optional[float] = None
    family: str = "bisquare"

    def __post_init__(self):
        if self.family != "bisquare":
            raise ValueError(f"unsupported psi family {self.family!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0,1)")
        if self.downtune_alpha is not None and not 0.0 < self.downtune_alpha < self.alpha:
            raise ValueError("downtune_alpha must be in (0, alpha)")
        if self.k is not None:
            k = np.array(self.k, dtype=float)
            if k.ndim != 1 or np.any(~(k > 0)):
                raise ValueError("tuning constants k must be a list of positive reals")
            k.flags.writeable = False
            object.__setattr__(self, "k", k)

    @property
    def tuning_alpha(self):
        return self.alpha if self.downtune_alpha is None else self.downtune_alpha

    def tuning(self, taus):
        """Tuning constants for null variances ``taus`` (last axis = items)."""
        if self.k is not None:
            if self.k.shape[0] != np.shape(taus)[-1]:
                raise ValueError("length of k does not match the number of items")
            return self.k
        return tune_k(taus, self.tuning_alpha)


@dataclass(frozen=True)
class RdifFit:
    kind: Optional[ScalingKind]
    method: str
    theta: float
    var_theta: float
    start: float
    values: np.ndarray
    taus: np.ndarray
    k: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    flagged: np.ndarray
    iterations: int
    converged: bool
    objective: float
    psi_sum: float
    update_tau: bool = True

    @property
    def m(self):
        return len(self.values)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, ScalingKind):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kind"] = None if d.get("kind") is None else ScalingKind(d["kind"])
        for name in ("values", "taus", "k", "residuals", "weights"):
            d[name] = np.asarray(d[name], dtype=float)
        d["flagged"] = np.asarray(d["flagged"], dtype=bool)
        return cls(**d)


def bisquare(u, k):
    """Tukey bisquare: returns ``(psi, weight, rho)``.

    ``psi(u) = u (1 - (u/k)^2)^2`` inside ``|u| <= k`` and zero outside; the weight
    is ``psi(u) / u`` and ``rho`` is the integral of ``psi``, capped at ``k^2 / 6``.
    """
    u = np.asarray(u, dtype=float)
    k = np.asarray(k, dtype=float)
    t = (u / k) ** 2
    one_m = np.where(t <= 1.0, 1.0 - t, 0.0)
    weight = one_m**2
    psi = u * weight
    rho = k**2 / 6.0 * (1.0 - one_m**3)
    if psi.ndim == 0:
        return float(psi), float(weight), float(rho)
    return psi, weight, rho


def bisquare_deriv(u, k):
    u = np.asarray(u, dtype=float)
    t = (u / np.asarray(k, dtype=float)) ** 2
    d = np.where(t <= 1.0, (1.0 - t) * (1.0 - 5.0 * t), 0.0)
    return float(d) if d.ndim == 0 else d


def tune_k(taus, alpha):
    """Per-item tuning constants: the ``1 - alpha/2`` quantile of ``N(0, omega_i)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0,1)")
    return special.ndtri(1.0 - alpha / 2.0) * np.sqrt(omegas(taus))


def _values(ys):
    ys = np.asarray(ys, dtype=float)
    if ys.ndim != 1 or ys.size == 0:
        raise ValueError("ys must be a non-empty list")
    if not np.all(np.isfinite(ys)):
        raise ValueError("ys must be finite")
    return ys


def _taus_at(tau_fn, theta, m):
    taus = np.asarray(tau_fn(theta), dtype=float)
    if taus.shape != (m,):
        raise ValueError(f"tau_fn returned shape {taus.shape}, expected ({m},)")
    if np.any(~(taus > 0)):
        raise NonPositiveVarianceError(f"tau_fn returned non-positive variances at theta={theta!r}")
    return taus


def _taus_grid(tau_fn, grid, m):
    try:
        taus = np.asarray(tau_fn(grid[:, None]), dtype=float)
    except Exception:
        taus = None
    if taus is None or taus.shape != (grid.size, m):
        taus = np.stack([_taus_at(tau_fn, float(t), m) for t in grid])
    if np.any(~(taus > 0)):
        raise NonPositiveVarianceError("tau_fn returned non-positive variances on the grid")
    return taus


def objective(theta, ys, tau_fn, spec, taus=None):
    """Robust objective ``R(theta) = sum_i tau_i rho(U_i)``.

    The ``tau_i`` factor makes ``-dR/dtheta`` equal to ``Psi(theta)`` when the
    variances are held fixed, so minima of ``R`` are roots of the estimating
    equation.  Accepts a scalar or a 1-D array of ``theta`` values.  ``taus`` pins
    the variances instead of evaluating ``tau_fn`` at each ``theta``.
    """
    ys = _values(ys)
    theta = np.asarray(theta, dtype=float)
    scalar = theta.ndim == 0
    grid = theta.reshape(-1)
    if taus is not None:
        tt = np.broadcast_to(np.asarray(taus, dtype=float), (grid.size, ys.size))
    elif scalar:
        tt = _taus_at(tau_fn, float(theta), ys.size)[None, :]
    else:
        tt = _taus_grid(tau_fn, grid, ys.size)
    k = spec.tuning(tt)
    _, _, rho = bisquare((ys - grid[:, None]) / tt, k)
    r = (tt * rho).sum(axis=-1)
    return float(r[0]) if scalar else r


def estimating_equation(theta, ys, tau_fn, spec, taus=None):
    """``Psi(theta)``; ``taus`` pins the variances (otherwise ``tau_fn(theta)``)."""
    ys = _values(ys)
    tt = _taus_at(tau_fn, theta, ys.size) if taus is None else np.asarray(taus, dtype=float)
    psi, _, _ = bisquare((ys - theta) / tt, spec.tuning(tt))
    return float(np.sum(psi))


def lts_half(ys):
    """Location LTS with 50% trimming: mean of the tightest window of ``m//2 + 1`` order stats."""
    y = np.sort(_values(ys))
    h = y.size // 2 + 1
    best, best_ss = None, np.inf
    for j in range(y.size - h + 1):
        w = y[j : j + h]
        ss = np.sum((w - w.mean()) ** 2)
        if ss < best_ss:
            best, best_ss = w.mean(), ss
    return float(best)


def grid_start(ys, tau_fn, spec, step=GRID_STEP, max_points=GRID_MAX_POINTS):
    """Argmin of the robust objective over ``min(Y), min(Y)+step, ..., max(Y)``.

    Wider ranges than ``step * (max_points - 1)`` are covered with a coarser,
    evenly spaced grid so the cost stays bounded.
    """
    ys = _values(ys)
    lo, hi = float(ys.min()), float(ys.max())
    if hi == lo:
        return lo
    n = int(np.floor((hi - lo) / step))
    if n + 1 > max_points:
        step = (hi - lo) / (max_points - 1)
        n = max_points - 1
    grid = lo + step * np.arange(n + 1)
    if grid[-1] < hi:
        grid = np.append(grid, hi)
    best_val, best = np.inf, lo
    chunk = max(1, 2_000_000 // ys.size)
    for s in range(0, grid.size, chunk):
        g = grid[s : s + chunk]
        r = objective(g, ys, tau_fn, spec)
        j = int(np.argmin(r))
        if r[j] < best_val:
            best_val, best = r[j], g[j]
    return float(best)


def start_value(ys, tau_fn, spec, strategy="med3"):
    ys = _values(ys)
    if strategy == "median":
        return float(np.median(ys))
    if strategy in ("lts_half", "lts"):
        return lts_half(ys)
    if strategy == "grid":
        return grid_start(ys, tau_fn, spec)
    if strategy == "med3":
        return float(np.median([np.median(ys), lts_half(ys), grid_start(ys, tau_fn, spec)]))
    raise ValueError(f"unknown start strategy {strategy!r}; expected one of {STRATEGIES}")


def _polish(theta, step, psi_fn, tol):
    # IRLS stops on the step size; tighten to a root of Psi within a bracket of
    # a few steps so the estimating equation holds to rounding error.
    f0 = psi_fn(theta)
    if f0 == 0.0:
        return theta
    width = max(4.0 * abs(step), 1e-12 * (1.0 + abs(theta)))
    while width <= 100.0 * tol:
        a, b = theta - width, theta + width
        fa, fb = psi_fn(a), psi_fn(b)
        if fa * fb <= 0.0:
            root = optimize.brentq(psi_fn, a, b, xtol=1e-15, maxiter=500)
            return root if abs(psi_fn(root)) <= abs(f0) else theta
        width *= 2.0
    return theta


def _check_start(ys, theta0):
    if ys.size < 3:
        raise ValueError("at least 3 items are required")
    theta0 = float(theta0)
    if not np.isfinite(theta0):
        raise ValueError("theta0 must be finite")
    return theta0


def _finish(method, kind, ys, tau_fn, spec, theta, theta0, fixed, iterations, converged):
    taus = fixed if fixed is not None else _taus_at(tau_fn, theta, ys.size)
    k = spec.tuning(taus)
    u = (ys - theta) / taus
    psi, w, rho = bisquare(u, k)
    return RdifFit(
        kind=None if kind is None else ScalingKind(kind),
        method=method,
        theta=float(theta),
        var_theta=float(var_estimator(taus)),
        start=theta0,
        values=ys.copy(),
        taus=taus.copy(),
        k=np.array(k, dtype=float),
        residuals=u,
        weights=w,
        flagged=np.abs(u) > k,
        iterations=iterations,
        converged=converged,
        objective=float(np.sum(taus * rho)),
        psi_sum=float(np.sum(psi)),
        update_tau=fixed is None,
    )


def irls_solve(ys, tau_fn, spec, theta0, update_tau=True, tol=1e-5, max_iter=100, kind=None):
    """Iteratively reweighted least squares for the robust scaling estimate.

    Each step is the weighted mean of ``ys`` with weights ``W(U_i) / tau_i``.  With
    ``update_tau`` the variances (and hence tuning constants) are re-evaluated at
    every iterate, otherwise they stay at ``tau_fn(theta0)``.  Failure to converge
    in ``max_iter`` steps is reported through ``converged``, not raised.
    """
    ys = _values(ys)
    theta0 = _check_start(ys, theta0)
    fixed = None if update_tau else _taus_at(tau_fn, theta0, ys.size)
    theta, step, converged, it = theta0, 0.0, False, 0
    for it in range(1, max_iter + 1):
        taus = fixed if fixed is not None else _taus_at(tau_fn, theta, ys.size)
        _, wt, _ = bisquare((ys - theta) / taus, spec.tuning(taus))
        w = wt / taus
        total = w.sum()
        if not total > 0:
            raise AllWeightsZeroError(f"all items have zero weight at theta={theta:.6g}")
        new = float(np.dot(w, ys) / total)
        step, theta = new - theta, new
        if abs(step) < tol:
            converged = True
            break
    if converged:
        theta = _polish(theta, step, lambda t: estimating_equation(t, ys, tau_fn, spec, fixed), tol)
    return _finish("irls", kind, ys, tau_fn, spec, theta, theta0, fixed, it, converged)


def _newton_parts(theta, ys, taus, spec):
    u = (ys - theta) / taus
    k = spec.tuning(taus)
    psi, _, _ = bisquare(u, k)
    return psi.sum(), np.sum(bisquare_deriv(u, k) / taus)


def one_step(ys, tau_fn, spec, theta0):
    """A single Newton update ``theta0 + Psi / sum(psi'(U_i) / tau_i)`` at ``tau_fn(theta0)``."""
    ys = _values(ys)
    theta0 = float(theta0)
    taus = _taus_at(tau_fn, theta0, ys.size)
    num, den = _newton_parts(theta0, ys, taus, spec)
    if abs(den) < STATIONARY_EPS:
        raise StationaryStartError(f"theta0={theta0:.6g} is a stationary point of Psi")
    return theta0 + num / den


def newton_solve(ys, tau_fn, spec, theta0, update_tau=True, tol=1e-5, max_iter=100, kind=None):
    """Newton-Raphson on the estimating equation (variances frozen within each step)."""
    ys = _values(ys)
    theta0 = _check_start(ys, theta0)
    fixed = None if update_tau else _taus_at(tau_fn, theta0, ys.size)
    theta, step, converged, it = theta0, 0.0, False, 0
    for it in range(1, max_iter + 1):
        taus = fixed if fixed is not None else _taus_at(tau_fn, theta, ys.size)
        num, den = _newton_parts(theta, ys, taus, spec)
        if abs(den) < STATIONARY_EPS:
            if it == 1:
                raise StationaryStartError(f"theta0={theta0:.6g} is a stationary point of Psi")
            break
        new = theta + num / den
        if not np.isfinite(new):
            break
        step, theta = new - theta, new
        if abs(step) < tol:
            converged = True
            break
    if converged:
        theta = _polish(theta, step, lambda t: estimating_equation(t, ys, tau_fn, spec, fixed), tol)
    return _finish("newton", kind, ys, tau_fn, spec, theta, theta0, fixed, it, converged)


SOLVERS = {"irls": irls_solve, "newton": newton_solve}
