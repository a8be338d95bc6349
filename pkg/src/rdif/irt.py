"""Two-parameter logistic model: simulation and marginal maximum likelihood.

The latent trait is fixed to N(0, 1) during calibration and integrated out on a
fixed rectangular quadrature (nodes evenly spaced on ``[-r, r]``, weights
proportional to the normal density).  Estimation is Bock-Aitkin EM with a
per-item Newton M-step; the covariance of the estimates is the inverse observed
information of the marginal log-likelihood.
"""

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .calibration import CalibrationPair, ItemCalibration
from .exceptions import DegenerateItemError, ParseError, SingularInformationError

log = logging.getLogger(__name__)

SLOPE_BOUNDS = (0.05, 20.0)
MIN_QUAD_POINTS = 11


@dataclass(frozen=True)
class TwoPlSpec:
    a: np.ndarray
    d: np.ndarray
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        d = np.array(self.d, dtype=float)
        if a.ndim != 1 or a.shape != d.shape or a.size == 0:
            raise ValueError("a and d must be equal-length non-empty lists")
        if np.any(~(a > 0)):
            raise ValueError("slopes must be positive")
        if not self.sd > 0:
            raise ValueError("sd must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "d", d)

    @property
    def m(self):
        return self.a.size


@dataclass(frozen=True)
class ResponseMatrix:
    data: np.ndarray
    seed: Optional[int] = None
    item_ids: Optional[tuple] = None

    def __post_init__(self):
        x = np.asarray(self.data)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("responses must be an n x m matrix with n >= 1")
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("responses must be 0/1 with no missing entries")
        x = x.astype(np.uint8)
        x.flags.writeable = False
        object.__setattr__(self, "data", x)
        if self.item_ids is not None:
            ids = tuple(str(i) for i in self.item_ids)
            if len(ids) != x.shape[1]:
                raise ValueError("item_ids length does not match the number of columns")
            object.__setattr__(self, "item_ids", ids)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def m(self):
        return self.data.shape[1]

    @property
    def ids(self):
        return self.item_ids if self.item_ids is not None else tuple(str(j + 1) for j in range(self.m))


def read_responses(source):
    """Parse a response CSV: header row of item ids, then one 0/1 row per respondent."""
    text = source.decode("utf-8") if isinstance(source, (bytes, bytearray)) else (
        source if isinstance(source, str) else source.read())
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ParseError("response CSV needs a header row and at least one respondent")
    header = [h.strip() for h in rows[0]]
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [int(c) for c in row]
        except ValueError:
            raise ParseError(f"line {lineno}: entries must be 0 or 1") from None
        if any(v not in (0, 1) for v in vals):
            raise ParseError(f"line {lineno}: entries must be 0 or 1")
        data.append(vals)
    return ResponseMatrix(np.array(data, dtype=np.uint8), item_ids=tuple(header))


def write_responses(resp):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(resp.ids)
    w.writerows(resp.data.tolist())
    return buf.getvalue().encode("utf-8")


def simulate_2pl(spec, n, seed):
    """Draw ``n`` respondents with trait ``N(mean, sd^2)`` and 0/1 responses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    eta = rng.normal(spec.mean, spec.sd, size=n)
    p = special.expit(eta[:, None] * spec.a + spec.d)
    x = (rng.random((n, spec.m)) < p).astype(np.uint8)
    return ResponseMatrix(x, seed=seed)


class Quadrature:
    """Rectangular rule for N(0, 1) on equally spaced nodes over ``[-half_range, half_range]``.

    With few points the range shrinks so that the node spacing never exceeds
    sqrt(3), the spacing of three-point Gauss-Hermite; otherwise nearly all
    mass sits on the centre node.
    """

    def __init__(self, points=61, half_range=5.0):
        if points < 2:
            raise ValueError("need at least two quadrature points")
        self.points = int(points)
        self.half_range = min(float(half_range), 0.5 * math.sqrt(3.0) * (self.points - 1))
        self.nodes = np.linspace(-self.half_range, self.half_range, self.points)
        logw = -0.5 * self.nodes**2
        self.log_weights = logw - special.logsumexp(logw)

    @property
    def weights(self):
        return np.exp(self.log_weights)


@dataclass
class Mle2pl:
    a_hat: np.ndarray
    d_hat: np.ndarray
    cov: Optional[np.ndarray]
    loglik: float
    em_iterations: int
    converged: bool
    n: int
    quad_points: int = 61
    quad_range: float = 5.0
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def m(self):
        return self.a_hat.size

    @property
    def params(self):
        """Estimates interleaved as ``(a_1, d_1, ..., a_m, d_m)``."""
        return np.column_stack([self.a_hat, self.d_hat]).ravel()


def _posterior(x, a, d, quad):
    """Posterior weights over nodes (n x Q) and per-respondent log-likelihoods."""
    eta = np.outer(quad.nodes, a) + d  # Q x m
    log_p = -np.logaddexp(0.0, -eta)
    log_q = -np.logaddexp(0.0, eta)
    ll = x @ (log_p - log_q).T + (log_q.sum(axis=1) + quad.log_weights)  # n x Q
    mx = ll.max(axis=1, keepdims=True)
    post = np.exp(ll - mx)
    tot = post.sum(axis=1, keepdims=True)
    post /= tot
    return post, mx[:, 0] + np.log(tot[:, 0])


def _estep(x, a, d, quad):
    """Expected counts at the nodes and the marginal log-likelihood."""
    post, lse = _posterior(x, a, d, quad)
    n_q = post.sum(axis=0)
    r_q = post.T @ x  # Q x m
    return n_q, r_q, float(lse.sum())


def _score_from_counts(n_q, r_q, a, d, nodes):
    p = special.expit(np.outer(nodes, a) + d)
    resid = r_q - n_q[:, None] * p
    return np.column_stack([nodes @ resid, resid.sum(axis=0)]).ravel()


def _item_objective(a, d, n_q, r_q, nodes):
    eta = np.outer(nodes, a) + d
    return np.sum(r_q * eta - n_q[:, None] * np.logaddexp(0.0, eta), axis=0)


def _mstep(a, d, n_q, r_q, nodes, max_inner=20):
    """Per-item Newton ascent on the expected complete-data log-likelihood."""
    lo, hi = SLOPE_BOUNDS
    a, d = a.copy(), d.copy()
    f = _item_objective(a, d, n_q, r_q, nodes)
    for _ in range(max_inner):
        p = special.expit(np.outer(nodes, a) + d)
        resid = r_q - n_q[:, None] * p
        ga, gd = nodes @ resid, resid.sum(axis=0)
        wq = n_q[:, None] * p * (1.0 - p)
        haa, had, hdd = (nodes**2) @ wq, nodes @ wq, wq.sum(axis=0)
        det = haa * hdd - had**2
        da = (hdd * ga - had * gd) / det
        dd = (haa * gd - had * ga) / det
        step = np.ones_like(a)
        for _ in range(30):
            na = np.clip(a + step * da, lo, hi)
            nd = d + step * dd
            nf = _item_objective(na, nd, n_q, r_q, nodes)
            bad = nf < f - 1e-12
            if not bad.any():
                break
            step = np.where(bad, step * 0.5, step)
        keep = nf >= f - 1e-12
        a = np.where(keep, na, a)
        d = np.where(keep, nd, d)
        f = np.where(keep, nf, f)
        if np.max(np.abs(step * np.concatenate([da, dd]).reshape(2, -1))) < 1e-10:
            break
    return a, d


def _start_values(x):
    pbar = x.mean(axis=0).clip(1e-3, 1 - 1e-3)
    return np.ones(x.shape[1]), 1.7 * special.logit(pbar) / 1.3


def _newton_polish(a, d, ll, data, quad, max_steps=5):
    # EM stops on the parameter change; a few safeguarded Newton steps on the
    # marginal likelihood drive the score to rounding level.
    x = np.asarray(data.data, dtype=float)
    lo, hi = SLOPE_BOUNDS
    for _ in range(max_steps):
        theta = np.column_stack([a, d]).ravel()
        n_q, r_q, _ = _estep(x, a, d, quad)
        g = _score_from_counts(n_q, r_q, a, d, quad.nodes)
        if np.max(np.abs(g)) < 1e-9 * x.shape[0]:
            break
        info = observed_information(theta, data, quad.points, quad.half_range)
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            break
        for scale in (1.0, 0.5, 0.25, 0.125):
            cand = (theta + scale * step).reshape(-1, 2)
            if np.any((cand[:, 0] <= lo) | (cand[:, 0] >= hi)):
                continue
            new_ll = _estep(x, cand[:, 0], cand[:, 1], quad)[2]
            if new_ll >= ll:
                a, d, ll = cand[:, 0].copy(), cand[:, 1].copy(), new_ll
                break
        else:
            break
    return a, d, ll


def fit_2pl(data, quad_points=61, quad_range=5.0, tol=1e-5, max_iter=2000, covariance=True, polish=True):
    """Marginal maximum likelihood for the 2PL by Bock-Aitkin EM.

    Converged means the largest absolute parameter change of an EM cycle fell
    below ``tol`` without any slope resting on its bound.  ``loglik_trace`` holds
    the log-likelihood before every EM cycle and after the last one; ``polish``
    then takes a few likelihood-increasing Newton steps.
    """
    x = np.asarray(data.data, dtype=float)
    bad = [data.ids[j] for j in range(x.shape[1]) if x[:, j].min() == x[:, j].max()]
    if bad:
        raise DegenerateItemError(bad)
    if quad_points < MIN_QUAD_POINTS:
        warnings.warn(f"{quad_points} quadrature points is too few for accurate integration", stacklevel=2)
    quad = Quadrature(quad_points, quad_range)
    a, d = _start_values(x)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        n_q, r_q, ll = _estep(x, a, d, quad)
        trace.append(ll)
        na, nd = _mstep(a, d, n_q, r_q, quad.nodes)
        change = max(np.max(np.abs(na - a)), np.max(np.abs(nd - d)))
        a, d = na, nd
        if change < tol:
            converged = True
            break
    _, _, ll = _estep(x, a, d, quad)
    trace.append(ll)
    lo, hi = SLOPE_BOUNDS
    if converged and polish:
        a, d, ll = _newton_polish(a, d, ll, data, quad)
    if np.any((a <= lo) | (a >= hi)):
        converged = False
    if not converged:
        log.warning("2PL EM did not converge after %d iterations", it)
    fit = Mle2pl(a, d, None, ll, it, converged, x.shape[0], quad_points, quad.half_range, trace)
    if covariance:
        fit.cov = mle_covariance(fit, data)
    return fit


def marginal_loglik(params, data, quad_points=61, quad_range=5.0):
    p = np.asarray(params, dtype=float).reshape(-1, 2)
    return _estep(np.asarray(data.data, dtype=float), p[:, 0], p[:, 1], Quadrature(quad_points, quad_range))[2]


def marginal_score(params, data, quad_points=61, quad_range=5.0):
    """Analytic gradient of the marginal log-likelihood, ordered ``(a_1, d_1, ...)``."""
    p = np.asarray(params, dtype=float).reshape(-1, 2)
    quad = Quadrature(quad_points, quad_range)
    n_q, r_q, _ = _estep(np.asarray(data.data, dtype=float), p[:, 0], p[:, 1], quad)
    return _score_from_counts(n_q, r_q, p[:, 0], p[:, 1], quad.nodes)


def observed_information(params, data, quad_points=61, quad_range=5.0):
    """Exact observed information of the marginal log-likelihood (Louis identity).

    ``I = E_post[-d2 log f] - sum_r Cov_post(s_r)`` where ``s_r`` is respondent
    ``r``'s complete-data score at a node.  Ordered ``(a_1, d_1, ..., a_m, d_m)``.
    """
    p2 = np.asarray(params, dtype=float).reshape(-1, 2)
    a, d = p2[:, 0], p2[:, 1]
    quad = Quadrature(quad_points, quad_range)
    x = np.asarray(data.data, dtype=float)
    m = x.shape[1]
    post, _ = _posterior(x, a, d, quad)
    p = special.expit(np.outer(quad.nodes, a) + d)  # Q x m
    n_q = post.sum(axis=0)
    r_q = post.T @ x
    xs = (np.ones_like(quad.nodes), quad.nodes, quad.nodes**2)

    # sum_r sum_q post_rq x_q^k e_rjq e_rlq, with e = y - p
    yy = (post.T @ (x[:, :, None] * x[:, None, :]).reshape(x.shape[0], m * m)).reshape(-1, m, m)
    cross = r_q[:, :, None] * p[:, None, :]
    full = yy - cross - np.transpose(cross, (0, 2, 1)) + n_q[:, None, None] * p[:, :, None] * p[:, None, :]
    ess = [np.tensordot(xk, full, axes=1) for xk in xs]

    # per-respondent posterior means of the score components
    mom = [post @ xk for xk in xs[:2]]  # n
    es = [x * mom[k][:, None] - post @ (xs[k][:, None] * p) for k in range(2)]  # n x m

    info = np.zeros((2 * m, 2 * m))
    # complete-data information (block diagonal)
    wq = n_q[:, None] * p * (1.0 - p)
    blocks = [(xs[2] @ wq, xs[1] @ wq), (xs[1] @ wq, xs[0] @ wq)]
    idx = np.arange(m)
    for r_, (kx_a, kx_b) in enumerate(blocks):
        info[2 * idx + r_, 2 * idx] += kx_a
        info[2 * idx + r_, 2 * idx + 1] += kx_b
    # minus posterior covariance of the complete-data score; component 0 is the
    # slope (power 1 of the node), component 1 the intercept (power 0)
    power = (1, 0)
    for u in range(2):
        for v in range(2):
            cov_uv = ess[power[u] + power[v]] - es[power[u]].T @ es[power[v]]
            info[u::2, v::2] -= cov_uv
    return 0.5 * (info + info.T)


def mle_covariance(fit, data, method="louis", h=1e-5):
    """Inverse observed information of the marginal log-likelihood.

    ``method="louis"`` uses the exact Louis-identity information; ``"fd"`` uses
    central finite differences of the analytic score.
    """
    theta = fit.params
    if method == "louis":
        info = observed_information(theta, data, fit.quad_points, fit.quad_range)
    elif method == "fd":
        k = theta.size
        hess = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = h
            up = marginal_score(theta + e, data, fit.quad_points, fit.quad_range)
            dn = marginal_score(theta - e, data, fit.quad_points, fit.quad_range)
            hess[:, j] = (up - dn) / (2 * h)
        info = -0.5 * (hess + hess.T)
    else:
        raise ValueError(f"unknown method {method!r}")
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformationError("observed information is not positive definite") from None
    inv_chol = np.linalg.solve(chol, np.eye(theta.size))
    cov = inv_chol.T @ inv_chol
    return 0.5 * (cov + cov.T)


def make_pair(fit0, fit1, indices=None):
    """Assemble a calibration pair from two independent group calibrations."""
    if fit0.m != fit1.m:
        raise ValueError(f"dimension mismatch: {fit0.m} vs {fit1.m} items")
    if fit0.cov is None or fit1.cov is None:
        raise ValueError("both fits need a covariance matrix")
    indices = list(range(1, fit0.m + 1)) if indices is None else list(indices)
    items = []
    for j, idx in enumerate(indices):
        block = np.zeros((4, 4))
        block[:2, :2] = fit0.cov[2 * j : 2 * j + 2, 2 * j : 2 * j + 2]
        block[2:, 2:] = fit1.cov[2 * j : 2 * j + 2, 2 * j : 2 * j + 2]
        items.append(ItemCalibration(idx, fit0.a_hat[j], fit0.d_hat[j], fit1.a_hat[j], fit1.d_hat[j], block))
    return CalibrationPair(tuple(items), fit0.n, fit1.n)
