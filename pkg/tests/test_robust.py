import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdif.exceptions import AllWeightsZeroError, StationaryStartError
from rdif.robust import (
    PsiSpec,
    RdifFit,
    bisquare,
    bisquare_deriv,
    estimating_equation,
    grid_start,
    irls_solve,
    lts_half,
    newton_solve,
    objective,
    one_step,
    start_value,
    tune_k,
)
from rdif.scaling import omegas

SPEC = PsiSpec()


def const_tau(taus):
    taus = np.asarray(taus, dtype=float)
    return lambda theta: np.broadcast_to(taus, np.shape(theta)[:-1] + taus.shape)


def quad_tau(c, b, e):
    """Synthetic null variances ``c + b (theta - e)^2``, shaped like the IRT ones."""
    c, b, e = (np.asarray(x, dtype=float) for x in (c, b, e))
    return lambda theta: c + b * (np.asarray(theta, dtype=float) - e) ** 2


def null_instance(rng, m=None, theta0=None):
    m = m or int(rng.integers(5, 26))
    theta0 = rng.uniform(-1, 1) if theta0 is None else theta0
    c = rng.uniform(0.005, 0.05, m)
    b = rng.uniform(0.0, 0.01, m)
    e = rng.uniform(-1, 1, m)
    tau_fn = quad_tau(c, b, e)
    ys = theta0 + rng.normal(size=m) * np.sqrt(tau_fn(theta0))
    return ys, tau_fn


def well_conditioned(ys, tau_fn, theta0):
    """Objective curvature at the start is at least a quarter of its value at a perfect fit."""
    taus = tau_fn(theta0)
    curv = np.sum(bisquare_deriv((ys - theta0) / taus, tune_k(taus, SPEC.alpha)) / taus)
    return curv >= 0.25 * np.sum(1.0 / taus)


def brute_argmin(ys, tau_fn, taus=None, step=1e-5, lo=None, hi=None):
    lo = ys.min() if lo is None else lo
    hi = ys.max() if hi is None else hi
    grid = np.arange(lo, hi + step, step)
    best, best_r = None, np.inf
    for s in range(0, grid.size, 20_000):
        g = grid[s : s + 20_000]
        tt = taus if taus is not None else tau_fn(g[:, None])
        tt = np.broadcast_to(tt, (g.size, ys.size))
        _, _, rho = bisquare((ys - g[:, None]) / tt, tune_k(tt, SPEC.alpha))
        r = (tt * rho).sum(axis=1)
        j = int(np.argmin(r))
        if r[j] < best_r:
            best, best_r = g[j], r[j]
    return best


class TestBisquare:
    def test_origin(self):
        assert bisquare(0.0, 1.7) == (0.0, 1.0, 0.0)

    @pytest.mark.parametrize("k", [0.3, 1.0, 4.0])
    def test_beyond_k(self, k):
        psi, w, rho = bisquare(2 * k, k)
        assert (psi, w) == (0.0, 0.0)
        assert rho == pytest.approx(k**2 / 6)

    def test_psi_is_rho_derivative(self):
        k, h = 1.9, 1e-5
        u = np.linspace(-k + 1e-3, k - 1e-3, 401)
        fd = (bisquare(u + h, k)[2] - bisquare(u - h, k)[2]) / (2 * h)
        np.testing.assert_allclose(bisquare(u, k)[0], fd, atol=1e-6)

    def test_deriv_is_psi_derivative(self):
        k, h = 1.3, 1e-6
        u = np.linspace(-k + 1e-3, k - 1e-3, 301)
        fd = (bisquare(u + h, k)[0] - bisquare(u - h, k)[0]) / (2 * h)
        np.testing.assert_allclose(bisquare_deriv(u, k), fd, atol=1e-6)

    @given(st.floats(-50, 50), st.floats(0.01, 20))
    def test_properties(self, u, k):
        psi, w, rho = bisquare(u, k)
        assert 0.0 <= w <= 1.0
        assert bisquare(-u, k)[0] == -psi
        assert 0.0 <= rho <= k**2 / 6 + 1e-12
        if u != 0:
            assert psi == pytest.approx(w * u)


class TestTuning:
    def _with_omega(self, om):
        # two equal taus give omega = 1 / (2 tau)
        return [1.0 / (2.0 * om)] * 2

    def test_unit(self):
        assert tune_k(self._with_omega(1.0), 0.05)[0] == pytest.approx(1.959964, abs=1e-6)

    def test_quarter(self):
        assert tune_k(self._with_omega(0.25), 0.05)[0] == pytest.approx(0.979982, abs=1e-6)

    def test_one_sigma(self):
        mpmath.mp.dps = 50
        ref = float(mpmath.sqrt(2) * mpmath.erfinv(1 - mpmath.mpf("0.32")))
        assert tune_k(self._with_omega(1.0), 0.32)[0] == pytest.approx(ref, abs=1e-12)
        assert ref == pytest.approx(0.994458, abs=1e-6)

    def test_matches_omega(self, rng):
        taus = rng.uniform(0.01, 1, 9)
        np.testing.assert_allclose(tune_k(taus, 0.05), 1.959963984540054 * np.sqrt(omegas(taus)))

    def test_spec_validation(self):
        with pytest.raises(ValueError, match=r"alpha must be in \(0,1\)"):
            PsiSpec(alpha=1.5)
        with pytest.raises(ValueError):
            PsiSpec(alpha=0.05, downtune_alpha=0.1)
        with pytest.raises(ValueError):
            PsiSpec(k=[1.0, -1.0])
        with pytest.raises(ValueError):
            PsiSpec(family="huber")

    def test_fixed_k(self):
        spec = PsiSpec(k=[1.0, 2.0, 3.0])
        np.testing.assert_array_equal(spec.tuning([0.1, 0.2, 0.3]), [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            spec.tuning([0.1, 0.2])


class TestStart:
    @pytest.mark.parametrize("strategy", ["median", "grid", "med3"])
    def test_symmetric(self, strategy):
        # large variances keep all three points inside the convex part of rho
        assert start_value([-1.0, 0.0, 1.0], const_tau([10.0] * 3), SPEC, strategy) == pytest.approx(0.0, abs=1e-12)

    def test_lts_symmetric_tie(self):
        # h = 2: both windows have equal spread, the lower one wins
        assert start_value([-1.0, 0.0, 1.0], const_tau([0.5] * 3), SPEC, "lts_half") == -0.5
        assert start_value([-1.0, 0.0, 1.5, 2.5, 3.0], const_tau([0.5] * 5), SPEC, "lts_half") == pytest.approx(7 / 3)

    def test_lts_window(self):
        assert lts_half([0, 0.1, 0.2, 5, 6]) == pytest.approx(0.1)

    def test_lts_tie_prefers_lower_window(self):
        assert lts_half([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_unknown(self):
        with pytest.raises(ValueError):
            start_value([1, 2, 3], const_tau([1] * 3), SPEC, "mode")

    def test_empty(self):
        with pytest.raises(ValueError):
            start_value([], const_tau([]), SPEC, "median")

    def test_grid_against_fine_search(self, rng):
        for _ in range(50):
            ys, tau_fn = null_instance(rng)
            ys[: len(ys) // 4] += rng.uniform(0.5, 3)
            fine = brute_argmin(ys, tau_fn, step=1e-4)
            assert abs(grid_start(ys, tau_fn, SPEC) - fine) <= 0.05 + 1e-9

    def test_grid_coarsens_wide_ranges(self):
        ys = np.array([-1e6, 0.0, 0.01, 0.02, 1e6])
        theta = grid_start(ys, const_tau([0.01] * 5), SPEC, max_points=1001)
        assert np.isfinite(theta)


class TestIrls:
    def test_identical(self):
        fit = irls_solve([0.7] * 6, const_tau([0.1] * 6), SPEC, 0.7)
        assert fit.theta == 0.7
        assert fit.iterations == 1
        np.testing.assert_array_equal(fit.weights, 1.0)

    def test_symmetric_fixed_point(self):
        ys = 2.0 + np.array([-0.3, -0.1, 0.0, 0.1, 0.3])
        fit = irls_solve(ys, const_tau([0.2] * 5), SPEC, 1.9)
        assert fit.theta == pytest.approx(2.0, abs=1e-10)

    def test_pinned_tau_matches_grid_argmin(self, rng):
        for _ in range(100):
            ys, tau_fn = null_instance(rng)
            fixed = const_tau(tau_fn(float(np.median(ys))))
            fit = irls_solve(ys, fixed, SPEC, start_value(ys, fixed, SPEC, "grid"), update_tau=False)
            assert fit.converged
            assert abs(fit.theta - brute_argmin(ys, fixed, taus=fixed(0.0))) < 1e-4

    def test_updated_tau_is_self_consistent_minimiser(self, rng):
        for _ in range(30):
            ys, tau_fn = null_instance(rng)
            fit = irls_solve(ys, tau_fn, SPEC, start_value(ys, tau_fn, SPEC, "grid"))
            assert fit.converged
            assert abs(fit.theta - brute_argmin(ys, tau_fn, taus=fit.taus)) < 1e-4

    def test_estimating_equation_residual(self, rng):
        for _ in range(50):
            ys, tau_fn = null_instance(rng)
            fit = irls_solve(ys, tau_fn, SPEC, float(np.median(ys)))
            assert abs(fit.psi_sum) < 1e-8
            assert abs(estimating_equation(fit.theta, ys, tau_fn, SPEC)) < 1e-8

    def test_flag_weight_duality(self, rng):
        ys, tau_fn = null_instance(rng, m=15)
        ys[:4] += 2.0
        fit = irls_solve(ys, tau_fn, SPEC, float(np.median(ys)))
        np.testing.assert_array_equal(fit.flagged, fit.weights == 0)
        np.testing.assert_array_equal(fit.flagged, np.abs(fit.residuals) > fit.k)
        assert fit.flagged[:4].all()

    def test_location_equivariance(self, rng):
        c = 3.21
        ys, tau_fn = null_instance(rng, m=12)
        ys[:3] += 1.5
        base = irls_solve(ys, tau_fn, SPEC, float(np.median(ys)))
        moved = irls_solve(ys + c, lambda t: tau_fn(np.asarray(t) - c), SPEC, float(np.median(ys)) + c)
        assert moved.theta - base.theta == pytest.approx(c, abs=1e-9)
        np.testing.assert_array_equal(moved.flagged, base.flagged)

    def test_all_weights_zero(self):
        with pytest.raises(AllWeightsZeroError):
            irls_solve([0.0, 0.1, 0.2], const_tau([0.01] * 3), SPEC, 50.0, update_tau=False)

    def test_non_convergence_is_reported(self, rng):
        ys, tau_fn = null_instance(rng, m=10)
        fit = irls_solve(ys, tau_fn, SPEC, float(ys.max()), tol=1e-300, max_iter=2)
        assert not fit.converged
        assert fit.iterations == 2

    def test_needs_three_items(self):
        with pytest.raises(ValueError):
            irls_solve([0.0, 1.0], const_tau([1.0, 1.0]), SPEC, 0.5)

    def test_round_trip(self, rng):
        ys, tau_fn = null_instance(rng, m=8)
        fit = irls_solve(ys, tau_fn, SPEC, float(np.median(ys)))
        back = RdifFit.from_dict(fit.to_dict())
        assert back.theta == fit.theta
        np.testing.assert_array_equal(back.flagged, fit.flagged)
        np.testing.assert_array_equal(back.taus, fit.taus)


class TestNewton:
    def test_one_step_formula(self):
        # two items well inside k: psi and psi' in closed form
        ys, taus, k = np.array([0.1, -0.05, 0.0]), np.array([0.5, 0.25, 1.0]), 10.0
        spec = PsiSpec(k=[k] * 3)
        theta0 = 0.02
        u = (ys - theta0) / taus
        t = (u / k) ** 2
        num = np.sum(u * (1 - t) ** 2)
        den = np.sum((1 - t) * (1 - 5 * t) / taus)
        assert one_step(ys, const_tau(taus), spec, theta0) == pytest.approx(theta0 + num / den, rel=1e-14)

    def test_one_step_fixed_point(self, rng):
        ys, tau_fn = null_instance(rng, m=10)
        fit = irls_solve(ys, tau_fn, SPEC, float(np.median(ys)), update_tau=False)
        spec = PsiSpec(k=fit.k)
        taus = fit.taus
        assert one_step(ys, const_tau(taus), spec, fit.theta) == pytest.approx(fit.theta, abs=1e-12)

    def test_agrees_with_irls(self, rng):
        checked = 0
        for _ in range(80):
            ys, tau_fn = null_instance(rng)
            theta0 = start_value(ys, tau_fn, SPEC)
            if not well_conditioned(ys, tau_fn, theta0):
                continue
            checked += 1
            a = irls_solve(ys, tau_fn, SPEC, theta0)
            b = newton_solve(ys, tau_fn, SPEC, theta0)
            assert a.converged and b.converged
            assert abs(a.theta - b.theta) < 1e-6
        assert checked >= 30

    def test_stationary_start(self):
        k = 2.0
        u = k / math.sqrt(5.0)  # psi'(u) = 0
        ys = np.array([-u, -u, u, u])
        spec = PsiSpec(k=[k] * 4)
        with pytest.raises(StationaryStartError):
            newton_solve(ys, const_tau([1.0] * 4), spec, 0.0)
        with pytest.raises(StationaryStartError):
            one_step(ys, const_tau([1.0] * 4), spec, 0.0)

    def test_flat_region_start(self):
        with pytest.raises(StationaryStartError):
            newton_solve([0.0, 0.1, 0.2], const_tau([0.01] * 3), SPEC, 50.0)


class TestContamination:
    def _clean(self, rng, m=15, scale=1.0):
        theta0 = 0.5
        tau_fn = quad_tau(scale * rng.uniform(0.01, 0.04, m), rng.uniform(0, 0.01, m), rng.uniform(-1, 1, m))
        ys = theta0 + rng.normal(size=m) * np.sqrt(tau_fn(theta0))
        return ys, tau_fn

    def test_one_step_ignores_contamination_size(self, rng):
        m = 15
        for _ in range(50):
            ys, tau_fn = self._clean(rng, m)
            idx = rng.choice(m, (m - 1) // 2, replace=False)
            ests = []
            for size in (1e6, 1e9):
                bad = ys.copy()
                bad[idx] += size
                ests.append(one_step(bad, tau_fn, SPEC, float(np.median(bad))))
            assert ests[0] == ests[1]

    def test_one_step_below_half(self, rng):
        # near-exact clean data: the median start sits inside the convex part of rho
        m = 15
        for _ in range(20):
            ys, tau_fn = self._clean(rng, m)
            ys = 0.5 + 0.05 * (ys - 0.5)
            clean = irls_solve(ys, tau_fn, SPEC, float(np.median(ys))).theta
            bad = ys.copy()
            bad[rng.choice(m, (m - 1) // 2, replace=False)] += 1e6
            est = one_step(bad, tau_fn, SPEC, float(np.median(bad)))
            assert abs(est - clean) < 0.1

    def test_one_step_tracks_majority(self, rng):
        m = 15
        ys, tau_fn = self._clean(rng, m)
        bad = ys.copy()
        bad[: m - 1] += 1e6
        est = one_step(bad, tau_fn, SPEC, float(np.median(bad)))
        assert est > 1e6 - 10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.floats(1.0, 1e9))
    def test_bounded_bias_below_half(self, seed, count, size):
        rng = np.random.default_rng(seed)
        ys, tau_fn = self._clean(rng)
        clean = irls_solve(ys, tau_fn, SPEC, start_value(ys, tau_fn, SPEC)).theta
        bad = ys.copy()
        bad[rng.choice(15, count, replace=False)] += size
        est = irls_solve(bad, tau_fn, SPEC, start_value(bad, tau_fn, SPEC)).theta
        assert abs(est - clean) < 0.5


class TestDowntune:
    def test_smaller_alpha_never_shrinks_unflagged_set(self, rng):
        ys, tau_fn = null_instance(rng, m=15)
        ys[:5] += np.linspace(0.1, 1.0, 5)
        theta = float(np.median(ys))
        taus = tau_fn(theta)
        u = np.abs((ys - theta) / taus)
        alphas = [0.2, 0.1, 0.05, 0.01, 0.001]
        unflagged = [set(np.flatnonzero(u <= tune_k(taus, a))) for a in alphas]
        for wider, narrower in zip(unflagged[1:], unflagged[:-1]):
            assert narrower <= wider

    def test_downtune_used_for_estimation_only(self, rng):
        ys, tau_fn = null_instance(rng, m=10)
        spec = PsiSpec(alpha=0.05, downtune_alpha=0.01)
        assert spec.tuning_alpha == 0.01
        fit = irls_solve(ys, tau_fn, spec, float(np.median(ys)))
        np.testing.assert_allclose(fit.k, tune_k(fit.taus, 0.01))


class TestObjective:
    def test_vectorised_matches_scalar(self, rng):
        ys, tau_fn = null_instance(rng, m=9)
        grid = np.linspace(-1, 1, 7)
        vec = objective(grid, ys, tau_fn, SPEC)
        np.testing.assert_allclose(vec, [objective(t, ys, tau_fn, SPEC) for t in grid], rtol=1e-13)

    def test_negative_gradient_is_psi(self, rng):
        ys, tau_fn = null_instance(rng, m=9)
        taus = tau_fn(0.1)
        h = 1e-6
        fd = -(objective(0.1 + h, ys, tau_fn, SPEC, taus) - objective(0.1 - h, ys, tau_fn, SPEC, taus)) / (2 * h)
        assert fd == pytest.approx(estimating_equation(0.1, ys, tau_fn, SPEC, taus), abs=1e-6)
