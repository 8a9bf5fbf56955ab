import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.special import erfc
from scipy.stats import qmc

from adbatch import acquisition as acq
from adbatch.gp import GPModel, Homoskedastic, KernelParams, ReplicatedDesign


class FixedPosterior:
    """Stand-in model returning prescribed (fhat, s) everywhere."""

    def __init__(self, fhat, s, tau2=1.0):
        self.fhat, self.s, self.tau2 = fhat, s, tau2

    def predict(self, X):
        n = np.atleast_2d(X).shape[0]
        return np.full(n, self.fhat, dtype=float), np.full(n, self.s, dtype=float)

    def lookahead_noise_variance(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.tau2)

    def lookahead_sd_new(self, X, r, sd=None):
        s2 = self.s**2
        nv = self.tau2 / np.asarray(r, dtype=float)
        return np.sqrt(s2 * nv / (nv + s2)) * np.ones(np.atleast_2d(X).shape[0])


def small_model(rng):
    X = rng.random((6, 2))
    return GPModel(ReplicatedDesign(X, np.full(6, 3), np.sin(4 * X[:, 0]) - 0.3), KernelParams([0.3, 0.4], 0.8), Homoskedastic(0.5))


class TestNormalCdf:
    @pytest.mark.parametrize("z", [-30.0, -8.0, -1.0, 0.0, 0.5, 3.0, 9.0])
    def test_against_erfc(self, z):
        assert acq.norm_cdf(z) == pytest.approx(0.5 * erfc(-z / math.sqrt(2)), rel=0, abs=1e-12)


class TestRho:
    def test_constant_mean_gives_zero(self):
        assert acq.rho_weight(np.full(10, 0.3), np.ones(10)) == 0.0

    def test_substitution(self):
        fhat = np.array([-1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
        assert acq.rho_weight(np.sort(fhat), np.ones(8)) == pytest.approx(2 / 3)

    def test_zero_sd_fallback(self):
        assert acq.rho_weight(np.array([0.0, 1.0]), np.zeros(2)) == 1.0

    @given(c=st.floats(0.01, 100.0))
    def test_scale_equivariance(self, c):
        rng = np.random.default_rng(0)
        fhat, s = rng.normal(size=50), rng.uniform(0.1, 1.0, size=50)
        assert acq.rho_weight(c * fhat, c * s) == pytest.approx(acq.rho_weight(fhat, s), rel=1e-10)


class TestCriteria:
    def test_cucb_substitution(self):
        assert acq.cucb([[0.5]], FixedPosterior(0.2, 0.1), 3.0)[0] == pytest.approx(0.1)

    def test_cucb_on_contour_nonnegative(self):
        assert acq.cucb([[0.5]], FixedPosterior(0.0, 0.4), 2.0)[0] == pytest.approx(0.8)

    def test_cucb_zero_measure(self):
        assert acq.cucb([[0.5]], FixedPosterior(-3.0, 0.4), 2.0, mu=lambda X: np.zeros(len(X)))[0] == 0.0

    def test_cucb_argmax_invariant_to_measure_scaling(self, rng):
        model = small_model(rng)
        X = rng.random((100, 2))
        mu = lambda Z: 0.5 + Z[:, 0]
        a = acq.cucb(X, model, 1.0, mu)
        b = acq.cucb(X, model, 1.0, lambda Z: 7.0 * mu(Z))
        assert np.argmax(a) == np.argmax(b)

    @pytest.mark.parametrize("fhat, s, expected", [(0.0, 1.0, 0.5), (1.96, 1.0, 0.0249979), (1.0, 0.0, 0.0), (0.0, 0.0, 0.5)])
    def test_local_error(self, fhat, s, expected):
        assert acq.local_error(fhat, s) == pytest.approx(expected, abs=1e-6)

    @given(a=st.floats(0, 10), b=st.floats(0, 10))
    def test_local_error_monotone(self, a, b):
        lo, hi = sorted([a, b])
        assert acq.local_error(hi, 1.0) <= acq.local_error(lo, 1.0)

    def test_gsur_zero_on_contour(self):
        assert acq.gsur([[0.1]], 5, FixedPosterior(0.0, 0.7)) == 0.0

    def test_gsur_substitution(self):
        val = acq.gsur([[0.1]], 1, FixedPosterior(1.0, 1.0))[0]
        assert val == pytest.approx(0.15866 - 0.07865, abs=1e-4)

    def test_gsur_large_r_limit(self):
        val = acq.gsur([[0.1]], 1e12, FixedPosterior(0.8, 1.0))[0]
        assert val == pytest.approx(acq.norm_cdf(-0.8), rel=1e-5)

    @given(fhat=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), s=st.floats(0.05, 2.0), r=st.integers(1, 100))
    def test_gsur_positive(self, fhat, s, r):
        # Beyond |fhat|/s ~ 37 both tail probabilities underflow to zero.
        assume(abs(fhat) / s < 30)
        assert acq.gsur([[0.0]], r, FixedPosterior(fhat, s))[0] > 0

    @given(seed=st.integers(0, 10_000))
    def test_absur_numerator_matches_gsur_form(self, seed):
        rng = np.random.default_rng(seed)
        fhat, s, tau2 = rng.normal(), rng.uniform(0.05, 2), rng.uniform(0.1, 3)
        r = int(rng.integers(1, 200))
        gs = acq.gsur([[0.0]], r, FixedPosterior(fhat, s, tau2))[0]
        assert acq.absur_numerator(fhat, s, r, tau2) == pytest.approx(gs, abs=1e-12)

    def test_absur_zero_on_contour(self):
        cost = acq.CostModel()
        vals = acq.absur(np.zeros((3, 1)), np.array([1, 10, 100]), FixedPosterior(0.0, 0.5), cost, 50)
        np.testing.assert_array_equal(vals, 0.0)

    def test_absur_larger_overhead_favours_larger_batches(self):
        model = FixedPosterior(0.3, 0.5)
        grid = np.arange(1, 401)
        X = np.zeros((grid.size, 1))
        cheap = acq.absur(X, grid, model, acq.CostModel(0.01, (0.001, 0.0, 0.0)), 10)
        dear = acq.absur(X, grid, model, acq.CostModel(0.01, (1.0, 0.0, 0.0)), 10)
        assert grid[np.argmax(dear)] > grid[np.argmax(cheap)]

    def test_absur_decreasing_for_large_r(self):
        vals = acq.absur(np.zeros((3, 1)), np.array([2000, 4000, 8000]), FixedPosterior(0.5, 0.5), acq.CostModel(), 30)
        assert vals[0] > vals[1] > vals[2]


class TestCost:
    def test_default_theta_at_zero(self):
        assert acq.overhead_cost(0, acq.CostModel()) == pytest.approx(0.137)

    def test_default_theta_at_hundred(self):
        assert acq.overhead_cost(100, acq.CostModel()) == pytest.approx(0.2384)

    def test_constant_overhead(self):
        c = acq.CostModel(0.01, (0.2, 0.0, 0.0))
        assert acq.overhead_cost(1000, c) == pytest.approx(0.2)

    def test_nonpositive_overhead_rejected(self):
        with pytest.raises(ValueError):
            acq.CostModel(0.01, (-1.0, 0.0, 0.0)).check(10)

    def test_fit_recovers_quadratic(self):
        n = np.arange(10, 200, 10)
        theta, r2 = acq.fit_overhead(n, 0.1 + 0.002 * n + 3e-5 * n**2)
        np.testing.assert_allclose(theta, [0.1, 0.002, 3e-5], rtol=1e-8)
        assert r2 == pytest.approx(1.0)

    def test_fit_constant_stub(self):
        rng = np.random.default_rng(0)
        n = np.repeat(np.arange(10, 110, 10), 5)
        theta, _ = acq.fit_overhead(n, 0.05 + 1e-4 * rng.standard_normal(n.size))
        assert abs(theta[1]) < 1e-5 and abs(theta[2]) < 1e-7


class TestOptimizer:
    def test_known_optimum(self, rng):
        c = np.array([0.3, 0.8])
        res = acq.optimize_acquisition(lambda X: -((X - c) ** 2).sum(axis=1), 2, rng)
        np.testing.assert_allclose(res.x, c, atol=1e-2)

    def test_never_worse_than_screen(self):
        model = small_model(np.random.default_rng(1))
        crit = lambda X: acq.cucb(X, model, 0.5)
        res = acq.optimize_acquisition(crit, 2, np.random.default_rng(5))
        # Independent 512-point Sobol screen with the same scrambling.
        Z = qmc.Sobol(2, scramble=True, seed=np.random.default_rng(5)).random_base2(9)
        assert res.value >= crit(Z).max()
        assert res.value >= res.screen_best

    @given(lo=st.integers(1, 50), width=st.integers(0, 300))
    def test_joint_r_within_range(self, lo, width):
        hi = lo + width
        res = acq.optimize_acquisition(
            lambda X, r: -np.abs(np.log(r) - 2.0) - X[:, 0], 1, np.random.default_rng(0), r_range=(lo, hi), n_candidates=64, n_polish=1
        )
        assert lo <= res.r <= hi and float(res.r).is_integer()

    def test_feasibility_mask(self, rng):
        res = acq.optimize_acquisition(lambda X: X[:, 0], 2, rng, feasible=lambda X: X[:, 0] < 0.5)
        assert res.x[0] < 0.5

    def test_empty_domain(self, rng):
        with pytest.raises(ValueError):
            acq.optimize_acquisition(lambda X: X[:, 0], 0, rng)
