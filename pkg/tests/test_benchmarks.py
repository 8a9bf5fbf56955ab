import math

import numpy as np
import pytest
from scipy import ndimage
from scipy.stats import qmc

from adbatch.benchmarks import (
    HARTMAN6_ARGMIN,
    HARTMAN6_MIN,
    PROBLEMS,
    TABLE_LADDER,
    GaussianNoise,
    HetStudentT,
    branin_mod,
    compute_rescaling_constants,
    get_problem,
    hartman6_mod,
    hartman6_raw,
    load_rescaling_constants,
    run_experiment,
)
from adbatch.schemes import RunSettings


@pytest.fixture(scope="module")
def branin_grid():
    g = (np.arange(1000) + 0.5) / 1000
    U, V = np.meshgrid(g, g, indexing="ij")
    return branin_mod(np.column_stack([U.ravel(), V.ravel()])).reshape(1000, 1000)


@pytest.fixture(scope="module")
def hartman_lhs():
    X = qmc.LatinHypercube(6, seed=123).random(10**6)
    return np.concatenate([hartman6_mod(X[i : i + 100_000]) for i in range(0, 10**6, 100_000)])


class TestBranin:
    def test_range(self, branin_grid):
        assert branin_grid.min() >= -1.05 and branin_grid.max() <= 1.05

    def test_both_signs(self, branin_grid):
        assert (branin_grid > 0).any() and (branin_grid < 0).any()

    def test_single_contour(self, branin_grid):
        # Each side of the zero contour is one connected region.
        assert ndimage.label(branin_grid > 0)[1] == 1
        assert ndimage.label(branin_grid <= 0)[1] == 1

    def test_increasing_in_first_coordinate(self, branin_grid):
        assert np.all(np.diff(branin_grid, axis=0) > 0)

    def test_contour_crosses_domain(self, branin_grid):
        # Every horizontal line meets the contour once.
        crossings = np.diff(np.sign(branin_grid), axis=0) != 0
        np.testing.assert_array_equal(crossings.sum(axis=0), 1)

    @pytest.mark.parametrize("bad", [[[1.2, 0.5]], [[0.5, -0.1]], [[0.1, 0.2, 0.3]], [[np.nan, 0.5]]])
    def test_out_of_domain(self, bad):
        with pytest.raises(ValueError):
            branin_mod(bad)


class TestHartman:
    def test_published_minimum(self):
        assert hartman6_raw(HARTMAN6_ARGMIN)[0] == pytest.approx(-3.3224, abs=1e-4)
        assert HARTMAN6_MIN == pytest.approx(-3.3224, abs=1e-4)

    def test_minimizer_is_local_min(self):
        rng = np.random.default_rng(0)
        near = HARTMAN6_ARGMIN + 1e-3 * rng.standard_normal((50, 6))
        assert np.all(hartman6_raw(near) > hartman6_raw(HARTMAN6_ARGMIN)[0])

    def test_range(self, hartman_lhs):
        assert hartman_lhs.min() >= -1.05 and hartman_lhs.max() <= 1.05

    def test_signs_and_band(self, hartman_lhs):
        assert (hartman_lhs > 0).any() and (hartman_lhs < 0).any()
        assert (np.abs(hartman_lhs) < 0.7).any()

    def test_level_set_volume(self, hartman_lhs):
        assert np.mean(hartman_lhs > 0) == pytest.approx(0.15, abs=0.005)

    def test_positive_at_minimizer(self):
        # The scale comes from a sample, so the true peak lands a bit above 1.
        assert 1.0 < hartman6_mod(HARTMAN6_ARGMIN)[0] <= 1.05


class TestRescalingFixture:
    def test_fixture_digits(self):
        from importlib import resources

        text = resources.files("adbatch").joinpath("data/rescaling.txt").read_text()
        for line in text.splitlines():
            if line and not line.startswith("#"):
                mantissa = line.split("=")[1].strip().lstrip("-").replace(".", "").lstrip("0")
                assert len(mantissa) == 12

    @pytest.mark.slow
    def test_fixture_reproduces(self):
        fresh = compute_rescaling_constants()
        for key, val in load_rescaling_constants().items():
            assert fresh[key] == pytest.approx(val, rel=1e-11)


class TestNoise:
    def test_gaussian_variance(self):
        y = GaussianNoise(1.0).sample(None, 10**6, np.random.default_rng(0))
        assert y.var() == pytest.approx(1.0, rel=0.01)
        assert abs(y.mean()) < 3 / 1000

    @pytest.mark.parametrize("x1, df, scale", [(0.0, 6.0, 0.4), (0.5, 4.0, 1.2), (1.0, 2.0, 2.0)])
    def test_het_parameters(self, x1, df, scale):
        noise = HetStudentT()
        X = np.array([[x1, 0.3]])
        assert noise.df(X)[0] == df and noise.scale(X)[0] == pytest.approx(scale)

    def test_het_variance_at_origin(self):
        noise = HetStudentT()
        assert noise.variance(np.array([[0.0, 0.0]]))[0] == pytest.approx(0.24)
        y = noise.sample([0.0, 0.0], 10**6, np.random.default_rng(1))
        assert y.var() == pytest.approx(0.24, rel=0.03)
        assert abs(y.mean()) < 3 * math.sqrt(0.24 / 10**6)

    def test_het_variance_diverges_at_edge(self):
        assert np.isinf(HetStudentT().variance(np.array([[1.0, 0.5]]))[0])


class TestRegistry:
    def test_names(self):
        assert sorted(PROBLEMS) == ["branin2d-gauss", "branin2d-hetT", "hartman6"]

    def test_unknown(self):
        with pytest.raises(ValueError, match="branin2d-gauss"):
            get_problem("rosenbrock")

    @pytest.mark.parametrize(
        "name, expected",
        [
            ("branin2d-gauss", dict(N_T=2000, k0=20, r0=10, M=500, r_range=(5, 200), T_sim=0.01, c_bt=10.0)),
            ("hartman6", dict(N_T=6000, k0=60, r0=10, M=1000, r_range=(5, 300), T_sim=0.05, c_bt=20 / 6)),
        ],
    )
    def test_defaults_snapshot(self, name, expected):
        d = get_problem(name).defaults
        for key, val in expected.items():
            assert d[key] == val
        assert d["ladder"] == TABLE_LADDER == (5, 10, 15, 20, 30, 40, 50, 60, 80, 100, 140, 180, 240, 300)

    def test_simulator_uses_truth(self):
        prob = get_problem("branin2d-gauss")
        x = np.array([0.3, 0.7])
        y = prob.simulate(x, 20000, np.random.default_rng(0))
        assert y.mean() == pytest.approx(prob.truth(x[None])[0], abs=4 / math.sqrt(20000))


@pytest.fixture(scope="module")
def table():
    prob = get_problem("branin2d-gauss")
    settings = [RunSettings(scheme=s, N_T=300, k0=10, r0=10, M=100, n_candidates=64, n_polish=1) for s in ("fb", "ddsa")]
    return prob, settings, run_experiment(prob, settings, macro_reps=3, seed=5)


class TestRunExperiment:
    def test_schema(self, table):
        rows = table[2]
        assert [r["scheme"] for r in rows] == ["fb", "ddsa"]
        for r in rows:
            assert {"scheme", "model", "er_mean", "er_sd", "time", "k_T"} <= set(r)
            assert len(r["er"]) == 3

    def test_reproducible(self, table):
        prob, settings, rows = table
        again = run_experiment(prob, settings, macro_reps=3, seed=5)
        for a, b in zip(rows, again):
            assert a["er"] == b["er"] and a["k"] == b["k"]

