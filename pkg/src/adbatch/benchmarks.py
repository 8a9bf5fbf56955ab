"""Synthetic level-set benchmarks and the macro-replication harness.

Both test functions are affinely rescaled so the response lies roughly in
[-1, 1].  The rescaling constants live in ``data/rescaling.txt``; they were
produced by :func:`compute_rescaling_constants` and are loaded, not
recomputed, at import time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np
from scipy.stats import qmc

__all__ = [
    "GaussianNoise",
    "HetStudentT",
    "SyntheticProblem",
    "branin_raw",
    "branin_mod",
    "hartman6_raw",
    "hartman6_mod",
    "HARTMAN6_ARGMIN",
    "HARTMAN6_MIN",
    "TABLE_LADDER",
    "compute_rescaling_constants",
    "load_rescaling_constants",
    "get_problem",
    "PROBLEMS",
    "run_experiment",
]

TABLE_LADDER = (5, 10, 15, 20, 30, 40, 50, 60, 80, 100, 140, 180, 240, 300)

# -- Branin-Hoo -----------------------------------------------------------------

_BR_A = 1.0
_BR_B = 5.1 / (4 * math.pi**2)
_BR_C = 5 / math.pi
_BR_R = 6.0
_BR_S = 10.0
_BR_T = 1 / (8 * math.pi)

# Restricted domain.  The first unit coordinate drives Branin's second
# argument over [3, 15], where the function is increasing for every value of
# the first argument in [2.5, 10]; this makes the response monotone in x^1.
# The first argument is cut at 2*pi so the zero contour is a single tilted
# curve rather than a bulge whose two ends sit at the same x^1.
BRANIN_V_RANGE = (3.0, 15.0)
BRANIN_U_RANGE = (2.5, 2 * math.pi)


def branin_raw(u, v):
    """Standard Branin-Hoo function b(u, v)."""
    return _BR_A * (v - _BR_B * u**2 + _BR_C * u - _BR_R) ** 2 + _BR_S * (1 - _BR_T) * np.cos(u) + _BR_S


def _branin_unit(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    v = BRANIN_V_RANGE[0] + (BRANIN_V_RANGE[1] - BRANIN_V_RANGE[0]) * X[:, 0]
    u = BRANIN_U_RANGE[0] + (BRANIN_U_RANGE[1] - BRANIN_U_RANGE[0]) * X[:, 1]
    return branin_raw(u, v)


# -- Hartman-6 ------------------------------------------------------------------

_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
_H6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)
HARTMAN6_ARGMIN = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])
HARTMAN6_MIN = -3.32237

# Share of the cube inside the rescaled level set.  With the offset at the
# output midrange the level set would cover under 2% of the cube.
HARTMAN6_LEVEL_VOLUME = 0.15


def hartman6_raw(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    inner = ((X[:, None, :] - _H6_P[None]) ** 2 * _H6_A[None]).sum(axis=-1)
    return -np.exp(-inner) @ _H6_ALPHA


# -- rescaling fixtures ------------------------------------------------------------


def compute_rescaling_constants(n_grid: int = 1000, n_lhs: int = 10**6, seed: int = 0) -> dict:
    """Offsets and scales that map both functions to about [-1, 1].

    Branin uses the median over an ``n_grid x n_grid`` midpoint grid as the
    offset and the largest deviation from it as the scale.  Hartman uses the
    ``HARTMAN6_LEVEL_VOLUME`` quantile over ``n_lhs`` Latin hypercube points.
    """
    g = (np.arange(n_grid) + 0.5) / n_grid
    G = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    b = _branin_unit(G)
    b_off = float(np.median(b))
    b_scale = float(np.max(np.abs(b - b_off)))
    X = qmc.LatinHypercube(6, seed=seed).random(n_lhs)
    h = np.concatenate([hartman6_raw(X[i : i + 100_000]) for i in range(0, n_lhs, 100_000)])
    h_off = float(np.quantile(h, HARTMAN6_LEVEL_VOLUME))
    h_scale = float(np.max(np.abs(h - h_off)))
    return {
        "branin2d_offset": b_off,
        "branin2d_scale": b_scale,
        "hartman6_offset": h_off,
        "hartman6_scale": h_scale,
    }


def load_rescaling_constants() -> dict:
    text = resources.files("adbatch").joinpath("data/rescaling.txt").read_text()
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, val = (s.strip() for s in line.split("="))
            out[key] = float(val)
    return out


_RESCALE = load_rescaling_constants()


def _check_unit(X, dim):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != dim:
        raise ValueError(f"expected {dim}-dimensional inputs")
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12) or not np.all(np.isfinite(X)):
        raise ValueError("inputs must lie in the unit cube")
    return X


def branin_mod(X) -> np.ndarray:
    """Rescaled, restricted Branin-Hoo on [0, 1]^2 (increasing in x^1)."""
    X = _check_unit(X, 2)
    return (_branin_unit(X) - _RESCALE["branin2d_offset"]) / _RESCALE["branin2d_scale"]


def hartman6_mod(X) -> np.ndarray:
    """Rescaled Hartman-6 on [0, 1]^6; positive near the global minimum."""
    X = _check_unit(X, 6)
    return (_RESCALE["hartman6_offset"] - hartman6_raw(X)) / _RESCALE["hartman6_scale"]


# -- noise ----------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    tau2: float = 1.0

    def sample(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(self.tau2), size=count)

    def variance(self, X) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.tau2)


@dataclass(frozen=True)
class HetStudentT:
    """t noise with df(x) = 6 - 4 x^1 and scale 0.4 (4 x^1 + 1).

    The scale is the t scale parameter (its square is the second argument
    of the t_nu(0, scale^2) notation), so the variance is
    scale^2 df / (df - 2), which diverges as x^1 -> 1.
    """

    def df(self, X) -> np.ndarray:
        return 6.0 - 4.0 * np.atleast_2d(X)[:, 0]

    def scale(self, X) -> np.ndarray:
        return 0.4 * (4.0 * np.atleast_2d(X)[:, 0] + 1.0)

    def sample(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return self.scale(x)[0] * rng.standard_t(self.df(x)[0], size=count)

    def variance(self, X) -> np.ndarray:
        df = self.df(X)
        with np.errstate(divide="ignore"):
            return np.where(df > 2, self.scale(X) ** 2 * df / (df - 2), np.inf)


# -- problems -------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticProblem:
    """Noisy simulator ``Y(x) = f(x) + eps(x)`` on the unit cube.

    ``defaults`` holds the benchmark's standard experiment settings.
    """

    name: str
    dim: int
    f: Callable[[np.ndarray], np.ndarray]
    noise: GaussianNoise | HetStudentT
    defaults: dict = field(default_factory=dict, compare=False)

    mu = None
    feasible = None

    def simulate(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return self.f(x)[0] + self.noise.sample(x, int(count), rng)

    def truth(self, X) -> np.ndarray:
        return self.f(X)

    def noise_variance(self, X) -> np.ndarray:
        return self.noise.variance(X)

    def sample_inputs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.dim))


_DEFAULTS_2D = {
    "N_T": 2000,
    "k0": 20,
    "r0": 10,
    "M": 500,
    "test_mode": "uniform",
    "ladder": TABLE_LADDER,
    "r_range": (5, 200),
    "T_sim": 0.01,
    "c_bt": 10.0,
}
_DEFAULTS_6D = {
    "N_T": 6000,
    "k0": 60,
    "r0": 10,
    "M": 1000,
    "test_mode": "focused",
    "ladder": TABLE_LADDER,
    "r_range": (5, 300),
    "T_sim": 0.05,
    "c_bt": 20.0 / 6.0,
}

PROBLEMS = {
    "branin2d-gauss": lambda: SyntheticProblem(
        "branin2d-gauss", 2, branin_mod, GaussianNoise(1.0), dict(_DEFAULTS_2D, noise_mode="fixed", tau2=1.0)
    ),
    "branin2d-hetT": lambda: SyntheticProblem(
        "branin2d-hetT", 2, branin_mod, HetStudentT(), dict(_DEFAULTS_2D, noise_mode="fit", tau2=1.0)
    ),
    "hartman6": lambda: SyntheticProblem(
        "hartman6", 6, hartman6_mod, GaussianNoise(1.0), dict(_DEFAULTS_6D, noise_mode="fixed", tau2=1.0)
    ),
}


def get_problem(name: str) -> SyntheticProblem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


# -- macro-replication harness -------------------------------------------------------


def run_experiment(problem, settings_list, macro_reps: int, seed: int = 0, progress=None) -> list[dict]:
    """Run ``macro_reps`` independent runs for each scheme configuration.

    Parameters
    ----------
    problem : SyntheticProblem
    settings_list : list of RunSettings
        One entry per (scheme, metamodel) row.
    macro_reps : int
    seed : int
        Master seed; run ``j`` of every row uses run index ``j``, so all
        rows share the same initial designs and test sets.
    progress : callable, optional
        Called with each finished ``RunRecord``.

    Returns
    -------
    list of dict
        Rows with keys ``scheme, model, er_mean, er_sd, time, k_T`` plus the
        per-run values under ``er``, ``times`` and ``k``.
    """
    from .schemes import run_scheme

    rows = []
    for settings in settings_list:
        er, times, ks = [], [], []
        for j in range(macro_reps):
            rec = run_scheme(problem, settings, seed=seed, run=j)
            er.append(rec.summary["ER"])
            times.append(rec.summary["wall_seconds_nondet"])
            ks.append(rec.summary["k_T"])
            if progress is not None:
                progress(rec)
        rows.append(
            {
                "scheme": settings.scheme,
                "model": settings.metamodel,
                "er_mean": float(np.mean(er)),
                "er_sd": float(np.std(er, ddof=1)) if len(er) > 1 else 0.0,
                "time": float(np.mean(times)),
                "k_T": float(np.mean(ks)),
                "er": er,
                "times": times,
                "k": ks,
            }
        )
    return rows
