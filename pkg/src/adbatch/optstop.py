"""Bermudan option pricing by regression Monte Carlo on timing functions.

At each exercise date t the timing function ``f(t, z) = h(t, z) - C(t, z)``
compares immediate payoff with the pathwise continuation value obtained by
following the already-fitted policy at later dates.  Its sign is learned
with any sequential design scheme, backwards from the last date before
maturity; the holder stops at the first date where the surrogate predicts
``f > 0``.

Surrogates work on the unit cube; each date maps it affinely onto a box of
+-4 log-standard deviations around the mean of log Z_t, and only the
in-the-money part of the box is sampled.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, qmc

from .metrics import TestSet
from .rng import stream
from .schemes import RunRecord, RunSettings, run_scheme

__all__ = [
    "GBMParams",
    "BasketPut",
    "MaxCall",
    "gbm_step",
    "simulate_paths",
    "DateProblem",
    "StoppingPolicy",
    "timing_draws",
    "fit_policy",
    "policy_value",
    "european_value",
    "PUT2D",
    "CALL3D",
]

BOX_LOG_SDS = 4.0


@dataclass(frozen=True)
class GBMParams:
    """Independent-asset geometric Brownian motion with exercise grid.

    ``cov`` defaults to ``sigma^2 I``; ``delta`` is a continuous dividend
    yield (zero unless set).
    """

    dim: int
    rate: float
    sigma: float
    dt: float
    T: float
    z0: tuple[float, ...]
    delta: float = 0.0
    cov: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "z0", tuple(float(v) for v in np.broadcast_to(self.z0, (self.dim,))))
        if min(self.z0) <= 0:
            raise ValueError("initial state must be positive")
        n = self.T / self.dt
        if self.dt <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("T / dt must be a positive integer")
        if self.cov is not None:
            C = np.asarray(self.cov, dtype=float)
            if C.shape != (self.dim, self.dim) or not np.allclose(C, C.T):
                raise ValueError("covariance must be a symmetric d x d matrix")
            if np.linalg.eigvalsh(C).min() < -1e-12:
                raise ValueError("covariance must be positive semidefinite")
            object.__setattr__(self, "cov", tuple(map(tuple, C)))

    @property
    def n_dates(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def cov_matrix(self) -> np.ndarray:
        if self.cov is None:
            return self.sigma**2 * np.eye(self.dim)
        return np.asarray(self.cov, dtype=float)

    @property
    def chol(self) -> np.ndarray:
        C = self.cov_matrix
        if not np.any(C):
            return np.zeros_like(C)  # degenerate deterministic mode
        return np.linalg.cholesky(C)

    def drift(self) -> np.ndarray:
        return (self.rate - self.delta - 0.5 * np.diag(self.cov_matrix)) * self.dt

    def log_moments(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean and sd of log Z_t given Z_0 = z0."""
        var = np.diag(self.cov_matrix) * t
        mean = np.log(self.z0) + (self.rate - self.delta - 0.5 * np.diag(self.cov_matrix)) * t
        return mean, np.sqrt(var)


def gbm_step(z, params: GBMParams, w) -> np.ndarray:
    """Advance states ``z`` (rows) one exercise period using normals ``w``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return z * np.exp(params.drift() + math.sqrt(params.dt) * w @ params.chol.T)


def simulate_paths(params: GBMParams, n_paths: int, rng: np.random.Generator, z_start=None, steps=None):
    """Array ``(steps + 1, n_paths, dim)`` of GBM states on the exercise grid."""
    steps = params.n_dates if steps is None else steps
    z = np.broadcast_to(np.asarray(params.z0 if z_start is None else z_start, dtype=float), (n_paths, params.dim))
    out = np.empty((steps + 1, n_paths, params.dim))
    out[0] = z
    for j in range(steps):
        out[j + 1] = gbm_step(out[j], params, rng.standard_normal((n_paths, params.dim)))
    return out


# -- payoffs --------------------------------------------------------------------


@dataclass(frozen=True)
class BasketPut:
    """Put on the basket average (or, with ``form="sum"``, the plain sum)."""

    K: float
    form: str = "average"

    def intrinsic(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        s = z.mean(axis=1) if self.form == "average" else z.sum(axis=1)
        return np.maximum(self.K - s, 0.0)

    def __call__(self, t, z, rate) -> np.ndarray:
        return math.exp(-rate * t) * self.intrinsic(z)


@dataclass(frozen=True)
class MaxCall:
    K: float

    def intrinsic(self, z) -> np.ndarray:
        return np.maximum(np.atleast_2d(z).max(axis=1) - self.K, 0.0)

    def __call__(self, t, z, rate) -> np.ndarray:
        return math.exp(-rate * t) * self.intrinsic(z)


# -- policy ------------------------------------------------------------------------


@dataclass
class StoppingPolicy:
    """Fitted exercise rule: one surrogate per date ``dt, 2 dt, ..., T - dt``.

    ``models[j]`` belongs to date index ``j + 1``; ``None`` means "never
    stop early at that date".
    """

    params: GBMParams
    payoff: object
    scale: float
    models: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @classmethod
    def stop_at_maturity(cls, params, payoff, scale=1.0) -> "StoppingPolicy":
        J = params.n_dates - 1
        return cls(params, payoff, scale, [None] * J, [date_box(params, j + 1) for j in range(J)])

    def exercise(self, j: int, z) -> np.ndarray:
        """Boolean stop decision at date index ``j`` (1 <= j < n_dates)."""
        z = np.atleast_2d(z)
        itm = self.payoff.intrinsic(z) > 0
        model = self.models[j - 1]
        if model is None or not itm.any():
            return np.zeros(z.shape[0], dtype=bool)
        lo, hi = self.boxes[j - 1]
        u = (z - lo) / (hi - lo)
        inside = itm & np.all((u >= 0) & (u <= 1), axis=1)
        stop = np.zeros(z.shape[0], dtype=bool)
        if inside.any():
            stop[inside] = model.predict_mean(u[inside]) > 0
        return stop


def date_box(params: GBMParams, j: int) -> tuple[np.ndarray, np.ndarray]:
    mean, sd = params.log_moments(j * params.dt)
    return np.exp(mean - BOX_LOG_SDS * sd), np.exp(mean + BOX_LOG_SDS * sd)


def timing_draws(policy: StoppingPolicy, j: int, z, count: int, rng: np.random.Generator) -> np.ndarray:
    """Noisy samples of the timing function at date index ``j`` and state z.

    Each sample follows one fresh path from ``z``, applying the fitted rule
    at dates ``j+1, ..., n_dates-1`` and exercising at maturity if in the
    money, and returns ``h(t_j, z) - h(tau, Z_tau)`` divided by the policy's
    response scale.
    """
    p = policy.params
    J = p.n_dates
    if j >= J or j < 1:
        raise ValueError("timing draws are defined for dates strictly before maturity")
    if any(policy.models[i - 1] is None for i in range(j + 1, J)) and policy.records:
        raise RuntimeError("later-date policy has not been fitted")
    z = np.broadcast_to(np.asarray(z, dtype=float).reshape(1, -1), (count, p.dim)).copy()
    h_now = policy.payoff(j * p.dt, z[:1], p.rate)[0]
    cont = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    for i in range(j + 1, J + 1):
        idx = np.nonzero(alive)[0]
        z[idx] = gbm_step(z[idx], p, rng.standard_normal((idx.size, p.dim)))
        if i == J:
            cont[idx] = policy.payoff(i * p.dt, z[idx], p.rate)
            break
        stop = policy.exercise(i, z[idx])
        cont[idx[stop]] = policy.payoff(i * p.dt, z[idx[stop]], p.rate)
        alive[idx[stop]] = False
        if not alive.any():
            break
    return (h_now - cont) / policy.scale


class DateProblem:
    """Timing-function simulator at one exercise date, on the unit cube."""

    def __init__(self, policy: StoppingPolicy, j: int):
        self.policy = policy
        self.j = j
        self.dim = policy.params.dim
        self.lo, self.hi = policy.boxes[j - 1]
        self.name = f"timing-date-{j}"
        mean, sd = policy.params.log_moments(j * policy.params.dt)
        self._log_mean, self._log_sd = mean, sd

    def to_state(self, X) -> np.ndarray:
        return self.lo + np.atleast_2d(X) * (self.hi - self.lo)

    def feasible(self, X) -> np.ndarray:
        return self.policy.payoff.intrinsic(self.to_state(X)) > 0

    def mu(self, X) -> np.ndarray:
        """Log-normal density of Z_t on the in-the-money set, peak-normalized."""
        z = self.to_state(X)
        zl = np.log(z)
        logpdf = norm.logpdf(zl, self._log_mean, self._log_sd).sum(axis=1) - zl.sum(axis=1)
        mode = np.exp(self._log_mean - self._log_sd**2)
        peak = (norm.logpdf(np.log(mode), self._log_mean, self._log_sd) - np.log(mode)).sum()
        return np.exp(logpdf - peak) * self.feasible(X)

    def simulate(self, x, count, rng) -> np.ndarray:
        return timing_draws(self.policy, self.j, self.to_state(x)[0], count, rng)

    def initial_design(self, k0: int, rng) -> np.ndarray:
        """Space-filling points of the box, keeping only in-the-money ones."""
        kept = []
        n = 0
        sampler = qmc.Sobol(self.dim, scramble=True, seed=rng)
        while n < k0:
            U = sampler.random_base2(max(6, math.ceil(math.log2(4 * k0))))
            U = U[self.feasible(U)]
            kept.append(U)
            n += U.shape[0]
        return np.concatenate(kept)[:k0]

    def make_test_set(self, M: int, rng) -> TestSet:
        """States drawn from Z_t | z0, restricted to the in-the-money box."""
        pts = []
        n = 0
        p = self.policy.params
        while n < M:
            lz = self._log_mean + self._log_sd * rng.standard_normal((4 * M, self.dim))
            U = (np.exp(lz) - self.lo) / (self.hi - self.lo)
            ok = np.all((U >= 0) & (U <= 1), axis=1)
            U = U[ok]
            U = U[self.feasible(U)]
            pts.append(U)
            n += U.shape[0]
        X = np.concatenate(pts)[:M]
        return TestSet(X, np.full(M, 1.0 / M), None)


# -- fitting and valuation -----------------------------------------------------------


def fit_policy(
    params: GBMParams,
    payoff,
    settings: RunSettings,
    seed: int = 0,
    run: int = 0,
    scale: float | None = None,
    progress=None,
) -> StoppingPolicy:
    """Backward induction over exercise dates with one design run per date.

    ``scale`` divides the timing values so they sit within the default
    hyperparameter bounds; it defaults to ``0.1 * K``.
    """
    scale = 0.1 * payoff.K if scale is None else scale
    J = params.n_dates
    policy = StoppingPolicy.stop_at_maturity(params, payoff, scale)
    policy.records = [None] * (J - 1)
    for j in range(J - 1, 0, -1):
        prob = DateProblem(policy, j)
        rec = run_scheme(prob, settings, seed=seed, run=run * 1000 + j)
        policy.models[j - 1] = rec.model
        rec.model = None
        policy.records[j - 1] = rec
        if progress is not None:
            progress(j, rec)
    return policy


def policy_value(policy: StoppingPolicy, n_paths: int = 100_000, seed: int = 0, chunk: int = 25_000) -> tuple[float, float]:
    """Out-of-sample value of ``policy`` from ``n_paths`` forward paths.

    Returns the mean discounted payoff at the first exercise date (or at
    maturity) and its standard error.
    """
    p = policy.params
    rng = stream(seed, 0, 0, "valuation")
    payoffs = []
    for start in range(0, n_paths, chunk):
        n = min(chunk, n_paths - start)
        paths = simulate_paths(p, n, rng)
        pay = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        for j in range(1, p.n_dates):
            idx = np.nonzero(alive)[0]
            stop = policy.exercise(j, paths[j, idx])
            pay[idx[stop]] = policy.payoff(j * p.dt, paths[j, idx[stop]], p.rate)
            alive[idx[stop]] = False
        idx = np.nonzero(alive)[0]
        pay[idx] = policy.payoff(p.T, paths[-1, idx], p.rate)
        payoffs.append(pay)
    pay = np.concatenate(payoffs)
    return float(pay.mean()), float(pay.std(ddof=1) / math.sqrt(pay.size))


def european_value(params: GBMParams, payoff, n_paths: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Plain Monte Carlo of e^{-rT} h(Z_T), sampling Z_T in one step."""
    rng = stream(seed, 0, 0, "european")
    mean, sd = params.log_moments(params.T)
    z = np.exp(mean + sd * rng.standard_normal((n_paths, params.dim)))
    pay = payoff(params.T, z, params.rate)
    return float(pay.mean()), float(pay.std(ddof=1) / math.sqrt(n_paths))


# -- canonical configurations -----------------------------------------------------------

PUT2D = {
    "params": GBMParams(dim=2, rate=0.06, sigma=0.2, dt=0.04, T=1.0, z0=(40.0, 40.0)),
    "payoff": BasketPut(40.0),
    "settings": dict(
        N_T=2000,
        k0=20,
        r0=20,
        ladder=(20, 30, 40, 50, 60, 80, 120, 160),
        r_range=(20, 160),
        T_sim=0.01,
        c_bt=10.0,
        refit_every=10,
        noise_mode="fit",
        M=500,
    ),
}

CALL3D = {
    "params": GBMParams(dim=3, rate=0.05, sigma=0.2, dt=1 / 3, T=3.0, z0=(90.0, 90.0, 90.0), delta=0.1),
    "payoff": MaxCall(100.0),
    "settings": dict(
        N_T=30000,
        k0=300,
        r0=30,
        ladder=(20, 30, 40, 50, 80, 160, 240, 320, 480, 640),
        r_range=(20, 640),
        T_sim=0.01,
        c_bt=20.0 / 3.0,
        refit_every=10,
        noise_mode="fit",
        M=1000,
    ),
}


def canonical_settings(config: dict, **overrides) -> RunSettings:
    return RunSettings(**dict(config["settings"], **overrides))
