"""Acquisition criteria for contour finding and their optimizer.

All criteria are vectorized over rows of ``X`` (unit-cube coordinates) and
take a fitted model exposing ``predict`` and ``lookahead_sd_new``.  The
optional weight measure ``mu`` is a callable ``mu(X) -> (m,)``; ``None``
means the uniform measure (density one on the unit cube).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import iqr, qmc

__all__ = [
    "norm_cdf",
    "CostModel",
    "DEFAULT_THETA",
    "rho_weight",
    "local_error",
    "cucb",
    "gsur",
    "absur",
    "absur_numerator",
    "overhead_cost",
    "fit_overhead",
    "optimize_acquisition",
    "AcquisitionResult",
]

DEFAULT_THETA = (0.137, 8.15e-4, 1.99e-6)

Measure = Callable[[np.ndarray], np.ndarray]


def norm_cdf(z):
    """Standard normal CDF (Cephes ``ndtr``, accurate to ~1e-16)."""
    return ndtr(z)


def _mu(mu: Measure | None, X: np.ndarray) -> np.ndarray:
    if mu is None:
        return np.ones(X.shape[0])
    return np.asarray(mu(X), dtype=float).reshape(X.shape[0])


def _ratio(fhat, s):
    """|fhat| / s with s = 0 mapped to +inf (or 0 on the contour itself)."""
    a = np.abs(np.asarray(fhat, dtype=float))
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = a / s
    return np.where(s > 0, z, np.where(a > 0, np.inf, 0.0))


# -- cost model ---------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Simulation cost per call plus a quadratic metamodel overhead (seconds)."""

    T_sim: float = 0.01
    theta: tuple[float, float, float] = DEFAULT_THETA

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if len(self.theta) != 3:
            raise ValueError("theta needs three coefficients")
        if not self.T_sim > 0:
            raise ValueError("T_sim must be positive")

    def overhead(self, n) -> np.ndarray | float:
        t0, t1, t2 = self.theta
        return t0 + t1 * n + t2 * np.asarray(n, dtype=float) ** 2

    def check(self, n_max: int) -> None:
        """Raise if the overhead is not positive on ``0..n_max``."""
        if np.any(self.overhead(np.arange(n_max + 1)) <= 0):
            raise ValueError("overhead cost must be positive over the budget range")


def overhead_cost(n, cost: CostModel):
    return cost.overhead(n)


def fit_overhead(n, seconds) -> tuple[tuple[float, float, float], float]:
    """Least-squares quadratic fit of overhead times.

    Returns the coefficients and the R^2 of the fit.
    """
    n = np.asarray(n, dtype=float)
    t = np.asarray(seconds, dtype=float)
    A = np.vander(n, 3, increasing=True)
    theta, *_ = np.linalg.lstsq(A, t, rcond=None)
    resid = t - A @ theta
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return tuple(float(v) for v in theta), r2


# -- criteria ------------------------------------------------------------------


def rho_weight(fhat, s) -> float:
    """Exploration weight IQR(fhat) / (3 mean(s)); 1 when mean(s) is zero."""
    ms = float(np.mean(s))
    if ms <= 0:
        return 1.0
    return float(iqr(fhat)) / (3.0 * ms)


def local_error(fhat, s):
    """Local misclassification probability Phi(-|fhat|/s)."""
    return norm_cdf(-_ratio(fhat, s))


def cucb(X, model, rho: float, mu: Measure | None = None) -> np.ndarray:
    X = np.atleast_2d(X)
    fhat, s = model.predict(X)
    return (-np.abs(fhat) + rho * s) * _mu(mu, X)


def gsur(X, r, model, mu: Measure | None = None) -> np.ndarray:
    """Drop in local misclassification probability from ``r`` replicates at X."""
    X = np.atleast_2d(X)
    fhat, s = model.predict(X)
    s_next = model.lookahead_sd_new(X, r, sd=s)
    gain = local_error(fhat, s) - local_error(fhat, s_next)
    return np.maximum(gain, 0.0) * _mu(mu, X)


def absur_numerator(fhat, s, r, tau2):
    """gSUR gain written directly in terms of (fhat, s, r, tau^2)."""
    z = _ratio(fhat, s)
    s = np.asarray(s, dtype=float)
    with np.errstate(invalid="ignore"):
        z_next = z * np.sqrt(r * s**2 + tau2) / np.sqrt(tau2)
    z_next = np.where(np.isnan(z_next), 0.0, z_next)
    return np.maximum(norm_cdf(-z) - norm_cdf(-z_next), 0.0)


def absur(X, r, model, cost: CostModel, n: int, mu: Measure | None = None) -> np.ndarray:
    """gSUR gain per second of simulation plus metamodel overhead."""
    X = np.atleast_2d(X)
    r = np.asarray(r, dtype=float)
    fhat, s = model.predict(X)
    num = absur_numerator(fhat, s, r, model.lookahead_noise_variance(X))
    return num * _mu(mu, X) / (r * cost.T_sim + cost.overhead(n))


# -- optimizer --------------------------------------------------------------------


@dataclass(frozen=True)
class AcquisitionResult:
    x: np.ndarray
    value: float
    r: int | None = None
    screen_best: float = -np.inf


def _to_r(u, r_lo: int, r_hi: int):
    """Map [0, 1] log-uniformly onto [r_lo, r_hi]."""
    return np.exp(np.log(r_lo) + np.clip(u, 0, 1) * (np.log(r_hi) - np.log(r_lo)))


def optimize_acquisition(
    criterion: Callable,
    dim: int,
    rng: np.random.Generator,
    r_range: tuple[int, int] | None = None,
    n_candidates: int = 512,
    n_polish: int = 3,
    polish_iters: int = 200,
    feasible: Callable[[np.ndarray], np.ndarray] | None = None,
) -> AcquisitionResult:
    """Maximize ``criterion`` over the unit cube (optionally jointly with r).

    A scrambled Sobol screen of ``n_candidates`` points is followed by a
    bounded Nelder-Mead polish of the best ``n_polish`` candidates; the
    returned point is never worse than the best screened candidate.

    Parameters
    ----------
    criterion : callable
        ``criterion(X)`` or, with ``r_range``, ``criterion(X, r)`` returning
        one value per row.
    dim : int
        Input dimension.
    rng : numpy.random.Generator
        Source for the Sobol scrambling.
    r_range : (int, int), optional
        Integer replication range searched jointly with x.  The continuous
        relaxation is rounded, and both neighbouring integers are compared.
    feasible : callable, optional
        Boolean mask of admissible inputs; infeasible rows score ``-inf``.
    """
    if dim < 1:
        raise ValueError("domain must have positive dimension")
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    joint = r_range is not None
    if joint:
        r_lo, r_hi = int(r_range[0]), int(r_range[1])
        if not 1 <= r_lo <= r_hi:
            raise ValueError("replication range must satisfy 1 <= r_lo <= r_hi")

    def evaluate(Z, integer_r=True):
        Z = np.atleast_2d(Z)
        X = Z[:, :dim]
        if joint:
            r = _to_r(Z[:, dim], r_lo, r_hi)
            if integer_r:
                r = np.clip(np.rint(r), r_lo, r_hi)
            vals = np.asarray(criterion(X, r), dtype=float)
        else:
            vals = np.asarray(criterion(X), dtype=float)
        if feasible is not None:
            vals = np.where(feasible(X), vals, -np.inf)
        return np.where(np.isnan(vals), -np.inf, vals)

    zdim = dim + int(joint)
    sobol = qmc.Sobol(zdim, scramble=True, seed=rng)
    m = int(np.ceil(np.log2(n_candidates)))
    Z = sobol.random_base2(m)[:n_candidates]
    vals = evaluate(Z)
    order = np.argsort(-vals, kind="stable")
    best_z, best_v = Z[order[0]].copy(), float(vals[order[0]])
    screen_best = best_v

    bounds = [(0.0, 1.0)] * zdim
    for idx in order[:n_polish]:
        if not np.isfinite(vals[idx]):
            continue
        res = minimize(
            lambda z: -evaluate(z, integer_r=False)[0],
            Z[idx],
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-3, "fatol": 1e-12, "maxiter": polish_iters},
        )
        z = np.clip(res.x, 0.0, 1.0)
        if joint:
            r_cont = float(_to_r(z[dim], r_lo, r_hi))
            for r_int in {int(np.floor(r_cont)), int(np.ceil(r_cont))}:
                r_int = min(max(r_int, r_lo), r_hi)
                zz = z.copy()
                zz[dim] = np.log(r_int / r_lo) / np.log(r_hi / r_lo) if r_hi > r_lo else 0.0
                v = float(evaluate(zz)[0])
                if v > best_v:
                    best_z, best_v = zz, v
        else:
            v = float(evaluate(z)[0])
            if v > best_v:
                best_z, best_v = z, v

    x = best_z[:dim]
    r = None
    if joint:
        r = int(np.clip(np.rint(_to_r(best_z[dim], r_lo, r_hi)), r_lo, r_hi))
    return AcquisitionResult(x=x, value=best_v, r=r, screen_best=screen_best)
