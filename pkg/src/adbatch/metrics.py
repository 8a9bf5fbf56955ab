"""Test sets and level-set accuracy metrics.

A :class:`TestSet` is a quadrature rule for the weight measure mu:
``sum_j w_j g(x_j)`` approximates the integral of g against mu.  A point is
classified inside the level set when the (true or estimated) response is
strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .acquisition import norm_cdf

__all__ = [
    "TestSet",
    "BAND_HALF_WIDTH",
    "build_test_set",
    "error_rate",
    "credible_band_volume",
    "adsa_weights",
    "weighted_contour_uncertainty",
]

BAND_HALF_WIDTH = 0.7
FOCUS_SHARE = 0.8
MAX_REJECTION_DRAWS = 10**6
Z95 = 1.96


@dataclass(frozen=True)
class TestSet:
    __test__ = False  # not a pytest class

    points: np.ndarray
    weights: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.points.shape[0] == 0:
            raise ValueError("test set must be nonempty")
        if np.any(self.weights < 0):
            raise ValueError("test weights must be nonnegative")

    @property
    def M(self) -> int:
        return self.points.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def relative_weights(self) -> np.ndarray:
        """Weights rescaled to mean one (uniform test sets give all ones)."""
        return self.weights / self.weights.mean()


def _truth_or_none(problem, X):
    truth = getattr(problem, "truth", None)
    return None if truth is None else np.asarray(truth(X), dtype=float)


def build_test_set(problem, M: int, mode: str, rng: np.random.Generator) -> TestSet:
    """Test points and weights for ``problem`` on the unit cube.

    Parameters
    ----------
    problem
        Needs ``dim``; ``truth`` is required by the focused mode.  Problems
        with their own construction (e.g. sampling from a density) provide
        ``make_test_set(M, rng)``, which takes precedence.
    M : int
        Number of points.
    mode : {"uniform", "focused"}
        ``uniform``: Latin hypercube with equal weights 1/M.
        ``focused``: 80% of points drawn by rejection from the band
        ``|f| < 0.7`` and 20% from its complement, each group weighted by
        its Monte Carlo volume divided by its point count.
    rng : numpy.random.Generator
    """
    if M < 1:
        raise ValueError("M must be positive")
    if hasattr(problem, "make_test_set"):
        return problem.make_test_set(M, rng)
    d = problem.dim
    if mode == "uniform":
        X = qmc.LatinHypercube(d, seed=rng).random(M)
        return TestSet(X, np.full(M, 1.0 / M), _truth_or_none(problem, X))
    if mode != "focused":
        raise ValueError(f"unknown test-set mode {mode!r}")

    m_band = int(round(FOCUS_SHARE * M))
    m_out = M - m_band
    band, out = [], []
    n_band = n_out = n_drawn = 0
    chunk = max(4 * M, 10_000)
    while (n_band < m_band or n_out < m_out) and n_drawn < MAX_REJECTION_DRAWS:
        X = rng.random((min(chunk, MAX_REJECTION_DRAWS - n_drawn), d))
        inside = np.abs(problem.truth(X)) < BAND_HALF_WIDTH
        band.append(X[inside])
        out.append(X[~inside])
        n_band += int(inside.sum())
        n_out += int((~inside).sum())
        n_drawn += X.shape[0]
    if n_band < m_band:
        raise RuntimeError("focused band is empty or too small for rejection sampling")
    vol_band = n_band / n_drawn
    Xb = np.concatenate(band)[:m_band]
    Xo = np.concatenate(out)[:m_out] if n_out else np.zeros((0, d))
    if Xo.shape[0] < m_out:
        # Complement too small to fill its quota; give its share to the band.
        Xb = np.concatenate(band)[: M - Xo.shape[0]]
    wb = np.full(Xb.shape[0], vol_band / Xb.shape[0])
    wo = np.full(Xo.shape[0], (1.0 - vol_band) / Xo.shape[0]) if Xo.shape[0] else np.zeros(0)
    X = np.vstack([Xb, Xo])
    return TestSet(X, np.concatenate([wb, wo]), _truth_or_none(problem, X))


def _fhat(pred, X) -> np.ndarray:
    if hasattr(pred, "predict_mean"):
        return pred.predict_mean(X)
    if callable(pred):
        return np.asarray(pred(X), dtype=float)
    return np.asarray(pred, dtype=float)


def error_rate(pred, test: TestSet) -> float:
    """Weighted volume where the estimated and true level sets disagree.

    ``pred`` is a model, a callable ``X -> fhat`` or precomputed ``fhat``.
    """
    if test.truth is None:
        raise ValueError("error rate needs truth values on the test set")
    fhat = _fhat(pred, test.points)
    return float(test.weights @ ((fhat > 0) != (test.truth > 0)))


def credible_band_volume(model, test: TestSet, fhat=None, sd=None) -> float:
    """Weighted volume where the 95% credible band straddles zero."""
    if fhat is None or sd is None:
        fhat, sd = model.predict(test.points)
    ambiguous = (fhat + Z95 * sd) * (fhat - Z95 * sd) < 0
    return float(test.weights @ ambiguous)


def adsa_weights(fhat, s, mu=None) -> np.ndarray:
    """omega_j = Phi(-fhat_j / s_j) mu_j with the signed posterior mean."""
    fhat = np.asarray(fhat, dtype=float)
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, -fhat / s, np.where(fhat > 0, -np.inf, np.where(fhat < 0, np.inf, 0.0)))
    mu = np.ones_like(fhat) if mu is None else np.asarray(mu, dtype=float)
    return norm_cdf(z) * mu


def weighted_contour_uncertainty(model, test: TestSet) -> float:
    fhat, s = model.predict(test.points)
    return float(adsa_weights(fhat, s, test.relative_weights()) @ fhat)
