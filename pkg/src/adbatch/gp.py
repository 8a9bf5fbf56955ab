"""Gaussian-process regression over replicated ("unique-n") designs.

A design stores k unique inputs, their replicate counts and the batch means
of the outputs.  With a zero prior mean and noise variance tau^2(x), the
batch mean at x_i has noise variance tau^2(x_i)/r_i, so the GP only ever
factorizes a k x k matrix no matter how many simulator calls were made.

Inputs are assumed to live in the unit cube; callers with physical domains
map into [0, 1]^d first (see :mod:`adbatch.schemes`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

__all__ = [
    "FactorizationError",
    "KernelParams",
    "Homoskedastic",
    "HeteroskedasticKnown",
    "ReplicatedDesign",
    "GPModel",
    "HyperFit",
    "DEFAULT_BOUNDS",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit_hyperparameters",
]

MERGE_TOL = 1e-9
JITTER_START = 1e-8
JITTER_MAX = 1e-4
NEG_VAR_TOL = 1e-10

DEFAULT_BOUNDS = {
    "lengthscale": (1e-2, 10.0),
    "variance": (1e-4, 1e2),
    "tau2": (1e-6, 1e2),
}


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix stayed indefinite after the largest jitter."""


# -- kernel -------------------------------------------------------------------


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel hyperparameters.

    ``lengthscales`` are in (normalized) input units, ``variance`` is the
    signal variance sigma_se^2 in squared output units.
    """

    lengthscales: tuple[float, ...]
    variance: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        vals = np.array(ls + (self.variance,))
        if len(ls) == 0 or not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ValueError(f"kernel parameters must be positive and finite: {self}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    @property
    def ls(self) -> np.ndarray:
        return np.asarray(self.lengthscales)


def kernel_matrix(A, B, params: KernelParams) -> np.ndarray:
    """Cross-covariance matrix ``K(A, B)`` for row-stacked inputs."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    d2 = cdist(A / params.ls, B / params.ls, "sqeuclidean")
    return params.variance * np.exp(-0.5 * d2)


def kernel_eval(a, b, params: KernelParams) -> float:
    """Evaluate the squared-exponential kernel at a single pair of inputs."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kernel inputs must be finite")
    if a.shape != b.shape or a.size != params.dim:
        raise ValueError("input dimension does not match the lengthscales")
    z = (a - b) / params.ls
    return params.variance * math.exp(-0.5 * float(z @ z))


# -- noise ----------------------------------------------------------------------


@dataclass(frozen=True)
class Homoskedastic:
    tau2: float

    def __post_init__(self):
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise ValueError("tau2 must be positive")

    def variance(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.full(X.shape[0], float(self.tau2))


@dataclass(frozen=True)
class HeteroskedasticKnown:
    """Known input-dependent noise variance ``tau2_fn(X) -> (m,)``."""

    tau2_fn: Callable[[np.ndarray], np.ndarray]

    def variance(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if X.shape[0] == 0:
            return np.zeros(0)
        v = np.asarray(self.tau2_fn(X), dtype=float).reshape(X.shape[0])
        if not np.all(np.isfinite(v) & (v > 0)):
            raise ValueError("heteroskedastic noise variance must be strictly positive")
        return v


NoiseModel = Homoskedastic | HeteroskedasticKnown


# -- design ---------------------------------------------------------------------


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ReplicatedDesign:
    """Unique inputs with replicate counts and batch means.

    Instances are immutable; ``append`` and ``add_replicates`` return new
    designs.
    """

    X: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    merge_tol: float = field(default=MERGE_TOL, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        counts = np.array(self.counts, dtype=np.int64).ravel()
        means = np.array(self.means, dtype=float).ravel()
        if X.shape[0] != counts.size or counts.size != means.size:
            raise ValueError("inputs, counts and means must have equal length")
        if np.any(counts < 1):
            raise ValueError("replicate counts must be >= 1")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(means))):
            raise ValueError("design entries must be finite")
        if X.shape[0] > 1:
            d = cdist(X, X)
            np.fill_diagonal(d, np.inf)
            if d.min() < self.merge_tol:
                raise ValueError("design inputs must be pairwise distinct")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "counts", _readonly(counts))
        object.__setattr__(self, "means", _readonly(means))

    @classmethod
    def empty(cls, dim: int) -> "ReplicatedDesign":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_raw(cls, X, y, merge_tol: float = MERGE_TOL) -> "ReplicatedDesign":
        """Collapse raw (input, output) pairs into unique inputs with means."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        design = cls.empty(X.shape[1])
        for x, yy in zip(X, y):
            i = design.find(x)
            if i is None:
                design = design.append(x, 1, yy)
            else:
                design = design.add_replicates(i, [yy])
        return design

    @property
    def k(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    def find(self, x) -> int | None:
        """Index of the design input within merge tolerance of ``x``."""
        if self.k == 0:
            return None
        dist = np.linalg.norm(self.X - np.asarray(x, dtype=float), axis=1)
        i = int(np.argmin(dist))
        return i if dist[i] < self.merge_tol else None

    def append(self, x, r: int, ybar: float) -> "ReplicatedDesign":
        x = np.asarray(x, dtype=float).ravel()
        i = self.find(x)
        if i is not None:
            warnings.warn("appended input duplicates an existing design point; merging")
            return self._merge(i, int(r), float(ybar) * int(r))
        return ReplicatedDesign(
            np.vstack([self.X, x[None, :]]),
            np.append(self.counts, int(r)),
            np.append(self.means, float(ybar)),
            self.merge_tol,
        )

    def add_replicates(self, i: int, y_new) -> "ReplicatedDesign":
        """Fold new raw outputs at design point ``i`` into its running mean."""
        y_new = np.asarray(y_new, dtype=float).ravel()
        if not 0 <= i < self.k:
            raise IndexError(f"design index {i} out of range")
        if y_new.size == 0:
            return self
        return self._merge(i, y_new.size, float(y_new.sum()))

    def _merge(self, i: int, dr: int, y_sum: float) -> "ReplicatedDesign":
        counts = self.counts.copy()
        means = self.means.copy()
        means[i] = (means[i] * counts[i] + y_sum) / (counts[i] + dr)
        counts[i] += dr
        return ReplicatedDesign(self.X, counts, means, self.merge_tol)


# -- linear algebra helpers -------------------------------------------------------


def _chol_with_jitter(S: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``S``, adding diagonal jitter only if needed.

    The noise term already makes ``S`` positive definite in exact
    arithmetic, so the plain factorization is tried first; on failure the
    jitter starts at ``JITTER_START * scale`` and grows tenfold.
    """
    jitter = 0.0
    while True:
        try:
            L = cholesky(S + jitter * scale * np.eye(S.shape[0]), lower=True, check_finite=False)
            return L, jitter * scale
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise FactorizationError("covariance matrix is not positive definite") from None


def clamp_variance(v, scale: float = 1.0) -> np.ndarray:
    """Zero out round-off negatives; reject genuinely negative variances."""
    v = np.asarray(v, dtype=float)
    tol = NEG_VAR_TOL * max(1.0, scale)
    if np.any(v < -tol):
        raise FactorizationError(f"negative posterior variance {v.min():.3e}")
    return np.maximum(v, 0.0)


# -- the model --------------------------------------------------------------------


class GPModel:
    """Fitted GP over a replicated design with a cached Cholesky factor.

    The model is immutable; mutating operations return a new model.
    """

    __slots__ = ("design", "kernel", "noise", "_L", "_alpha", "_jitter", "_noise_diag")

    def __init__(self, design: ReplicatedDesign, kernel: KernelParams, noise: NoiseModel):
        if design.k and design.dim != kernel.dim:
            raise ValueError("design dimension does not match the kernel")
        self.design = design
        self.kernel = kernel
        self.noise = noise
        if design.k:
            self._noise_diag = noise.variance(design.X) / design.counts
            S = kernel_matrix(design.X, design.X, kernel) + np.diag(self._noise_diag)
            self._L, self._jitter = _chol_with_jitter(S, kernel.variance)
            self._alpha = cho_solve((self._L, True), design.means)
        else:
            self._noise_diag = np.zeros(0)
            self._L = np.zeros((0, 0))
            self._alpha = np.zeros(0)
            self._jitter = 0.0

    def __repr__(self):
        return f"GPModel(k={self.design.k}, N={self.design.N}, kernel={self.kernel}, noise={self.noise})"

    # basic posterior

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def noise_variance(self, X) -> np.ndarray:
        """tau^2(x) for a single simulator call at each row of ``X``."""
        return self.noise.variance(np.atleast_2d(X))

    def lookahead_noise_variance(self, X) -> np.ndarray:
        """Per-call noise variance used by the look-ahead formulas."""
        return self.noise_variance(X)

    def _solve_L(self, Ks: np.ndarray) -> np.ndarray:
        return solve_triangular(self._L, Ks.T, lower=True, check_finite=False)

    def _sigma_inv(self, B: np.ndarray) -> np.ndarray:
        return cho_solve((self._L, True), B, check_finite=False)

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at each row of ``Xs``."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        prior = np.full(Xs.shape[0], self.kernel.variance)
        if self.design.k == 0:
            return np.zeros(Xs.shape[0]), np.sqrt(prior)
        Ks = kernel_matrix(Xs, self.design.X, self.kernel)
        mean = Ks @ self._alpha
        V = self._solve_L(Ks)
        var = clamp_variance(prior - np.einsum("ij,ij->j", V, V), self.kernel.variance)
        return mean, np.sqrt(var)

    def predict_mean(self, Xs) -> np.ndarray:
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if self.design.k == 0:
            return np.zeros(Xs.shape[0])
        return kernel_matrix(Xs, self.design.X, self.kernel) @ self._alpha

    def posterior(self, x) -> tuple[float, float]:
        m, s = self.predict(np.asarray(x, dtype=float).reshape(1, -1))
        return float(m[0]), float(s[0])

    def posterior_cov(self, A, B) -> np.ndarray:
        """Posterior covariance matrix v(A, B)."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        prior = kernel_matrix(A, B, self.kernel)
        if self.design.k == 0:
            return prior
        VA = self._solve_L(kernel_matrix(A, self.design.X, self.kernel))
        VB = self._solve_L(kernel_matrix(B, self.design.X, self.kernel))
        return prior - VA.T @ VB

    def log_marginal_likelihood(self) -> float:
        if self.design.k == 0:
            return 0.0
        y = self.design.means
        return float(
            -0.5 * y @ self._alpha
            - np.log(np.diag(self._L)).sum()
            - 0.5 * self.design.k * math.log(2 * math.pi)
        )

    # look-ahead variances

    def lookahead_sd_new(self, X, r, sd=None) -> np.ndarray:
        """Posterior sd at ``X`` after adding ``r`` replicates there.

        ``sd`` may pass in the current posterior sd to skip recomputing it.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.asarray(r, dtype=float)
        if np.any(r < 1):
            raise ValueError("replicate count must be >= 1")
        if sd is None:
            _, sd = self.predict(X)
        s2 = np.asarray(sd) ** 2
        nv = self.lookahead_noise_variance(X) / r
        return np.sqrt(s2 * nv / (nv + s2))

    def lookahead_var_at_test_new(self, x_new, dr: int, Xs) -> np.ndarray:
        """Variance at ``Xs`` after ``dr`` replicates at a new input ``x_new``."""
        if dr < 1:
            raise ValueError("dr must be >= 1")
        x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        _, s_test = self.predict(Xs)
        _, s_new = self.predict(x_new)
        v = self.posterior_cov(Xs, x_new)[:, 0]
        denom = self.noise_variance(x_new)[0] / dr + s_new[0] ** 2
        return clamp_variance(s_test**2 - v**2 / denom, self.kernel.variance)

    def lookahead_var_realloc(self, dr, Xs) -> np.ndarray:
        """First-order (Woodbury) variance at ``Xs`` after adding ``dr[i]``
        replicates to each existing design point.

        The dropped second-order term is positive semidefinite, so this never
        undershoots the exact updated variance.
        """
        dr = np.asarray(dr, dtype=np.int64).ravel()
        if dr.size != self.design.k:
            raise ValueError("need one increment per design point")
        if np.any(dr < 0):
            raise ValueError("increments must be nonnegative")
        r = self.design.counts
        if np.any(r > np.iinfo(np.int64).max - dr):
            raise ValueError("replicate count overflow")
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        _, s = self.predict(Xs)
        if self.design.k == 0:
            return s**2
        delta_R = 1.0 / r - 1.0 / (r + dr)
        W = self._sigma_inv(kernel_matrix(Xs, self.design.X, self.kernel).T)
        tau2 = self.noise_variance(self.design.X)
        reduction = ((tau2 * delta_R)[:, None] * W**2).sum(axis=0)
        return clamp_variance(s**2 - reduction, self.kernel.variance)

    def allocation_vector(self, omega, Xs) -> np.ndarray:
        """U = Sigma^{-1} K_*^T omega over the design points."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = kernel_matrix(Xs, self.design.X, self.kernel)
        return self._sigma_inv(Ks.T @ np.asarray(omega, dtype=float))

    def allocation_noise_scale(self) -> np.ndarray:
        """Per-input factor multiplying U in the allocation target."""
        return self.noise_variance(self.design.X)

    # updates

    def with_design(self, design: ReplicatedDesign) -> "GPModel":
        return GPModel(design, self.kernel, self.noise)

    def with_hyperparameters(self, kernel: KernelParams, noise: NoiseModel) -> "GPModel":
        return GPModel(self.design, kernel, noise)

    def append(self, x, r: int, ybar: float) -> "GPModel":
        return self.with_design(self.design.append(x, r, ybar))

    def add_replicates(self, i: int, y_new) -> "GPModel":
        if len(np.atleast_1d(y_new)) == 0:
            return self
        return self.with_design(self.design.add_replicates(i, y_new))


# -- likelihood and fitting ---------------------------------------------------


def log_marginal_likelihood(design: ReplicatedDesign, kernel: KernelParams, noise: NoiseModel) -> float:
    """Gaussian log marginal likelihood of the batch means."""
    return GPModel(design, kernel, noise).log_marginal_likelihood()


class HyperFit(NamedTuple):
    kernel: KernelParams
    noise: NoiseModel
    log_likelihood: float
    success: bool


def _lml_and_grad(theta, X, y, counts, sqdiff, noise_fixed, fit_noise):
    """Negative LML and its gradient in log-parameters.

    theta = [log l_1..log l_d, log sigma2, (log tau2)].
    """
    d = X.shape[1]
    ls = np.exp(theta[:d])
    sigma2 = math.exp(theta[d])
    k = len(y)
    D = sqdiff / ls[:, None, None] ** 2
    C = np.exp(-0.5 * D.sum(axis=0))
    if fit_noise:
        noise_diag = math.exp(theta[d + 1]) / counts
    else:
        noise_diag = noise_fixed
    try:
        L, jitter = _chol_with_jitter(sigma2 * C + np.diag(noise_diag), sigma2)
    except FactorizationError:
        return np.inf, np.zeros_like(theta)
    alpha = cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * k * math.log(2 * math.pi)
    Sinv = cho_solve((L, True), np.eye(k), check_finite=False)
    Q = np.outer(alpha, alpha) - Sinv
    K = sigma2 * C
    grad = np.empty_like(theta)
    QK = Q * K
    for m in range(d):
        grad[m] = 0.5 * np.sum(QK * D[m])
    grad[d] = 0.5 * (np.sum(QK) + jitter * np.trace(Q))
    if fit_noise:
        grad[d + 1] = 0.5 * np.sum(np.diag(Q) * noise_diag)
    return -lml, -grad


def fit_hyperparameters(
    design: ReplicatedDesign,
    noise: NoiseModel,
    noise_mode: str = "fixed",
    bounds: dict | None = None,
    n_starts: int = 5,
    rng: np.random.Generator | None = None,
    init: KernelParams | None = None,
) -> HyperFit:
    """Maximize the batch-mean marginal likelihood by multi-start L-BFGS-B.

    Parameters
    ----------
    design : ReplicatedDesign
        Training data; needs at least two unique inputs.
    noise : NoiseModel
        Fixed noise model, or the starting value when ``noise_mode="fit"``.
    noise_mode : {"fixed", "fit"}
        ``"fit"`` estimates a constant tau^2 jointly with the kernel.
    bounds : dict, optional
        Overrides for ``DEFAULT_BOUNDS``.
    n_starts : int
        Number of local searches.  When ``init`` is given it seeds the first
        one; the rest start from log-uniform random points.
    rng : numpy.random.Generator, optional
    init : KernelParams, optional
        Warm start (typically the previous fit).

    Returns
    -------
    HyperFit
        Best parameters found.  If every start fails the starting
        parameters are returned with ``success=False``.
    """
    if design.k < 2:
        raise ValueError("hyperparameter fitting needs at least two design points")
    if noise_mode not in ("fixed", "fit"):
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    fit_noise = noise_mode == "fit"
    if fit_noise and not isinstance(noise, Homoskedastic):
        raise ValueError("only a constant noise variance can be fitted")
    b = dict(DEFAULT_BOUNDS)
    if bounds:
        b.update(bounds)
    rng = rng if rng is not None else np.random.default_rng(0)
    d = design.dim
    log_bounds = [tuple(np.log(b["lengthscale"]))] * d + [tuple(np.log(b["variance"]))]
    if fit_noise:
        log_bounds.append(tuple(np.log(b["tau2"])))
    lo = np.array([v[0] for v in log_bounds])
    hi = np.array([v[1] for v in log_bounds])

    if init is None:
        init = KernelParams(
            np.clip(np.full(d, 0.3), *b["lengthscale"]),
            float(np.clip(np.var(design.means) or 1.0, *b["variance"])),
        )
    theta0 = np.log(np.append(init.ls, init.variance))
    if fit_noise:
        theta0 = np.append(theta0, math.log(noise.tau2))
    theta0 = np.clip(theta0, lo, hi)

    X = design.X
    sqdiff = (X.T[:, :, None] - X.T[:, None, :]) ** 2
    noise_fixed = None if fit_noise else noise.variance(X) / design.counts
    args = (X, design.means, design.counts.astype(float), sqdiff, noise_fixed, fit_noise)

    starts = [theta0] + [rng.uniform(lo, hi) for _ in range(max(n_starts, 1) - 1)]
    best_val, best_theta = np.inf, None
    for t0 in starts:
        try:
            res = minimize(_lml_and_grad, t0, args=args, jac=True, method="L-BFGS-B", bounds=log_bounds)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_theta = res.fun, np.clip(res.x, lo, hi)

    if best_theta is None:
        warnings.warn("all hyperparameter searches failed; keeping previous values")
        return HyperFit(init, noise, -np.inf, False)
    p = np.exp(best_theta)
    kernel = KernelParams(np.clip(p[:d], *b["lengthscale"]), float(np.clip(p[d], *b["variance"])))
    new_noise = Homoskedastic(float(np.clip(p[d + 1], *b["tau2"]))) if fit_noise else noise
    return HyperFit(kernel, new_noise, -float(best_val), True)
