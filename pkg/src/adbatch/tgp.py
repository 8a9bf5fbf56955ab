"""GP with Student-t observation noise, inferred by the Laplace approximation.

The batch mean at x_i is modelled as f(x_i) plus t-distributed noise with
``nu`` degrees of freedom and squared scale tau^2/r_i.  The Laplace mode is
found with damped Newton iterations in the ``f = K a`` parameterization,
which never inverts K.  The log-likelihood is not concave in f, so the
curvature W can go negative for large residuals; those entries are floored
at ``W_FLOOR`` wherever W enters a matrix factorization.

:class:`TGPModel` exposes the same methods as :class:`adbatch.gp.GPModel`,
so every scheme runs unchanged on either metamodel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .gp import (
    GPModel,
    Homoskedastic,
    KernelParams,
    ReplicatedDesign,
    clamp_variance,
    fit_hyperparameters,
    kernel_matrix,
)

__all__ = [
    "TGPParams",
    "LaplaceState",
    "TGPModel",
    "laplace_mode",
    "tgp_lookahead_factor",
    "fit_tgp",
    "NU_GRID",
    "NU_BOUNDS",
]

W_FLOOR = 1e-10
GRAD_TOL = 1e-9
MAX_ITER = 100
MAX_HALVINGS = 20
NU_GRID = tuple(range(3, 31))
NU_BOUNDS = (2.0 + 1e-3, 100.0)


@dataclass(frozen=True)
class TGPParams:
    nu: float
    tau2: float
    kernel: KernelParams

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu > 2):
            raise ValueError("nu must exceed 2 for a finite noise variance")
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise ValueError("tau2 must be positive")


@dataclass(frozen=True)
class LaplaceState:
    """Laplace mode and curvature at the design points.

    ``W`` holds the raw curvature (possibly negative); ``W_used`` the floored
    values that enter factorizations.
    """

    mode: np.ndarray
    a: np.ndarray
    W: np.ndarray
    W_used: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def tgp_lookahead_factor(nu: float) -> float:
    """Inflation (nu+1)/(nu-1) applied to tau^2 in the t-GP look-aheads."""
    return (nu + 1.0) / (nu - 1.0)


def _loglik(e, s2, nu) -> float:
    return float(
        np.sum(
            gammaln((nu + 1) / 2)
            - gammaln(nu / 2)
            - 0.5 * np.log(nu * math.pi * s2)
            - (nu + 1) / 2 * np.log1p(e**2 / (nu * s2))
        )
    )


def _dloglik(e, s2, nu) -> np.ndarray:
    """Derivative of the log-likelihood with respect to f (e = y - f)."""
    return (nu + 1) * e / (nu * s2 + e**2)


def _curvature(e, s2, nu) -> np.ndarray:
    """Negative second derivative of the log-likelihood in f."""
    return (nu + 1) * (nu * s2 - e**2) / (nu * s2 + e**2) ** 2


def _b_factor(K: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sW = np.sqrt(W)
    B = np.eye(len(W)) + sW[:, None] * K * sW[None, :]
    return cholesky(B, lower=True, check_finite=False), sW


def laplace_mode(
    design: ReplicatedDesign,
    params: TGPParams,
    a0: np.ndarray | None = None,
    K: np.ndarray | None = None,
) -> LaplaceState:
    """Posterior mode of the latent values at the design points.

    Parameters
    ----------
    design : ReplicatedDesign
    params : TGPParams
    a0 : ndarray, optional
        Warm start for ``a = K^{-1} f``.
    K : ndarray, optional
        Precomputed kernel matrix over ``design.X``.

    Returns
    -------
    LaplaceState
        With ``converged=False`` and the best iterate if the gradient
        tolerance was not met.
    """
    if design.k == 0:
        raise ValueError("Laplace approximation needs at least one design point")
    if K is None:
        K = kernel_matrix(design.X, design.X, params.kernel)
    y = design.means
    s2 = params.tau2 / design.counts
    nu = params.nu

    def psi(a):
        f = K @ a
        return -0.5 * a @ f + _loglik(y - f, s2, nu), f

    a = np.zeros(design.k) if a0 is None else np.array(a0, dtype=float)
    val, f = psi(a)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        grad = _dloglik(y - f, s2, nu) - a
        if np.max(np.abs(grad)) < GRAD_TOL:
            converged = True
            break
        W = np.maximum(_curvature(y - f, s2, nu), W_FLOOR)
        L, sW = _b_factor(K, W)
        b = W * f + _dloglik(y - f, s2, nu)
        a_newton = b - sW * cho_solve((L, True), sW * (K @ b), check_finite=False)
        step = a_newton - a
        slack = 1e-12 * (1.0 + abs(val))
        for _ in range(MAX_HALVINGS + 1):
            cand_val, cand_f = psi(a + step)
            if cand_val >= val - slack:
                break
            step = 0.5 * step
        else:
            break
        a = a + step
        val, f = cand_val, cand_f
    e = y - f
    grad = _dloglik(e, s2, nu) - a
    W = _curvature(e, s2, nu)
    return LaplaceState(
        mode=f,
        a=a,
        W=W,
        W_used=np.maximum(W, W_FLOOR),
        converged=converged or bool(np.max(np.abs(grad)) < GRAD_TOL),
        iterations=it,
        grad_norm=float(np.max(np.abs(grad))),
    )


class TGPModel:
    """Laplace-approximated Student-t GP over a replicated design."""

    __slots__ = ("design", "params", "state", "_K", "_L", "_sW")

    def __init__(self, design: ReplicatedDesign, params: TGPParams, warm_start: np.ndarray | None = None):
        self.design = design
        self.params = params
        if design.k:
            self._K = kernel_matrix(design.X, design.X, params.kernel)
            a0 = warm_start if warm_start is not None and len(warm_start) == design.k else None
            self.state = laplace_mode(design, params, a0=a0, K=self._K)
            if not self.state.converged:
                warnings.warn(
                    f"Laplace iterations stopped with gradient {self.state.grad_norm:.2e}"
                )
            self._L, self._sW = _b_factor(self._K, self.state.W_used)
        else:
            self._K = np.zeros((0, 0))
            self.state = None
            self._L = np.zeros((0, 0))
            self._sW = np.zeros(0)

    def __repr__(self):
        return f"TGPModel(k={self.design.k}, N={self.design.N}, params={self.params})"

    @property
    def kernel(self) -> KernelParams:
        return self.params.kernel

    @property
    def noise(self) -> Homoskedastic:
        return Homoskedastic(self.params.tau2)

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def noise_variance(self, X) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.params.tau2)

    def lookahead_noise_variance(self, X) -> np.ndarray:
        """tau^2 inflated by (nu+1)/(nu-1), as used by the look-aheads."""
        return tgp_lookahead_factor(self.params.nu) * self.noise_variance(X)

    def _V(self, Xs) -> np.ndarray:
        Ks = kernel_matrix(Xs, self.design.X, self.kernel)
        return solve_triangular(self._L, self._sW[:, None] * Ks.T, lower=True, check_finite=False), Ks

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        prior = np.full(Xs.shape[0], self.kernel.variance)
        if self.design.k == 0:
            return np.zeros(Xs.shape[0]), np.sqrt(prior)
        V, Ks = self._V(Xs)
        var = clamp_variance(prior - np.einsum("ij,ij->j", V, V), self.kernel.variance)
        return Ks @ self.state.a, np.sqrt(var)

    def predict_mean(self, Xs) -> np.ndarray:
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if self.design.k == 0:
            return np.zeros(Xs.shape[0])
        return kernel_matrix(Xs, self.design.X, self.kernel) @ self.state.a

    def posterior(self, x) -> tuple[float, float]:
        m, s = self.predict(np.asarray(x, dtype=float).reshape(1, -1))
        return float(m[0]), float(s[0])

    def posterior_cov(self, A, B) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        prior = kernel_matrix(A, B, self.kernel)
        if self.design.k == 0:
            return prior
        return prior - self._V(A)[0].T @ self._V(B)[0]

    def log_marginal_likelihood(self) -> float:
        """Laplace approximation to the log evidence."""
        if self.design.k == 0:
            return 0.0
        s2 = self.params.tau2 / self.design.counts
        e = self.design.means - self.state.mode
        return (
            -0.5 * self.state.a @ self.state.mode
            + _loglik(e, s2, self.params.nu)
            - np.log(np.diag(self._L)).sum()
        )

    # look-aheads

    def lookahead_sd_new(self, X, r, sd=None) -> np.ndarray:
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
        if dr < 1:
            raise ValueError("dr must be >= 1")
        x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        _, s_test = self.predict(Xs)
        _, s_new = self.predict(x_new)
        v = self.posterior_cov(Xs, x_new)[:, 0]
        denom = tgp_lookahead_factor(self.params.nu) * self.params.tau2 / dr + s_new[0] ** 2
        return clamp_variance(s_test**2 - v**2 / denom, self.kernel.variance)

    def lookahead_var_realloc(self, dr, Xs) -> np.ndarray:
        """Variance after reallocation with curvature recomputed at the new
        replicate counts and the current residuals held fixed."""
        dr = np.asarray(dr, dtype=np.int64).ravel()
        if dr.size != self.design.k:
            raise ValueError("need one increment per design point")
        if np.any(dr < 0):
            raise ValueError("increments must be nonnegative")
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if self.design.k == 0:
            return np.full(Xs.shape[0], self.kernel.variance)
        s2_hat = self.params.tau2 / (self.design.counts + dr)
        e = self.design.means - self.state.mode
        W_hat = np.maximum(_curvature(e, s2_hat, self.params.nu), W_FLOOR)
        L, sW = _b_factor(self._K, W_hat)
        Ks = kernel_matrix(Xs, self.design.X, self.kernel)
        V = solve_triangular(L, sW[:, None] * Ks.T, lower=True, check_finite=False)
        return clamp_variance(self.kernel.variance - np.einsum("ij,ij->j", V, V), self.kernel.variance)

    def allocation_vector(self, omega, Xs) -> np.ndarray:
        """U = (K + c tau^2 R)^{-1} K_*^T omega with c = (nu+1)/(nu-1)."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        c = tgp_lookahead_factor(self.params.nu)
        S = self._K + np.diag(c * self.params.tau2 / self.design.counts)
        Ks = kernel_matrix(Xs, self.design.X, self.kernel)
        L = cholesky(S, lower=True, check_finite=False)
        return cho_solve((L, True), Ks.T @ np.asarray(omega, dtype=float), check_finite=False)

    def allocation_noise_scale(self) -> np.ndarray:
        return self.noise_variance(self.design.X)

    # updates

    def with_design(self, design: ReplicatedDesign) -> "TGPModel":
        warm = self.state.a if self.state is not None and design.k == self.design.k else None
        return TGPModel(design, self.params, warm_start=warm)

    def with_params(self, params: TGPParams) -> "TGPModel":
        return TGPModel(self.design, params)

    def append(self, x, r: int, ybar: float) -> "TGPModel":
        return self.with_design(self.design.append(x, r, ybar))

    def add_replicates(self, i: int, y_new) -> "TGPModel":
        if len(np.atleast_1d(y_new)) == 0:
            return self
        return self.with_design(self.design.add_replicates(i, y_new))


def _laplace_evidence(design, kernel, nu, tau2, K) -> float:
    params = TGPParams(nu, tau2, kernel)
    st = laplace_mode(design, params, K=K)
    L, _ = _b_factor(K, st.W_used)
    s2 = tau2 / design.counts
    return float(-0.5 * st.a @ st.mode + _loglik(design.means - st.mode, s2, nu) - np.log(np.diag(L)).sum())


def fit_tgp(
    design: ReplicatedDesign,
    rng: np.random.Generator | None = None,
    init: TGPParams | None = None,
    n_starts: int = 5,
) -> TGPModel:
    """Fit kernel, nu and tau^2 by (approximate) maximum likelihood.

    The kernel comes from a Gaussian fit with a constant fitted noise.  The
    degrees of freedom are then profiled on ``NU_GRID`` (tau^2 matched to the
    Gaussian noise variance), and (nu, tau^2) refined jointly within
    ``NU_BOUNDS``.
    """
    gauss_init = init.kernel if init is not None else None
    tau0 = init.tau2 if init is not None else max(float(np.var(design.means)) * 0.1, 1e-3)
    fit = fit_hyperparameters(design, Homoskedastic(tau0), "fit", n_starts=n_starts, rng=rng, init=gauss_init)
    kernel = fit.kernel
    var_g = fit.noise.tau2
    K = kernel_matrix(design.X, design.X, kernel)

    best = (-np.inf, None)
    for nu in NU_GRID:
        tau2 = var_g * (nu - 2) / nu
        try:
            val = _laplace_evidence(design, kernel, nu, tau2, K)
        except np.linalg.LinAlgError:
            continue
        if val > best[0]:
            best = (val, (float(nu), tau2))
    if best[1] is None:
        warnings.warn("t-GP profile failed; using a Gaussian-like nu")
        return TGPModel(design, TGPParams(NU_BOUNDS[1], var_g, kernel))

    def neg(theta):
        try:
            return -_laplace_evidence(design, kernel, theta[0], math.exp(theta[1]), K)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf

    x0 = np.array([best[1][0], math.log(best[1][1])])
    res = minimize(
        neg,
        x0,
        method="L-BFGS-B",
        bounds=[NU_BOUNDS, (math.log(1e-6), math.log(1e2))],
        options={"maxiter": 50},
    )
    nu, tau2 = (res.x[0], math.exp(res.x[1])) if np.isfinite(res.fun) and -res.fun >= best[0] else best[1]
    return TGPModel(design, TGPParams(float(nu), float(tau2), kernel))
