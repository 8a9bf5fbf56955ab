"""Sequential design drivers with adaptive replication.

Every scheme shares one loop (:func:`run_scheme`): build a space-filling
initial design with ``r0`` replicates per input, then repeat design rounds
until the simulation budget ``N_T`` is spent, refitting hyperparameters on
a fixed cadence.  Schemes differ only in the per-round step:

``fb``     cUCB input, fixed batch ``r0``.
``mlb``    cUCB input, highest ladder level whose look-ahead sd clears a
           shrinking threshold gamma.
``rb``     as ``mlb`` but the batch size only ratchets one level up at a time.
``absur``  joint (x, r) maximizing gSUR gain per unit cost.
``adsa``   each round either adds a cUCB input or spreads the batch over
           existing inputs, whichever leaves less weighted look-ahead variance.
``ddsa``   alternates the two moves of ``adsa``, starting with a new input.
``fdsa``   always spreads the batch over existing inputs.

Round numbering starts at ``k0`` (the initial design counts as ``k0``
rounds), which is the ``n`` entering the ADSA batch size and the ABSUR
overhead.
"""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import acquisition as acq
from .gp import GPModel, Homoskedastic, ReplicatedDesign, fit_hyperparameters
from .metrics import TestSet, adsa_weights, build_test_set, credible_band_volume, error_rate
from .rng import stream
from .tgp import TGPModel, TGPParams, fit_tgp

__all__ = [
    "SCHEMES",
    "FidelityLadder",
    "RunSettings",
    "SchemeState",
    "AllocationResult",
    "RunRecord",
    "mlb_choose",
    "rb_choose",
    "peg_allocation",
    "allocate",
    "adsa_compare",
    "adsa_batch_size",
    "ddsa_adds_new",
    "run_scheme",
]

SCHEMES = ("fb", "mlb", "rb", "absur", "adsa", "ddsa", "fdsa")
DEFAULT_ETA = {"mlb": 0.5, "rb": 0.8}


@dataclass(frozen=True)
class FidelityLadder:
    levels: tuple[int, ...]

    def __post_init__(self):
        lv = tuple(int(v) for v in self.levels)
        if not lv or lv[0] < 1 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("ladder must be a nonempty strictly increasing list of positive integers")
        object.__setattr__(self, "levels", lv)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class RunSettings:
    """Everything that determines one sequential-design run."""

    scheme: str = "fb"
    metamodel: str = "gp"
    N_T: int = 2000
    k0: int = 20
    r0: int = 10
    ladder: tuple[int, ...] = (5, 10, 15, 20, 30, 40, 50, 60, 80, 100, 140, 180, 240, 300)
    eta: float | None = None
    r_range: tuple[int, int] | None = None
    T_sim: float = 0.01
    theta: tuple[float, float, float] = acq.DEFAULT_THETA
    c_bt: float = 10.0
    refit_every: int = 5
    test_mode: str = "uniform"
    M: int = 500
    noise_mode: str = "fixed"
    tau2: float = 1.0
    n_candidates: int = 512
    n_polish: int = 3
    polish_iters: int = 200
    absur_mu: bool = True
    n_starts: int = 5
    refit_starts: int = 2

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
        if self.metamodel not in ("gp", "tgp"):
            raise ValueError(f"unknown metamodel {self.metamodel!r}; valid: gp, tgp")
        object.__setattr__(self, "ladder", FidelityLadder(self.ladder).levels)
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if self.r_range is not None:
            object.__setattr__(self, "r_range", (int(self.r_range[0]), int(self.r_range[1])))
        if self.N_T <= self.k0 * self.r0:
            raise ValueError("budget must exceed the initial design cost k0 * r0")
        if min(self.k0, self.r0, self.refit_every) < 1:
            raise ValueError("k0, r0 and refit_every must be positive")
        if self.eta is not None and not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.c_bt <= 0:
            raise ValueError("c_bt must be positive")
        if self.scheme == "absur":
            self.cost.check(self.N_T)

    @property
    def eta_value(self) -> float:
        return self.eta if self.eta is not None else DEFAULT_ETA.get(self.scheme, 0.5)

    @property
    def r_bounds(self) -> tuple[int, int]:
        """ABSUR replication range; the upper end defaults to 5% of N_T."""
        if self.r_range is not None:
            return self.r_range
        return (5, max(5, int(round(0.05 * self.N_T))))

    @property
    def cost(self) -> acq.CostModel:
        return acq.CostModel(self.T_sim, self.theta)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SchemeState:
    n: int
    k: int
    N: int
    gamma: float | None = None
    level: int = 0
    adds: int = 0
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class AllocationResult:
    dr: np.ndarray
    U: np.ndarray
    total: int


@dataclass
class RunRecord:
    settings: dict
    problem: str
    seed: int
    run: int
    rows: list
    design: ReplicatedDesign
    summary: dict
    model: object = None


# -- batch-size rules -----------------------------------------------------------------


def mlb_choose(s_next: np.ndarray, gamma: float, eta: float) -> tuple[int, float]:
    """Ladder index and updated threshold for multi-level batching.

    ``s_next[l]`` is the look-ahead sd for ladder level ``l`` (decreasing
    in ``l``).  The threshold shrinks by ``eta`` until the lowest level
    clears it; the highest level still clearing it is chosen.
    """
    s_next = np.asarray(s_next, dtype=float)
    if s_next[0] <= 0:
        return len(s_next) - 1, gamma
    while s_next[0] < gamma:
        gamma *= eta
    idx = int(np.nonzero(s_next >= gamma)[0].max())
    return idx, gamma


def rb_choose(s_cur: float, s_up: float | None, gamma: float, eta: float) -> tuple[bool, float]:
    """Ratchet decision: (move up one level?, updated threshold).

    ``s_up`` is ``None`` at the top of the ladder, where the level is kept.
    """
    if s_cur > 0:
        while s_cur < gamma:
            gamma *= eta
    up = s_up is not None and s_up >= gamma
    return up, gamma


def adsa_batch_size(c_bt: float, n: int) -> int:
    return max(1, int(round(c_bt * np.sqrt(n))))


def ddsa_adds_new(n: int, k0: int) -> bool:
    """DDSA adds a new input on the first round after the initial design and
    every other round after that."""
    return (n - k0) % 2 == 1


# -- allocation ------------------------------------------------------------------------


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def peg_allocation(U, r, total: int) -> np.ndarray:
    """Nonnegative integer increments with r + dr proportional to U.

    Negative targets are pegged at zero and the remaining budget is
    redistributed among the other inputs until every target is
    nonnegative; targets are then rounded to the nearest integer, and if
    all round to zero the largest is rounded up to one.
    """
    U = np.asarray(U, dtype=float)
    r = np.asarray(r, dtype=float)
    if total < 1:
        raise ValueError("allocation total must be at least 1")
    if U.size == 0:
        raise ValueError("nothing to allocate to")
    if np.all(U <= 0):
        warnings.warn("allocation vector has no positive entry; allocating proportionally to counts")
        U = r.copy()
    active = np.ones(U.size, dtype=bool)
    target = np.zeros(U.size)
    while True:
        budget = r[active].sum() + total
        target[:] = 0.0
        target[active] = U[active] / U[active].sum() * budget - r[active]
        neg = active & (target < 0)
        if not neg.any():
            break
        active &= ~neg
        if not active.any() or U[active].sum() <= 0:
            active = U == U.max()
            target[:] = 0.0
            target[active] = total / active.sum()
            break
    dr = np.maximum(_round_half_up(target), 0)
    if dr.sum() == 0:
        dr[int(np.argmax(target))] = 1
    return dr


def allocate(model, omega, Xs, total: int) -> AllocationResult:
    """Spread ``total`` new replicates over the current design inputs."""
    U = model.allocation_vector(omega, Xs) * model.allocation_noise_scale()
    dr = peg_allocation(U, model.design.counts, total)
    return AllocationResult(dr=dr, U=U, total=int(dr.sum()))


def adsa_compare(model, alloc: AllocationResult, x_new, total: int, Xs, omega) -> tuple[str, float, float]:
    """Weighted look-ahead variance of both ADSA moves.

    Returns ``(action, I_all, I_new)`` with action ``"new"`` when spreading
    the batch leaves at least as much weighted variance as a new input.
    """
    i_all = float(omega @ model.lookahead_var_realloc(alloc.dr, Xs))
    i_new = float(omega @ model.lookahead_var_at_test_new(x_new, total, Xs))
    return ("new" if i_all >= i_new else "realloc"), i_all, i_new


def trim_allocation(dr: np.ndarray, limit: int) -> np.ndarray:
    """Reduce the largest increments one at a time until sum(dr) <= limit."""
    dr = np.array(dr, dtype=np.int64)
    while dr.sum() > limit:
        dr[int(np.argmax(dr))] -= 1
    return dr


# -- the driver -----------------------------------------------------------------------


class _Runner:
    def __init__(self, problem, settings: RunSettings, seed: int, run: int):
        self.problem = problem
        self.s = settings
        self.seed = seed
        self.run = run
        self.mu = getattr(problem, "mu", None)
        self.feasible = getattr(problem, "feasible", None)
        self.ladder = np.array(settings.ladder)

    def rng(self, n, tag):
        return stream(self.seed, self.run, n, tag)

    # model management

    def initial_model(self, design):
        s = self.s
        rng = self.rng(0, "fit")
        if s.metamodel == "gp":
            fit = fit_hyperparameters(design, Homoskedastic(s.tau2), s.noise_mode, n_starts=s.n_starts, rng=rng)
            return GPModel(design, fit.kernel, fit.noise)
        return fit_tgp(design, rng=rng, n_starts=s.n_starts)

    def refit(self, model, n):
        s = self.s
        rng = self.rng(n, "fit")
        if isinstance(model, TGPModel):
            return fit_tgp(model.design, rng=rng, init=model.params, n_starts=s.refit_starts)
        fit = fit_hyperparameters(
            model.design, model.noise, s.noise_mode, n_starts=s.refit_starts, rng=rng, init=model.kernel
        )
        if not fit.success:
            return model
        return GPModel(model.design, fit.kernel, fit.noise)

    # simulation

    def simulate(self, x, count, rng, n):
        try:
            y = np.asarray(self.problem.simulate(x, int(count), rng), dtype=float)
        except Exception as exc:
            raise RuntimeError(f"simulator failed in design round {n}") from exc
        if y.shape != (count,) or not np.all(np.isfinite(y)):
            raise RuntimeError(f"simulator returned invalid outputs in design round {n}")
        return y

    # acquisition helpers

    def cucb_argmax(self, model, test, fhat_test, s_test, n):
        rho = acq.rho_weight(fhat_test, s_test)
        res = acq.optimize_acquisition(
            lambda X: acq.cucb(X, model, rho, self.mu),
            model.dim,
            self.rng(n, "acquisition"),
            n_candidates=self.s.n_candidates,
            n_polish=self.s.n_polish,
            polish_iters=self.s.polish_iters,
            feasible=self.feasible,
        )
        return res.x, res.value

    def lookahead_levels(self, model, x):
        X = np.repeat(np.atleast_2d(x), len(self.ladder), axis=0)
        return model.lookahead_sd_new(X, self.ladder)

    # steps; each returns (model, row fields)

    def step_single(self, model, state, test, fhat_test, s_test, remaining):
        s, n = self.s, state.n
        criterion = None
        if s.scheme == "absur":
            cost = s.cost
            mu = self.mu if s.absur_mu else None
            res = acq.optimize_acquisition(
                lambda X, r: acq.absur(X, r, model, cost, n, mu),
                model.dim,
                self.rng(n, "acquisition"),
                r_range=s.r_bounds,
                n_candidates=s.n_candidates,
                n_polish=s.n_polish,
                polish_iters=s.polish_iters,
                feasible=self.feasible,
            )
            x, r, criterion = res.x, res.r, res.value
        else:
            x, criterion = self.cucb_argmax(model, test, fhat_test, s_test, n)
            if s.scheme == "fb":
                r = s.r0
            elif s.scheme == "mlb":
                idx, state.gamma = mlb_choose(self.lookahead_levels(model, x), state.gamma, s.eta_value)
                r = int(self.ladder[idx])
            else:
                s_lv = self.lookahead_levels(model, x)
                s_up = s_lv[state.level + 1] if state.level + 1 < len(self.ladder) else None
                up, state.gamma = rb_choose(s_lv[state.level], s_up, state.gamma, s.eta_value)
                state.level += int(up)
                r = int(self.ladder[state.level])
        r = int(min(r, remaining))
        y = self.simulate(x, r, self.rng(n, "simulate"), n)
        model, action = self.add_input(model, x, y)
        return model, {"x": x, "r": r, "action": action, "criterion": criterion}

    @staticmethod
    def add_input(model, x, y):
        """Append a new input, or pool the batch into an existing one when the
        optimizer returns a point already in the design (e.g. a corner)."""
        i = model.design.find(x)
        if i is None:
            return model.append(x, len(y), float(y.mean())), "new"
        return model.add_replicates(i, y), "merge"

    def step_allocation(self, model, state, test, fhat_test, s_test, remaining):
        s, n = self.s, state.n
        total = min(adsa_batch_size(s.c_bt, n), remaining)
        omega = adsa_weights(fhat_test, s_test, test.relative_weights() * self._mu_test)
        crit = None
        if s.scheme == "adsa":
            alloc = allocate(model, omega, test.points, total)
            x_new, _ = self.cucb_argmax(model, test, fhat_test, s_test, n)
            action, i_all, i_new = adsa_compare(model, alloc, x_new, total, test.points, omega)
            crit = i_all - i_new
        elif s.scheme == "ddsa" and ddsa_adds_new(n, s.k0):
            action = "new"
            x_new, _ = self.cucb_argmax(model, test, fhat_test, s_test, n)
        else:
            action = "realloc"
            alloc = allocate(model, omega, test.points, total)

        rng = self.rng(n, "simulate")
        if action == "new":
            y = self.simulate(x_new, total, rng, n)
            model, action = self.add_input(model, x_new, y)
            return model, {"x": x_new, "r": total, "action": action, "criterion": crit}

        dr = trim_allocation(alloc.dr, remaining)
        design = model.design
        for i in np.nonzero(dr)[0]:
            design = design.add_replicates(int(i), self.simulate(design.X[i], int(dr[i]), rng, n))
        model = model.with_design(design)
        return model, {"x": None, "r": int(dr.sum()), "action": "realloc", "criterion": crit}

    # main loop

    def execute(self) -> RunRecord:
        s, problem = self.s, self.problem
        t_start = time.perf_counter()
        elapsed = 0.0

        test = build_test_set(problem, s.M, s.test_mode, self.rng(0, "testset"))
        self._mu_test = np.ones(test.M) if self.mu is None else np.asarray(self.mu(test.points), dtype=float)

        t0 = time.perf_counter()
        init_rng = self.rng(0, "initial-design")
        if hasattr(problem, "initial_design"):
            X0 = problem.initial_design(s.k0, init_rng)
        else:
            X0 = qmc.LatinHypercube(problem.dim, seed=init_rng).random(s.k0)
        sim_rng = self.rng(0, "simulate")
        ybar = [self.simulate(x, s.r0, sim_rng, 0).mean() for x in X0]
        design = ReplicatedDesign(X0, np.full(s.k0, s.r0), ybar)
        model = self.initial_model(design)
        state = SchemeState(n=s.k0, k=design.k, N=design.N)
        if s.scheme in ("mlb", "rb"):
            state.gamma = float(np.mean(model.predict(design.X)[1]))
        elapsed += time.perf_counter() - t0

        rows = [self.row(model, state, test, None, s.r0, "initial", None, elapsed)]
        step = self.step_single if s.scheme in ("fb", "mlb", "rb", "absur") else self.step_allocation

        while state.N < s.N_T:
            t0 = time.perf_counter()
            state.n += 1
            fhat_test, s_test = model.predict(test.points)
            model, info = step(model, state, test, fhat_test, s_test, s.N_T - state.N)
            state.k, state.N = model.design.k, model.design.N
            if (state.n - s.k0) % s.refit_every == 0:
                model = self.refit(model, state.n)
            elapsed += time.perf_counter() - t0
            rows.append(self.row(model, state, test, info["x"], info["r"], info["action"], info["criterion"], elapsed))

        last = rows[-1]
        summary = {
            "ER": last["ER"],
            "band": last["band"],
            "k_T": state.k,
            "N_T": state.N,
            "rounds": state.n - s.k0,
            "wall_seconds_nondet": elapsed,
            "total_seconds_nondet": time.perf_counter() - t_start,
        }
        return RunRecord(
            settings=s.snapshot(),
            problem=getattr(problem, "name", type(problem).__name__),
            seed=self.seed,
            run=self.run,
            rows=rows,
            design=model.design,
            summary=summary,
            model=model,
        )

    def row(self, model, state, test: TestSet, x, r, action, criterion, elapsed):
        fhat, sd = model.predict(test.points)
        er = error_rate(fhat, test) if test.truth is not None else None
        return {
            "n": state.n,
            "k": state.k,
            "N": state.N,
            "x": None if x is None else [float(v) for v in np.ravel(x)],
            "r": int(r),
            "action": action,
            "criterion": None if criterion is None else float(criterion),
            "gamma": state.gamma,
            "ER": er,
            "band": credible_band_volume(model, test, fhat, sd),
            "wall_seconds_nondet": elapsed,
        }


def run_scheme(problem, settings: RunSettings, seed: int = 0, run: int = 0) -> RunRecord:
    """Run one sequential design to budget exhaustion.

    Parameters
    ----------
    problem
        Simulator with ``dim``, ``simulate(x, count, rng)`` and optionally
        ``truth``, ``mu``, ``feasible``, ``initial_design`` and
        ``make_test_set``.
    settings : RunSettings
    seed, run : int
        Master seed and macro-replication index keying all random streams.

    Returns
    -------
    RunRecord
        Per-round rows (``n, k, N, x, r, ER, band, ...``), the final design
        and a summary.  Wall-clock fields end in ``_nondet``; they time the
        design steps and refits only, not metric evaluation.
    """
    return _Runner(problem, settings, seed, run).execute()
