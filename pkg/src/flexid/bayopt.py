"""Expected-improvement Bayesian optimization with a two-phase GP update.

The first ``n_classic`` evaluations retune the kernel hyperparameters and
refit the GP from scratch every iteration.  After that the hyperparameters are
frozen and each new observation is absorbed with :meth:`GPState.append`, an
O(n^2) bordered Cholesky update.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .gp import DEFAULT_BOUNDS, FactorizationError, GPState, Hyperparams, gp_fit, posterior_batch, tune_hyperparameters

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
DEFAULT_ETA = Hyperparams(1.0, 0.3, 1e-3)
# A noise floor of 1e-4 (standardized units) keeps the Gram matrix condition
# number near 1e9 even when proposals cluster around the incumbent.
LOOP_ETA_BOUNDS = (DEFAULT_BOUNDS[0], DEFAULT_BOUNDS[1], (1e-4, DEFAULT_BOUNDS[2][1]))


@dataclass(frozen=True)
class OptBudget:
    n0: int = 10
    n_classic: int = 50
    n_max: int = 200
    acq_starts: int = 64

    def __post_init__(self):
        if not (1 <= self.n0 <= self.n_classic <= self.n_max):
            raise ValueError(f"need 1 <= n0 <= n_classic <= n_max, got {self}")
        if self.acq_starts < 1:
            raise ValueError("acq_starts must be >= 1")


@dataclass(frozen=True)
class Iteration:
    theta: tuple
    f: float  # nan when the evaluation failed
    ei: float
    phase: str  # "initial", "classic" or "fast"
    failed: bool = False


@dataclass
class OptTrace:
    iterations: list = field(default_factory=list)
    best_theta: np.ndarray | None = None
    best_f: float = math.inf
    final_state: GPState | None = field(default=None, repr=False)

    def record(self, it: Iteration) -> None:
        self.iterations.append(it)
        if not it.failed and it.f < self.best_f:
            self.best_f = it.f
            self.best_theta = np.array(it.theta)

    @property
    def n_failed(self) -> int:
        return sum(it.failed for it in self.iterations)

    def best_so_far(self) -> np.ndarray:
        out, cur = [], math.inf
        for it in self.iterations:
            if not it.failed:
                cur = min(cur, it.f)
            out.append(cur)
        return np.array(out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "phase", "f", "best_f", "ei", "failed"])
            for i, (it, b) in enumerate(zip(self.iterations, self.best_so_far())):
                w.writerow([i, it.phase, format(it.f, ".17g"), format(b, ".17g"), format(it.ei, ".17g"), int(it.failed)])


def expected_improvement(mean, sd, f_best):
    """Closed-form EI for minimization, ``E[(f_best - X)^+]`` with ``X ~ N(mean, sd^2)``.

    Works elementwise on arrays; zero ``sd`` gives the deterministic improvement.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    imp = f_best - mean
    safe = np.where(sd > 0, sd, 1.0)
    with np.errstate(over="ignore"):  # tiny sd: z -> +-inf, which the formula handles
        z = imp / safe
        ei = imp * ndtr(z) + safe * INV_SQRT_2PI * np.exp(-0.5 * z * z)
    ei = np.where(sd > 0, ei, np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _ei_at(state: GPState, pts: np.ndarray, f_best: float) -> np.ndarray:
    m, v = posterior_batch(state, pts)
    return expected_improvement(m, np.sqrt(v), f_best)


class FeasibilityModel:
    """Smoothed probability that an evaluation at a point succeeds.

    A GP regression on indicators (+0.5 succeeded, -0.5 failed) with a fixed
    kernel; the clipped posterior mean plus 0.5 is the probability, so
    unexplored regions sit at 0.5 and failed neighbourhoods near 0.
    """

    def __init__(self, x_ok: np.ndarray, x_fail: np.ndarray, length_scale: float | None = None):
        x = np.vstack([x_ok, x_fail])
        d = x.shape[1]
        y = np.concatenate([np.full(len(x_ok), 0.5), np.full(len(x_fail), -0.5)])
        eta = Hyperparams(0.25, length_scale or 0.15 * math.sqrt(d), 0.05)
        self.state = gp_fit(x, y, eta)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        m, _ = posterior_batch(self.state, pts)
        return np.clip(0.5 + m, 0.0, 1.0)


def propose_next(state: GPState, f_best: float, acq_starts: int, rng: np.random.Generator,
                 pool_size: int | None = None, step0: float = 0.1, step_min: float = 1e-3, max_rounds: int = 60, local_fraction: float = 0.25,
                 feasibility: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, float]:
    """Maximize EI over the unit cube; returns ``(point, acquisition value)``.

    Starts are the ``acq_starts`` best points of a candidate pool: uniform
    points plus a ``local_fraction`` share of Gaussian perturbations of the
    best observed point.  Each
    start is refined by a compass search that tries +/- steps along every
    coordinate and halves the step when nothing improves, for at most
    ``max_rounds`` rounds.  With
    ``feasibility`` the maximized quantity is EI times that probability.
    """
    d = state.x.shape[1]
    pool_size = pool_size or max(1000, 16 * acq_starts)
    pool = rng.uniform(size=(pool_size, d))
    if local_fraction > 0:
        # part of the pool is scattered around the incumbent at several radii
        n_local = int(local_fraction * pool_size)
        x_best = state.x[int(np.argmin(state.y))]
        radii = np.array([0.01, 0.03, 0.1])[np.arange(n_local) % 3][:, None]
        pool[:n_local] = np.clip(x_best + radii * rng.standard_normal((n_local, d)), 0.0, 1.0)

    def acq(pts):
        ei = _ei_at(state, pts, f_best)
        return ei * feasibility(pts) if feasibility is not None else ei

    ei_pool = acq(pool)
    order = np.argsort(-ei_pool, kind="stable")[:acq_starts]
    cur, cur_ei = pool[order].copy(), ei_pool[order].copy()

    m = cur.shape[0]
    step = np.full(m, step0)
    moves = np.vstack([np.eye(d), -np.eye(d)])  # (2d, d)
    active = np.ones(m, dtype=bool)
    for _ in range(max_rounds):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        cand = np.clip(cur[idx, None, :] + step[idx, None, None] * moves[None], 0.0, 1.0)  # (k, 2d, d)
        ei_c = acq(cand.reshape(-1, d)).reshape(idx.size, 2 * d)
        j = np.argmax(ei_c, axis=1)
        best = ei_c[np.arange(idx.size), j]
        better = best > cur_ei[idx] * (1 + 1e-12) + 1e-300
        up = idx[better]
        cur[up] = cand[better, j[better]]
        cur_ei[up] = best[better]
        shrink = idx[~better]
        step[shrink] *= 0.5
        active[shrink[step[shrink] < step_min]] = False

    k = int(np.argmax(cur_ei))
    return cur[k], float(cur_ei[k])


def latin_hypercube(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return qmc.LatinHypercube(d=d, seed=rng).random(n)


def optimize(objective: Callable[[np.ndarray], float], dim: int, budget: OptBudget,
             eta_bounds=LOOP_ETA_BOUNDS, rng: np.random.Generator | None = None,
             initial_points: Sequence | None = None, failures: tuple = (ArithmeticError, ValueError),
             retry_scale: float = 0.05, tune_restarts: int = 8) -> OptTrace:
    """Minimize ``objective`` over the unit cube ``[0, 1]^dim``.

    ``initial_points`` are evaluated first and count towards ``n0``.  An
    evaluation raising one of ``failures`` is recorded as failed and kept out
    of the objective GP; a failed proposal is retried once at a perturbed
    point, and later proposals are steered away from failed regions by a
    :class:`FeasibilityModel`.  Every attempt counts against ``n_max``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    trace = OptTrace()
    xs: list[np.ndarray] = []
    ys: list[float] = []
    fails: list[np.ndarray] = []

    def evaluate(theta, ei, phase) -> bool:
        theta = np.clip(np.asarray(theta, dtype=float), 0.0, 1.0)
        try:
            f = float(objective(theta))
            if not math.isfinite(f):
                raise ArithmeticError("non-finite objective")
        except failures:
            trace.record(Iteration(tuple(theta), math.nan, ei, phase, failed=True))
            fails.append(theta)
            return False
        trace.record(Iteration(tuple(theta), f, ei, phase))
        xs.append(theta)
        ys.append(f)
        return True

    def attempt(theta, ei, phase) -> None:
        if evaluate(theta, ei, phase) or len(trace.iterations) >= budget.n_max:
            return
        evaluate(theta + rng.normal(scale=retry_scale, size=dim), ei, phase)

    init = [np.asarray(p, dtype=float) for p in (initial_points or [])][: budget.n0]
    lhs = latin_hypercube(budget.n0 - len(init), dim, rng) if budget.n0 > len(init) else np.empty((0, dim))
    for p in [*init, *lhs]:
        evaluate(p, math.nan, "initial")

    eta = DEFAULT_ETA
    state: GPState | None = None
    while len(trace.iterations) < budget.n_max:
        n_done = len(trace.iterations)
        if not xs:  # nothing observed yet: keep sampling the cube
            evaluate(rng.uniform(size=dim), math.nan, "initial")
            continue
        x_arr, y_arr = np.array(xs), np.array(ys)
        classic = n_done < budget.n_classic or state is None
        if classic:
            std = np.std(y_arr)
            if len(ys) >= 2:
                z = (y_arr - y_arr.mean()) / (std if std > 0 else 1.0)
                eta = tune_hyperparameters(x_arr, z, eta_bounds, tune_restarts, rng, init=eta)
            state = gp_fit(x_arr, y_arr, eta, standardize=True)
        elif state.n < len(xs):
            for x_new, y_new in zip(xs[state.n:], ys[state.n:]):
                try:
                    state.append(x_new, y_new)
                except FactorizationError:
                    state = gp_fit(x_arr, y_arr, eta, standardize=True)
                    break
        phase = "classic" if classic else "fast"
        feas = FeasibilityModel(x_arr, np.array(fails)) if fails else None
        theta, ei = propose_next(state, trace.best_f, budget.acq_starts, rng, feasibility=feas)
        attempt(theta, ei, phase)

    if xs:
        if state is None:
            state = gp_fit(np.array(xs), np.array(ys), eta, standardize=True)
        elif state.n < len(xs):
            for x_new, y_new in zip(xs[state.n:], ys[state.n:]):
                try:
                    state.append(x_new, y_new)
                except FactorizationError:
                    state = gp_fit(np.array(xs), np.array(ys), eta, standardize=True)
                    break
    trace.final_state = state
    return trace
