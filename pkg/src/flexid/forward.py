"""Price-response (forward) problems: static, rolling-horizon dynamic, and inner-cost variants.

The aggregate objective is separable across components and the feasible set is
a product of per-component sets, so by default every component is solved as
its own small program and the results are summed.  ``decompose=False`` builds
one block-diagonal program instead; both give the same optimal objective.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    AdjustableParams,
    AggregateModel,
    ModelError,
    StorageParams,
    build_difference_matrix,
    build_storage_propagators,
    energy_trajectory,
    validate_model,
)
from .solver import Program, Solution, solve

MODES = ("static", "dynamic", "static_ext", "dynamic_ext")


class InfeasibleResponseError(RuntimeError):
    """The forward problem has no feasible point; ``blocks`` names the offending constraints."""

    def __init__(self, component: str, blocks: Sequence[str]):
        self.component = component
        self.blocks = tuple(blocks)
        shown = ", ".join(self.blocks[:6]) + (" ..." if len(self.blocks) > 6 else "")
        super().__init__(f"{component}: infeasible ({shown or 'no feasible point'})")


@dataclass(frozen=True)
class PriceSignal:
    lam: np.ndarray
    lam_hat: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        lam_hat = np.asarray(self.lam_hat, dtype=float)
        if lam.shape != lam_hat.shape or lam.ndim != 1:
            raise ValueError("lambda and lambda_hat must be 1-D with equal length")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(lam_hat))):
            raise ValueError("prices must be finite")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "lam_hat", lam_hat)

    @classmethod
    def known(cls, lam: Sequence[float]) -> "PriceSignal":
        """Prices known in advance (forecast equals actual)."""
        lam = np.asarray(lam, dtype=float)
        return cls(lam, lam.copy())

    def scaled(self, kappa: float) -> "PriceSignal":
        return PriceSignal(kappa * self.lam, kappa * self.lam_hat)


@dataclass(frozen=True)
class ForwardOptions:
    tol_feas: float = 1e-8
    tol_opt: float = 1e-8
    t_dc: int = 1
    t_ph: int = 24
    use_forecast: bool = True
    decompose: bool = True


@dataclass
class ResponseResult:
    p_agg: np.ndarray
    p_fix: np.ndarray
    p_adj: np.ndarray  # (n_adj, T)
    p_str: np.ndarray  # (n_str, T)
    e_str: np.ndarray  # (n_str, T)
    objective: float

    def to_csv(self, path: str | Path) -> None:
        header = ["t", "p_agg", "p_fix"]
        header += [f"p_adj_{j}" for j in range(self.p_adj.shape[0])]
        header += [f"p_str_{i}" for i in range(self.p_str.shape[0])]
        header += [f"e_str_{i}" for i in range(self.e_str.shape[0])]
        cols = [self.p_agg, self.p_fix, *self.p_adj, *self.p_str, *self.e_str]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.p_agg.size):
                w.writerow([t] + [format(float(c[t]), ".17g") for c in cols])


@dataclass(frozen=True)
class DynamicState:
    t: int
    e: tuple[float, ...]
    p_adj_last: tuple[float, ...] | None = None


@dataclass
class StepDecision:
    p_adj: np.ndarray  # (n_adj, h)
    p_str: np.ndarray  # (n_str, h)
    objective: float = 0.0
    extra: dict = field(default_factory=dict)


# --- component programs -------------------------------------------------------

def _storage_program(i: int, s: StorageParams, cost: np.ndarray, dt: float, e_init: float,
                     periodic: bool, terminal_price: float = 0.0) -> tuple[Program, float]:
    """LP over one storage's power profile; returns the program and its constant term."""
    h = cost.size
    gamma, ups = build_storage_propagators(s.sigma, h)
    a = ups * dt
    base = gamma * e_init
    c = cost - terminal_price * a[-1]
    const = -terminal_price * base[-1]
    tag = f"storages[{i}]"
    prog = Program(
        c=c,
        a_ineq=np.vstack([a, -a]),
        b_ineq=np.concatenate([s.e_hi - base, base - s.e_lo]),
        a_eq=a[-1:] if periodic else None,
        b_eq=[s.e0 - base[-1]] if periodic else None,
        lb=np.full(h, s.p_lo),
        ub=np.full(h, s.p_hi),
        ineq_labels=[f"{tag}.energy_upper[{t}]" for t in range(h)] + [f"{tag}.energy_lower[{t}]" for t in range(h)],
        eq_labels=[f"{tag}.periodic"] if periodic else None,
    )
    return prog, const


def _adjustable_program(j: int, a: AdjustableParams, cost: np.ndarray, dt: float,
                        p_prev: float | None, inner: bool, expect: np.ndarray | None) -> tuple[Program, float]:
    h = cost.size
    rows, rhs, labels = [], [], []
    tag = f"adjustables[{j}]"
    if h >= 2:
        m = build_difference_matrix(h)
        rows += [m, -m]
        rhs += [np.full(h - 1, a.r_hi * dt), np.full(h - 1, -a.r_lo * dt)]
        labels += [f"{tag}.ramp_up[{t + 1}]" for t in range(h - 1)] + [f"{tag}.ramp_down[{t + 1}]" for t in range(h - 1)]
    if p_prev is not None:
        first = np.zeros((2, h))
        first[0, 0], first[1, 0] = 1.0, -1.0
        rows.append(first)
        rhs.append(np.array([a.r_hi * dt + p_prev, -a.r_lo * dt - p_prev]))
        labels += [f"{tag}.ramp_up[0]", f"{tag}.ramp_down[0]"]
    q, c, const = None, cost.copy(), 0.0
    if inner and a.c > 0:
        q = 2.0 * a.c * np.eye(h)
        c = c - 2.0 * a.c * expect
        const = a.c * float(expect @ expect)
    prog = Program(
        c=c,
        q=q,
        a_ineq=np.vstack(rows) if rows else None,
        b_ineq=np.concatenate(rhs) if rhs else None,
        lb=np.full(h, a.p_lo),
        ub=np.full(h, a.p_hi),
        ineq_labels=labels or None,
    )
    return prog, const


def _block_diag(progs: list[Program]) -> tuple[Program, list[slice]]:
    n = sum(p.n for p in progs)
    slices, start = [], 0
    for p in progs:
        slices.append(slice(start, start + p.n))
        start += p.n
    q = np.zeros((n, n))
    a_in, a_eq = [], []
    for p, sl in zip(progs, slices):
        if p.q is not None:
            q[sl, sl] = p.q
        blk = np.zeros((p.b_ineq.size, n))
        blk[:, sl] = p.a_ineq
        a_in.append(blk)
        blk = np.zeros((p.b_eq.size, n))
        blk[:, sl] = p.a_eq
        a_eq.append(blk)
    joint = Program(
        c=np.concatenate([p.c for p in progs]),
        q=q,
        a_ineq=np.vstack(a_in),
        b_ineq=np.concatenate([p.b_ineq for p in progs]),
        a_eq=np.vstack(a_eq),
        b_eq=np.concatenate([p.b_eq for p in progs]),
        lb=np.concatenate([p.lb for p in progs]),
        ub=np.concatenate([p.ub for p in progs]),
        ineq_labels=sum((p.ineq_labels for p in progs), []),
        eq_labels=sum((p.eq_labels for p in progs), []),
    )
    return joint, slices


def _solve_components(named: list[tuple[str, Program]], opts: ForwardOptions) -> list[Solution]:
    if not named:
        return []
    if opts.decompose:
        sols = []
        for name, prog in named:
            sol = solve(prog, opts.tol_feas, opts.tol_opt)
            if not sol.ok:
                raise InfeasibleResponseError(name, sol.infeasible_rows or (sol.status.value,))
            sols.append(sol)
        return sols
    joint, slices = _block_diag([p for _, p in named])
    sol = solve(joint, opts.tol_feas, opts.tol_opt)
    if not sol.ok:
        raise InfeasibleResponseError("aggregate", sol.infeasible_rows or (sol.status.value,))
    return [Solution(sol.x[sl], named[k][1].objective(sol.x[sl]), sol.status) for k, sl in enumerate(slices)]


def _check(model: AggregateModel):
    report = validate_model(model)
    if not report.ok:
        raise ModelError(f"invalid model:\n{report}")


def _uses_inner(model: AggregateModel, mode: str) -> bool:
    return mode.endswith("_ext") and any(a.c > 0 for a in model.adjustables)


def extended_objective_terms(model: AggregateModel, p_adj: Sequence[Sequence[float]]) -> float:
    """Inner cost ``sum_j c_j * ||P_adj_j - P_expect_j||^2``."""
    total = 0.0
    for a, p in zip(model.adjustables, p_adj):
        if a.c == 0:
            continue
        dev = np.asarray(p, dtype=float) - np.asarray(a.p_expect, dtype=float)
        total += a.c * float(dev @ dev)
    return total


# --- static -------------------------------------------------------------------

def solve_static_response(model: AggregateModel, prices: PriceSignal, options: ForwardOptions | None = None,
                          inner_cost: bool = False) -> ResponseResult:
    """Minimize forecast purchase cost over one decision cycle with storage returning to ``e0``."""
    opts = options or ForwardOptions()
    _check(model)
    T, dt = model.T, model.grid.dt
    lam = prices.lam_hat if opts.use_forecast else prices.lam
    if lam.size != T:
        raise ValueError(f"price length {lam.size} != T={T}")
    named = []
    for j, a in enumerate(model.adjustables):
        expect = np.asarray(a.p_expect, dtype=float) if a.p_expect else np.zeros(T)
        named.append((f"adjustables[{j}]", _adjustable_program(j, a, lam, dt, None, inner_cost, expect)[0]))
    for i, s in enumerate(model.storages):
        named.append((f"storages[{i}]", _storage_program(i, s, lam, dt, s.e0, periodic=True)[0]))
    sols = _solve_components(named, opts)
    n_adj = len(model.adjustables)
    p_adj = np.array([s.x for s in sols[:n_adj]]).reshape(n_adj, T)
    p_str = np.array([s.x for s in sols[n_adj:]]).reshape(len(model.storages), T)
    return _result(model, p_adj, p_str, lam, inner_cost)


def _result(model, p_adj, p_str, lam, inner_cost) -> ResponseResult:
    fixed = np.asarray(model.fixed, dtype=float)
    p_agg = fixed + p_adj.sum(axis=0) + p_str.sum(axis=0)
    e_str = np.array([energy_trajectory(s, p, model.grid.dt) for s, p in zip(model.storages, p_str)])
    e_str = e_str.reshape(len(model.storages), model.T)
    obj = float(lam @ p_agg)
    if inner_cost:
        obj += extended_objective_terms(model, p_adj)
    return ResponseResult(p_agg, fixed, p_adj, p_str, e_str, obj)


# --- dynamic ------------------------------------------------------------------

def initial_state(model: AggregateModel) -> DynamicState:
    return DynamicState(0, tuple(s.e0 for s in model.storages), None)


def solve_dynamic_step(model: AggregateModel, state: DynamicState, window: Sequence[float], t_dc: int, t_ph: int,
                       options: ForwardOptions | None = None, inner_cost: bool = False) -> tuple[StepDecision, DynamicState]:
    """One rolling-horizon epoch: decide ``t_dc`` periods, credit terminal energy at the window's tail average."""
    opts = options or ForwardOptions()
    window = np.asarray(window, dtype=float)
    if not (1 <= t_dc < t_ph <= window.size):
        raise ValueError(f"need 1 <= t_dc < t_ph <= len(window); got t_dc={t_dc}, t_ph={t_ph}, len={window.size}")
    dt = model.grid.dt
    lam_dy = window[:t_dc]
    lam_ave = float(np.mean(window[t_dc:t_ph]))
    named, consts = [], 0.0
    for j, a in enumerate(model.adjustables):
        expect = None
        if inner_cost and a.c > 0:
            expect = np.take(np.asarray(a.p_expect, dtype=float), range(state.t, state.t + t_dc), mode="wrap")
        prev = None if state.p_adj_last is None else state.p_adj_last[j]
        prog, const = _adjustable_program(j, a, lam_dy, dt, prev, inner_cost, expect)
        named.append((f"adjustables[{j}]", prog))
        consts += const
    for i, s in enumerate(model.storages):
        prog, const = _storage_program(i, s, lam_dy, dt, state.e[i], periodic=False, terminal_price=lam_ave)
        named.append((f"storages[{i}]", prog))
        consts += const
    sols = _solve_components(named, opts)
    n_adj = len(model.adjustables)
    p_adj = np.array([s.x for s in sols[:n_adj]]).reshape(n_adj, t_dc)
    p_str = np.array([s.x for s in sols[n_adj:]]).reshape(len(model.storages), t_dc)
    e_next = tuple(
        float(energy_trajectory(StorageParams(s.p_lo, s.p_hi, s.e_lo, s.e_hi, state.e[i], s.sigma), p_str[i], dt)[-1])
        for i, s in enumerate(model.storages)
    )
    fixed_part = float(lam_dy @ np.take(np.asarray(model.fixed), range(state.t, state.t + t_dc), mode="wrap"))
    objective = sum(s.objective for s in sols) + consts + fixed_part
    last = tuple(float(p[-1]) for p in p_adj) if n_adj else None
    return StepDecision(p_adj, p_str, objective), DynamicState(state.t + t_dc, e_next, last)


def simulate_dynamic_day(model: AggregateModel, prices: PriceSignal, t_dc: int | None = None, t_ph: int | None = None,
                         options: ForwardOptions | None = None, inner_cost: bool = False) -> ResponseResult:
    """Roll ``solve_dynamic_step`` across the day; forecast windows past the end wrap around."""
    opts = options or ForwardOptions()
    _check(model)
    t_dc = opts.t_dc if t_dc is None else t_dc
    t_ph = opts.t_ph if t_ph is None else t_ph
    T = model.T
    series = prices.lam_hat if opts.use_forecast else prices.lam
    if series.size < T:
        raise ValueError(f"price series length {series.size} < T={T}")
    state = initial_state(model)
    p_adj = np.zeros((len(model.adjustables), T))
    p_str = np.zeros((len(model.storages), T))
    while state.t < T:
        h = min(t_dc, T - state.t)
        window = np.take(series, range(state.t, state.t + max(t_ph, h + 1)), mode="wrap")
        dec, nxt = solve_dynamic_step(model, state, window, h, max(t_ph, h + 1), opts, inner_cost)
        p_adj[:, state.t:state.t + h] = dec.p_adj
        p_str[:, state.t:state.t + h] = dec.p_str
        state = nxt
    return _result(model, p_adj, p_str, series[:T], inner_cost)


def respond(model: AggregateModel, prices: PriceSignal, mode: str = "static",
            options: ForwardOptions | None = None) -> ResponseResult:
    """Dispatch to the forward problem for ``mode`` (one of ``MODES``)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    inner = _uses_inner(model, mode)
    if mode.startswith("static"):
        return solve_static_response(model, prices, options, inner_cost=inner)
    return simulate_dynamic_day(model, prices, options=options, inner_cost=inner)
