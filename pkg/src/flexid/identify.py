"""Parameter identification from observed aggregate responses, plus its metrics.

The identification objective replays every observed day through the forward
problem of a candidate surrogate and averages the squared l2 mismatch.  It is
minimized by the Bayesian optimizer over the unit-scaled parameter box.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bayopt import OptBudget, OptTrace, optimize
from .forward import MODES, ForwardOptions, InfeasibleResponseError, PriceSignal, respond
from .gp import GPState, posterior_batch
from .model import AggregateModel, ModelError, ThetaVector, unflatten_theta, validate_model

DATASET_COLUMNS = ("day", "t", "lambda", "lambda_hat", "p_obs", "p_fix_pred")
VARIANCE_FLOOR = 1e-6


class InfeasibleThetaError(ValueError):
    """The candidate parameters give an invalid model or an infeasible forward problem."""


@dataclass(frozen=True)
class ResponseSample:
    prices: PriceSignal
    p_obs: np.ndarray
    p_fix_pred: np.ndarray
    p_true: np.ndarray | None = None  # noise-free aggregate response, when known
    p_fix_true: np.ndarray | None = None

    def __post_init__(self):
        T = self.prices.lam.size
        for name in ("p_obs", "p_fix_pred", "p_true", "p_fix_true"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if v.shape != (T,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite with length {T}")
            object.__setattr__(self, name, v)

    @property
    def T(self) -> int:
        return self.prices.lam.size

    @property
    def truth(self) -> np.ndarray:
        return self.p_true if self.p_true is not None else self.p_obs


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian errors on the observed aggregate and on the fixed-load prediction.

    With ``proportional_factor`` set, both errors are independent per period
    with variance ``factor * |P_t|`` (floored at 1e-6) and the covariance
    matrices are ignored; the means still apply.
    """

    mu_agg: np.ndarray
    mu_fix: np.ndarray
    sigma_agg: np.ndarray
    sigma_fix: np.ndarray
    proportional_factor: float | None = None

    def __post_init__(self):
        T = np.asarray(self.mu_agg).size
        for name in ("mu_agg", "mu_fix"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (T,):
                raise ValueError(f"{name} must have length {T}")
            object.__setattr__(self, name, v)
        for name in ("sigma_agg", "sigma_fix"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (T, T):
                raise ValueError(f"{name} must be {T}x{T}")
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
            w = np.linalg.eigvalsh(m)
            if w.size and w.min() < -1e-10 * max(1.0, abs(w).max()):
                raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
            object.__setattr__(self, name, m)
        if self.proportional_factor is not None and self.proportional_factor < 0:
            raise ValueError("proportional_factor must be >= 0")

    @property
    def T(self) -> int:
        return self.mu_agg.size

    @classmethod
    def zero(cls, T: int) -> "NoiseSpec":
        return cls(np.zeros(T), np.zeros(T), np.zeros((T, T)), np.zeros((T, T)))

    @classmethod
    def isotropic(cls, T: int, var_agg: float, var_fix: float) -> "NoiseSpec":
        return cls(np.zeros(T), np.zeros(T), var_agg * np.eye(T), var_fix * np.eye(T))

    @classmethod
    def proportional(cls, T: int, factor: float) -> "NoiseSpec":
        return cls(np.zeros(T), np.zeros(T), np.zeros((T, T)), np.zeros((T, T)), factor)

    def trace_total(self) -> float:
        return float(np.trace(self.sigma_agg) + np.trace(self.sigma_fix))

    def to_dict(self) -> dict:
        return {
            "mu_agg": self.mu_agg.tolist(), "mu_fix": self.mu_fix.tolist(),
            "sigma_agg": self.sigma_agg.tolist(), "sigma_fix": self.sigma_fix.tolist(),
            "proportional_factor": self.proportional_factor,
        }


@dataclass
class IdentResult:
    theta_hat: ThetaVector
    f_hat: float
    trace: OptTrace
    nrmse_train: float
    nrmse_test: float | None
    n_failed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "f_hat": self.f_hat,
            "nrmse_train": self.nrmse_train,
            "nrmse_test": self.nrmse_test,
            "evaluations": len(self.trace.iterations),
            "failed_evaluations": self.n_failed,
            **self.extra,
        }


# --- objective ------------------------------------------------------------------

def surrogate_response(template: AggregateModel, theta: ThetaVector, sample: ResponseSample, mode: str = "static",
                       options: ForwardOptions | None = None) -> np.ndarray:
    """Aggregate response of the surrogate at ``theta`` with the sample's prices and predicted fixed load."""
    try:
        model = unflatten_theta(theta, template).with_fixed(sample.p_fix_pred)
    except ModelError as exc:
        raise InfeasibleThetaError(str(exc)) from exc
    report = validate_model(model)
    if not report.ok:
        raise InfeasibleThetaError(f"invalid surrogate: {report}")
    try:
        return respond(model, sample.prices, mode, options).p_agg
    except InfeasibleResponseError as exc:
        raise InfeasibleThetaError(str(exc)) from exc


def identification_objective(samples: Sequence[ResponseSample], template: AggregateModel, theta: ThetaVector,
                             mode: str = "static", options: ForwardOptions | None = None) -> float:
    """Mean over samples of ``||p_obs - P_hat(theta)||^2``.

    Raises :class:`InfeasibleThetaError` when ``theta`` cannot be simulated.
    """
    if not samples:
        raise ValueError("need at least one sample")
    errs = np.array([
        float(np.sum((s.p_obs - surrogate_response(template, theta, s, mode, options)) ** 2)) for s in samples
    ])
    return float(np.sum(errs) / errs.size)


def nrmse(truth, est) -> float:
    """Root-mean-square deviation normalized by the range of ``truth``."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {est.shape}")
    rng = float(truth.max() - truth.min())
    if not rng > 0:
        raise ValueError("truth has zero range; NRMSE undefined")
    return math.sqrt(float(np.mean((truth - est) ** 2))) / rng


def beta_deviation(theta_nf: ThetaVector, theta_nd: ThetaVector, return_dropped: bool = False):
    """l2 distance between two parameter vectors after min-max scaling by their boxes.

    Coordinates whose box has zero width carry no information and are dropped.
    """
    if theta_nf.layout != theta_nd.layout:
        raise ValueError("parameter layouts differ")
    u = []
    for th in (theta_nf, theta_nd):
        span = th.box_hi - th.box_lo
        u.append((th.values - th.box_lo, span))
    keep = (u[0][1] > 0) & (u[1][1] > 0)
    dropped = [theta_nf.label(i) for i in np.flatnonzero(~keep)]
    if not keep.any():
        raise ValueError("all coordinates are degenerate")
    a = u[0][0][keep] / u[0][1][keep]
    b = u[1][0][keep] / u[1][1][keep]
    val = float(np.linalg.norm(a - b))
    return (val, dropped) if return_dropped else val


# --- noise ----------------------------------------------------------------------

def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _draw(mu: np.ndarray, cov: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if not np.any(cov):
        return np.broadcast_to(mu, (size, mu.size)).copy() if size else mu.copy()
    f = _sqrt_factor(cov)
    z = rng.standard_normal((size or 1, mu.size))
    out = mu + z @ f.T
    return out if size else out[0]


def apply_noise(sample: ResponseSample, spec: NoiseSpec, rng: np.random.Generator) -> ResponseSample:
    """Add observation noise to ``p_obs`` and prediction noise to ``p_fix_pred``.

    The clean values are kept as ``p_true`` / ``p_fix_true``.
    """
    if spec.T != sample.T:
        raise ValueError(f"noise spec has T={spec.T}, sample has T={sample.T}")
    clean_agg = sample.truth
    clean_fix = sample.p_fix_true if sample.p_fix_true is not None else sample.p_fix_pred
    if spec.proportional_factor is not None:
        var_a = np.maximum(spec.proportional_factor * np.abs(clean_agg), VARIANCE_FLOOR)
        var_f = np.maximum(spec.proportional_factor * np.abs(clean_fix), VARIANCE_FLOOR)
        e_agg = spec.mu_agg + np.sqrt(var_a) * rng.standard_normal(sample.T)
        e_fix = spec.mu_fix + np.sqrt(var_f) * rng.standard_normal(sample.T)
    else:
        e_agg = _draw(spec.mu_agg, spec.sigma_agg, rng)
        e_fix = _draw(spec.mu_fix, spec.sigma_fix, rng)
    return ResponseSample(sample.prices, clean_agg + e_agg, clean_fix + e_fix, clean_agg, clean_fix)


@dataclass(frozen=True)
class GapStats:
    n: int
    mean_gap: float
    se: float
    variance: float
    target: float

    @property
    def deviation(self) -> float:
        return self.mean_gap - self.target

    @property
    def within_3se(self) -> bool:
        return abs(self.deviation) <= 3 * self.se


def noise_gap_experiment(model: AggregateModel, spec: NoiseSpec, sample_counts: Sequence[int], trials: int,
                         rng: np.random.Generator, prices: Sequence[PriceSignal], mode: str = "static",
                         options: ForwardOptions | None = None) -> list[GapStats]:
    """Monte-Carlo gap ``f_noisy(theta*) - f_clean(theta*)`` at the true parameters.

    Day ``n`` uses ``prices[n % len(prices)]``.  The fixed profile enters the
    aggregate additively and does not influence the flexible decisions, so the
    flexible part of each day's response is solved once and reused with every
    noisy fixed-load prediction.  The target is ``tr(S_agg + S_fix)`` plus the
    squared mean offset ``||mu_agg - mu_fix||^2`` (zero for centred noise).
    """
    if not prices:
        raise ValueError("need at least one price day")
    fixed = np.asarray(model.fixed, dtype=float)
    flex = np.array([respond(model, p, mode, options).p_agg - fixed for p in prices])
    target = spec.trace_total() + float(np.sum((spec.mu_agg - spec.mu_fix) ** 2))
    T = model.T
    f_agg = _sqrt_factor(spec.sigma_agg)
    f_fix = _sqrt_factor(spec.sigma_fix)
    out = []
    for n in sample_counts:
        p_flex = flex[np.arange(n) % len(prices)]  # (n, T)
        p_star = p_flex + fixed
        f_nf = float(np.mean(np.sum((p_star - (p_flex + fixed)) ** 2, axis=1)))
        gaps = np.empty(trials)
        for k in range(trials):
            p_obs = p_star + spec.mu_agg + rng.standard_normal((n, T)) @ f_agg.T
            p_fix_pred = fixed + spec.mu_fix + rng.standard_normal((n, T)) @ f_fix.T
            f_nd = float(np.mean(np.sum((p_obs - (p_flex + p_fix_pred)) ** 2, axis=1)))
            gaps[k] = f_nd - f_nf
        var = float(np.var(gaps, ddof=1)) if trials > 1 else 0.0
        out.append(GapStats(int(n), float(gaps.mean()), math.sqrt(var / trials), var, target))
    return out


def gap_variance_slope(stats: Sequence[GapStats]) -> float:
    """Least-squares slope of log(variance) against log(N)."""
    x = np.log([s.n for s in stats])
    y = np.log([s.variance for s in stats])
    return float(np.polyfit(x, y, 1)[0])


def save_gap_csv(stats: Sequence[GapStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "mean_gap", "se", "variance", "target", "deviation", "three_se"])
        for s in stats:
            w.writerow([s.n, *(format(v, ".17g") for v in (s.mean_gap, s.se, s.variance, s.target, s.deviation, 3 * s.se))])


# --- identification -------------------------------------------------------------

def repair_theta(theta: ThetaVector) -> ThetaVector:
    """Enforce the ordering constraints that are checkable without solving anything.

    Per component, lower bounds are capped at upper bounds and a storage's
    ``e0`` is clipped into ``[e_lo, e_hi]``; the result is clipped back into the
    box.  Parameters absent from the layout are left to the template.
    """
    vals = theta.values.copy()
    pos = {(k, i, n): j for j, (k, i, n) in enumerate(theta.layout)}
    for (kind, idx, name), j in pos.items():
        if name in ("p_lo", "e_lo", "r_lo"):
            hi = pos.get((kind, idx, name[:-2] + "hi"))
            if hi is not None:
                vals[j] = min(vals[j], vals[hi])
    for (kind, idx, name), j in pos.items():
        if kind == "storage" and name == "e0":
            lo, hi = pos.get((kind, idx, "e_lo")), pos.get((kind, idx, "e_hi"))
            if lo is not None:
                vals[j] = max(vals[j], vals[lo])
            if hi is not None:
                vals[j] = min(vals[j], vals[hi])
    return theta.with_values(np.clip(vals, theta.box_lo, theta.box_hi))

def identify(samples_train: Sequence[ResponseSample], samples_test: Sequence[ResponseSample] | None,
             template: AggregateModel, box: ThetaVector, budget: OptBudget, mode: str = "static",
             rng: np.random.Generator | None = None, options: ForwardOptions | None = None,
             initial_thetas: Sequence[ThetaVector] = (), repair: bool = True,
             log_offset: float | None = 1e-3) -> IdentResult:
    """Fit the surrogate parameters laid out by ``box`` to the training samples.

    ``box`` supplies the layout and the search bounds (its values are ignored).
    With ``repair`` every candidate passes through :func:`repair_theta` first,
    so only genuinely infeasible forward problems count as failures.  With
    ``log_offset`` the optimizer sees ``log(f + log_offset)``, a monotone
    transform that keeps the minimizer but compresses the dynamic range the
    GP has to model.
    """
    if not samples_train:
        raise ValueError("training set is empty")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")

    def decode(u: np.ndarray) -> ThetaVector:
        th = box.from_unit(u)
        return repair_theta(th) if repair else th

    def objective(u: np.ndarray) -> float:
        f = identification_objective(samples_train, template, decode(u), mode, options)
        return math.log(f + log_offset) if log_offset else f

    trace = optimize(objective, len(box), budget, rng=rng,
                     initial_points=[t.to_unit() for t in initial_thetas])
    if trace.best_theta is None:
        raise InfeasibleThetaError("no candidate parameters could be simulated")
    theta_hat = decode(trace.best_theta)
    f_hat = identification_objective(samples_train, template, theta_hat, mode, options)

    def score(samples):
        truth = np.array([s.truth for s in samples])
        est = np.array([surrogate_response(template, theta_hat, s, mode, options) for s in samples])
        return nrmse(truth, est)

    nrmse_test = score(samples_test) if samples_test else None
    return IdentResult(theta_hat, f_hat, trace, score(samples_train), nrmse_test, trace.n_failed)


# --- identifiability slices -----------------------------------------------------

@dataclass
class SliceGrid:
    dims: tuple[int, ...]
    coords: np.ndarray  # (m, len(dims)) unit-cube coordinates
    mean: np.ndarray
    sd: np.ndarray
    names: tuple[str, ...] = ()

    def to_csv(self, path) -> None:
        names = self.names or tuple(f"u{d}" for d in self.dims)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*names, "mean", "sd"])
            for c, m, s in zip(self.coords, self.mean, self.sd):
                w.writerow([*(format(v, ".17g") for v in c), format(m, ".17g"), format(s, ".17g")])


def posterior_slice(state: GPState, dims: Sequence[int], grid_resolution: int, fixed_point,
                    names: Sequence[str] = ()) -> SliceGrid:
    """GP posterior on a regular grid over one or two unit-cube coordinates, others held at ``fixed_point``."""
    dims = tuple(int(d) for d in dims)
    d = state.x.shape[1]
    if len(dims) not in (1, 2) or len(set(dims)) != len(dims) or any(not 0 <= k < d for k in dims):
        raise ValueError(f"dims must be 1 or 2 distinct indices in [0, {d})")
    base = np.asarray(fixed_point, dtype=float)
    if base.shape != (d,):
        raise ValueError(f"fixed_point must have length {d}")
    axis = np.linspace(0.0, 1.0, grid_resolution)
    mesh = np.meshgrid(*([axis] * len(dims)), indexing="ij")
    coords = np.column_stack([m.ravel() for m in mesh])
    pts = np.tile(base, (coords.shape[0], 1))
    pts[:, dims] = coords
    mean, var = posterior_batch(state, pts)
    return SliceGrid(dims, coords, mean, np.sqrt(var), tuple(names))


# --- files ----------------------------------------------------------------------

def save_dataset(samples: Sequence[ResponseSample], path) -> None:
    """Write samples as long-format CSV; a ``p_true`` column is added when every sample carries it."""
    with_truth = bool(samples) and all(s.p_true is not None for s in samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*DATASET_COLUMNS, *(["p_true"] if with_truth else [])])
        for d, s in enumerate(samples):
            for t in range(s.T):
                row = [d, t] + [format(float(v), ".17g") for v in
                                (s.prices.lam[t], s.prices.lam_hat[t], s.p_obs[t], s.p_fix_pred[t])]
                if with_truth:
                    row.append(format(float(s.p_true[t]), ".17g"))
                w.writerow(row)


def load_dataset(path) -> list[ResponseSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:6]) != DATASET_COLUMNS:
            raise ValueError(f"{path}: expected header starting with {','.join(DATASET_COLUMNS)}")
        with_truth = len(header) > 6 and header[6] == "p_true"
        days: dict[int, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                day, t = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            rows = days.setdefault(day, [])
            if t != len(rows):
                raise ValueError(f"{path}:{lineno}: day {day} expected t={len(rows)}, got {t}")
            rows.append(vals)
    out = []
    for day in sorted(days):
        a = np.array(days[day])
        out.append(ResponseSample(PriceSignal(a[:, 0], a[:, 1]), a[:, 2], a[:, 3], a[:, 4] if with_truth else None))
    return out


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True))
