"""Synthetic fleets, price series and observation datasets."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .forward import ForwardOptions, PriceSignal, respond
from .identify import NoiseSpec, ResponseSample, apply_noise
from .model import AdjustableParams, AggregateModel, ModelError, StorageParams, TimeGrid, validate_model

Range = tuple[float, float]


@dataclass(frozen=True)
class FleetSpec:
    n_storage: int = 50
    n_generators: int = 5
    n_interruptible: int = 5
    T: int = 24
    dt: float = 1.0
    storage_p_lo: Range = (-18.0, -6.0)
    storage_p_hi: Range = (4.0, 16.0)
    storage_e_hi: Range = (8.0, 64.0)
    storage_e_lo_ratio: Range = (0.10, 0.15)  # fraction of e_hi
    storage_sigma: Range = (0.85, 1.0)
    gen_p_lo: Range = (3.0, 5.0)
    gen_p_hi: Range = (10.0, 15.0)
    gen_ramp: Range = (2.0, 3.0)
    int_p_lo: Range = (1.0, 3.0)
    int_p_hi: Range = (5.0, 10.0)
    fixed_band: Range = (400.0, 600.0)
    constant_fixed: bool = False
    seed: int = 1

    def violations(self) -> list[str]:
        out = []
        for name in ("n_storage", "n_generators", "n_interruptible"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0")
        if self.T < 1:
            out.append("T: must be >= 1")
        if not self.dt > 0:
            out.append("dt: must be > 0")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and not v[0] <= v[1]:
                out.append(f"{f.name}: lo {v[0]} exceeds hi {v[1]}")
        lo, hi = self.storage_sigma
        if not (0 < lo and hi <= 1):
            out.append("storage_sigma: must lie in (0, 1]")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FleetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown fleet spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _u(rng: np.random.Generator, r: Range) -> float:
    return float(rng.uniform(r[0], r[1]))


def sample_storage(spec: FleetSpec, rng: np.random.Generator) -> StorageParams:
    """Draw one storage unit; ``e0`` is capped so holding it constant is feasible (losses < 0.9 p_hi)."""
    p_lo, p_hi = _u(rng, spec.storage_p_lo), _u(rng, spec.storage_p_hi)
    e_hi = _u(rng, spec.storage_e_hi)
    e_lo = _u(rng, spec.storage_e_lo_ratio) * e_hi
    sigma = _u(rng, spec.storage_sigma)
    e0 = _u(rng, (e_lo, e_hi))
    if sigma < 1.0 and p_hi > 0:
        e0 = min(e0, 0.9 * p_hi * spec.dt / (1.0 - sigma))
    return StorageParams(p_lo, p_hi, e_lo, e_hi, max(e0, e_lo), sigma)


def sample_fleet(spec: FleetSpec, rng: np.random.Generator | None = None) -> AggregateModel:
    bad = spec.violations()
    if bad:
        raise ValueError("invalid fleet spec: " + "; ".join(bad))
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    adjustables = []
    for _ in range(spec.n_generators):
        r = _u(rng, spec.gen_ramp)
        adjustables.append(AdjustableParams(_u(rng, spec.gen_p_lo), _u(rng, spec.gen_p_hi), -r, r))
    for _ in range(spec.n_interruptible):
        lo, hi = _u(rng, spec.int_p_lo), _u(rng, spec.int_p_hi)
        span = (hi - lo) / spec.dt  # ramp limits that can never bind
        adjustables.append(AdjustableParams(lo, hi, -span, span))
    storages = [sample_storage(spec, rng) for _ in range(spec.n_storage)]
    if spec.constant_fixed:
        fixed = np.full(spec.T, _u(rng, spec.fixed_band))
    else:
        fixed = rng.uniform(spec.fixed_band[0], spec.fixed_band[1], spec.T)
    model = AggregateModel(TimeGrid(spec.T, spec.dt), tuple(fixed), tuple(adjustables), tuple(storages))
    report = validate_model(model)
    if not report.ok:  # pragma: no cover - sampling rules keep every invariant
        raise ModelError(f"sampled fleet is invalid:\n{report}")
    return model


# --- prices ---------------------------------------------------------------------

PRICE_KINDS = ("synthetic_tou", "synthetic_rt", "csv")


@dataclass(frozen=True)
class PriceSpec:
    kind: str = "synthetic_rt"
    levels: tuple[float, ...] = (0.08, 0.15, 0.30)  # $/kWh, time-of-use block prices
    mean: float = 0.15  # $/kWh, real-time daily mean
    amplitude: float = 0.06  # daily swing of the real-time base shape
    volatility: float = 0.03  # per-period real-time noise sd
    forecast_error_sd: float = 0.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in PRICE_KINDS:
            raise ValueError(f"unknown price kind {self.kind!r}; expected one of {PRICE_KINDS}")
        if self.kind == "csv" and not self.path:
            raise ValueError("csv price spec needs a path")
        if self.kind == "synthetic_tou" and not self.levels:
            raise ValueError("time-of-use price spec needs levels")
        if self.forecast_error_sd < 0 or self.volatility < 0:
            raise ValueError("standard deviations must be >= 0")
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))

    @classmethod
    def from_dict(cls, data: dict) -> "PriceSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _tou_day(levels: Sequence[float], T: int, rng: np.random.Generator) -> np.ndarray:
    n_blocks = min(3, T)
    cuts = np.sort(rng.choice(np.arange(1, T), size=n_blocks - 1, replace=False)) if n_blocks > 1 else []
    order = rng.permutation(len(levels))
    lam = np.empty(T)
    for b, seg in enumerate(np.split(np.arange(T), cuts)):
        lam[seg] = levels[order[b % len(levels)]]
    return lam


def _rt_day(spec: PriceSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    phase = rng.uniform(0, T)
    base = spec.mean + spec.amplitude * np.sin(2 * np.pi * (np.arange(T) - phase) / T)
    return np.maximum(base + spec.volatility * rng.standard_normal(T), 0.005)


def generate_prices(spec: PriceSpec, T: int, days: int, rng: np.random.Generator) -> list[PriceSignal]:
    if T < 1 or days < 1:
        raise ValueError("T and days must be >= 1")
    if spec.kind == "csv":
        out = load_prices_csv(spec.path)
        if len(out) < days or any(p.lam.size != T for p in out[:days]):
            raise ValueError(f"{spec.path}: need {days} days of length {T}")
        return out[:days]
    out = []
    for _ in range(days):
        if spec.kind == "synthetic_tou":
            out.append(PriceSignal.known(_tou_day(spec.levels, T, rng)))
        else:
            lam = _rt_day(spec, T, rng)
            err = spec.forecast_error_sd * rng.standard_normal(T) if spec.forecast_error_sd > 0 else 0.0
            out.append(PriceSignal(lam, lam + err))
    return out


def load_prices_csv(path) -> list[PriceSignal]:
    """Parse ``day,t,lambda[,lambda_hat]`` rows; ``t`` counts from 0 within each day."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header not in (["day", "t", "lambda"], ["day", "t", "lambda", "lambda_hat"]):
            raise ValueError(f"{path}:1: expected header day,t,lambda[,lambda_hat], got {','.join(header)}")
        days: dict[int, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                day, t = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite price")
            rows = days.setdefault(day, [])
            if t != len(rows):
                raise ValueError(f"{path}:{lineno}: day {day} expected t={len(rows)}, got {t}")
            rows.append(vals)
    if not days:
        raise ValueError(f"{path}: no price rows")
    out = []
    for day in sorted(days):
        a = np.array(days[day])
        out.append(PriceSignal(a[:, 0], a[:, 1] if a.shape[1] > 1 else a[:, 0].copy()))
    return out


def save_prices_csv(prices: Sequence[PriceSignal], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "t", "lambda", "lambda_hat"])
        for d, p in enumerate(prices):
            for t in range(p.lam.size):
                w.writerow([d, t, format(float(p.lam[t]), ".17g"), format(float(p.lam_hat[t]), ".17g")])


# --- datasets -------------------------------------------------------------------

def synthesize_dataset(model: AggregateModel, prices: Sequence[PriceSignal], noise: NoiseSpec | None,
                       mode: str = "static", options: ForwardOptions | None = None,
                       rng: np.random.Generator | None = None) -> list[ResponseSample]:
    """True responses per day, then observation and fixed-load prediction noise.

    An infeasible forward problem at the true parameters propagates as an error.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    fixed = np.asarray(model.fixed, dtype=float)
    out = []
    for p in prices:
        p_star = respond(model, p, mode, options).p_agg
        clean = ResponseSample(p, p_star, fixed, p_star, fixed)
        out.append(apply_noise(clean, noise, rng) if noise is not None else clean)
    return out
