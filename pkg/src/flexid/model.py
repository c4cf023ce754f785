"""Aggregate flexible-load model: component types, constraint builders, parameter vectors.

The aggregate is a fixed power profile plus any number of adjustable-power
components (generators, interruptible loads) and storage components.  All
types are frozen dataclasses; operations are pure functions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STORAGE_PARAMS = ("p_lo", "p_hi", "e_lo", "e_hi", "e0", "sigma")
ADJUSTABLE_PARAMS = ("p_lo", "p_hi", "r_lo", "r_hi")


class ModelError(ValueError):
    """Raised for malformed model data or inconsistent parameter layouts."""


@dataclass(frozen=True)
class TimeGrid:
    T: int
    dt: float = 1.0


@dataclass(frozen=True)
class StorageParams:
    p_lo: float
    p_hi: float
    e_lo: float
    e_hi: float
    e0: float
    sigma: float = 1.0


@dataclass(frozen=True)
class AdjustableParams:
    p_lo: float
    p_hi: float
    r_lo: float
    r_hi: float
    c: float = 0.0
    p_expect: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "p_expect", tuple(float(v) for v in self.p_expect))


@dataclass(frozen=True)
class AggregateModel:
    grid: TimeGrid
    fixed: tuple[float, ...]
    adjustables: tuple[AdjustableParams, ...] = ()
    storages: tuple[StorageParams, ...] = ()

    def __post_init__(self):
        # accept lists/arrays from callers, store tuples so instances stay hashable
        object.__setattr__(self, "fixed", tuple(float(v) for v in self.fixed))
        object.__setattr__(self, "adjustables", tuple(self.adjustables))
        object.__setattr__(self, "storages", tuple(self.storages))

    @property
    def T(self) -> int:
        return self.grid.T

    def with_fixed(self, fixed: Sequence[float]) -> "AggregateModel":
        return replace(self, fixed=tuple(float(v) for v in fixed))


@dataclass(frozen=True)
class ThetaVector:
    """Flat, box-bounded parameter vector with a (component, name) layout."""

    values: np.ndarray
    layout: tuple[tuple[str, int, str], ...]
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __post_init__(self):
        for name in ("values", "box_lo", "box_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.layout)
        if not (self.values.shape == self.box_lo.shape == self.box_hi.shape == (n,)):
            raise ModelError("values, box_lo, box_hi and layout must have equal length")
        if np.any(self.box_lo > self.box_hi):
            raise ModelError("box_lo must not exceed box_hi")
        outside = (self.values < self.box_lo) | (self.values > self.box_hi)
        if np.any(outside):
            bad = [self.label(i) for i in np.flatnonzero(outside)]
            raise ModelError(f"theta outside search box at {bad}")

    def __len__(self):
        return len(self.layout)

    def label(self, i: int) -> str:
        kind, idx, name = self.layout[i]
        return f"{kind}[{idx}].{name}"

    def to_unit(self) -> np.ndarray:
        span = self.box_hi - self.box_lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (self.values - self.box_lo) / safe, 0.0)

    def from_unit(self, u: np.ndarray) -> "ThetaVector":
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        vals = self.box_lo + u * (self.box_hi - self.box_lo)
        # guard against round-off pushing values a hair outside the box
        vals = np.clip(vals, self.box_lo, self.box_hi)
        return replace(self, values=vals)

    def with_values(self, values: np.ndarray) -> "ThetaVector":
        return replace(self, values=np.asarray(values, dtype=float))

    def to_dict(self) -> dict:
        return {
            "layout": [list(item) for item in self.layout],
            "values": self.values.tolist(),
            "box_lo": self.box_lo.tolist(),
            "box_hi": self.box_hi.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThetaVector":
        layout = tuple((str(k), int(i), str(n)) for k, i, n in data["layout"])
        return cls(np.array(data["values"]), layout, np.array(data["box_lo"]), np.array(data["box_hi"]))


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(f"{path}: {msg}" for path, msg in self.violations)


def _finite(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and math.isfinite(x)


def validate_model(model: AggregateModel) -> ValidationReport:
    """Check every model invariant and report violations with stable paths."""
    out: list[tuple[str, str]] = []
    T, dt = model.grid.T, model.grid.dt
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        out.append(("grid.T", f"must be a positive integer, got {T!r}"))
        T = None
    if not (_finite(dt) and dt > 0):
        out.append(("grid.dt", f"must be positive, got {dt!r}"))
    if T is not None and len(model.fixed) != T:
        out.append(("fixed", f"length {len(model.fixed)} != T={T}"))
    if not all(math.isfinite(v) for v in model.fixed):
        out.append(("fixed", "contains non-finite values"))

    for i, s in enumerate(model.storages):
        p = f"storages[{i}]"
        bad = [name for name in STORAGE_PARAMS if not _finite(getattr(s, name))]
        out.extend((f"{p}.{name}", "must be finite") for name in bad)
        if not bad:
            if s.p_lo > s.p_hi:
                out.append((f"{p}.p_lo", f"p_lo={s.p_lo} exceeds p_hi={s.p_hi}"))
            if s.e_lo > s.e_hi:
                out.append((f"{p}.e_lo", f"e_lo={s.e_lo} exceeds e_hi={s.e_hi}"))
            elif not (s.e_lo <= s.e0 <= s.e_hi):
                out.append((f"{p}.e0", f"e0={s.e0} outside [{s.e_lo}, {s.e_hi}]"))
            if not (0.0 < s.sigma <= 1.0):
                out.append((f"{p}.sigma", f"sigma={s.sigma} outside (0, 1]"))

    for j, a in enumerate(model.adjustables):
        p = f"adjustables[{j}]"
        for name in ("p_lo", "p_hi", "r_lo", "r_hi", "c"):
            if not _finite(getattr(a, name)):
                out.append((f"{p}.{name}", "must be finite"))
        if a.p_lo > a.p_hi:
            out.append((f"{p}.p_lo", f"p_lo={a.p_lo} exceeds p_hi={a.p_hi}"))
        if a.r_lo > a.r_hi:
            out.append((f"{p}.r_lo", f"r_lo={a.r_lo} exceeds r_hi={a.r_hi}"))
        if a.c < 0:
            out.append((f"{p}.c", f"inner-cost coefficient must be >= 0, got {a.c}"))
        if T is not None and a.p_expect and len(a.p_expect) != T:
            out.append((f"{p}.p_expect", f"length {len(a.p_expect)} != T={T}"))
        if a.c > 0 and not a.p_expect:
            out.append((f"{p}.p_expect", "required when c > 0"))
    return ValidationReport(tuple(out))


def build_storage_propagators(sigma: float, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gamma, upsilon)`` with ``E = gamma*e0 + upsilon @ P * dt``.

    ``gamma[t-1] = sigma**t`` and ``upsilon[t, k] = sigma**(t-k)`` for ``k <= t``.
    """
    if not (0.0 < sigma <= 1.0):
        raise ModelError(f"sigma must lie in (0, 1], got {sigma}")
    if T < 1:
        raise ModelError(f"T must be >= 1, got {T}")
    k = np.arange(1, T + 1, dtype=float)
    gamma = sigma ** k
    lag = np.subtract.outer(k, k)
    upsilon = np.where(lag >= 0, sigma ** np.maximum(lag, 0.0), 0.0)
    return gamma, upsilon


def energy_trajectory(s: StorageParams, p_str: Sequence[float], dt: float, T: int | None = None) -> np.ndarray:
    p = np.asarray(p_str, dtype=float)
    if p.ndim != 1 or (T is not None and p.shape[0] != T):
        raise ModelError(f"power profile has length {p.shape}, expected {T}")
    gamma, upsilon = build_storage_propagators(s.sigma, p.shape[0])
    return gamma * s.e0 + upsilon @ p * dt


def build_difference_matrix(T: int) -> np.ndarray:
    """(T-1) x T first-difference matrix: ``(M @ P)[k] = P[k+1] - P[k]``."""
    if T < 2:
        raise ModelError(f"difference matrix needs T >= 2, got {T}")
    m = np.zeros((T - 1, T))
    idx = np.arange(T - 1)
    m[idx, idx] = -1.0
    m[idx, idx + 1] = 1.0
    return m


# --- parameter vectors ------------------------------------------------------

def _normalize_selection(selection: Iterable[str] | None) -> tuple[set[str], set[str]]:
    if selection is None:
        return set(STORAGE_PARAMS), set(ADJUSTABLE_PARAMS)
    sel = set(selection)
    unknown = sel - set(STORAGE_PARAMS) - set(ADJUSTABLE_PARAMS)
    if unknown:
        raise ModelError(f"unknown parameter names in selection: {sorted(unknown)}")
    return sel & set(STORAGE_PARAMS), sel & set(ADJUSTABLE_PARAMS)


def theta_layout(model: AggregateModel, selection: Iterable[str] | None = None) -> tuple[tuple[str, int, str], ...]:
    """Deterministic layout: storages by index (canonical parameter order), then adjustables."""
    s_sel, a_sel = _normalize_selection(selection)
    layout = []
    for i in range(len(model.storages)):
        layout += [("storage", i, n) for n in STORAGE_PARAMS if n in s_sel]
    for j in range(len(model.adjustables)):
        layout += [("adjustable", j, n) for n in ADJUSTABLE_PARAMS if n in a_sel]
    return tuple(layout)


def flatten_theta(
    model: AggregateModel,
    selection: Iterable[str] | None = None,
    box_lo: Sequence[float] | None = None,
    box_hi: Sequence[float] | None = None,
) -> ThetaVector:
    """Collect the selected parameters of ``model`` into a :class:`ThetaVector`.

    Without an explicit box the vector is boxed at its own values.
    """
    layout = theta_layout(model, selection)
    values = []
    for kind, idx, name in layout:
        comp = model.storages[idx] if kind == "storage" else model.adjustables[idx]
        values.append(float(getattr(comp, name)))
    values = np.array(values, dtype=float)
    lo = values.copy() if box_lo is None else np.asarray(box_lo, dtype=float)
    hi = values.copy() if box_hi is None else np.asarray(box_hi, dtype=float)
    return ThetaVector(values, layout, lo, hi)


def unflatten_theta(theta: ThetaVector, template: AggregateModel) -> AggregateModel:
    storages = [dict(vars(s)) for s in template.storages]
    adjustables = [dict(vars(a)) for a in template.adjustables]
    for (kind, idx, name), value in zip(theta.layout, theta.values):
        target = storages if kind == "storage" else adjustables
        if kind not in ("storage", "adjustable") or idx >= len(target):
            raise ModelError(f"layout entry {kind}[{idx}].{name} does not match template")
        target[idx][name] = float(value)
    return replace(
        template,
        storages=tuple(StorageParams(**s) for s in storages),
        adjustables=tuple(AdjustableParams(**a) for a in adjustables),
    )


# --- JSON -------------------------------------------------------------------

def model_to_dict(model: AggregateModel) -> dict:
    return {
        "grid": {"T": model.grid.T, "dt": model.grid.dt},
        "fixed": list(model.fixed),
        "adjustables": [
            {**{k: getattr(a, k) for k in ("p_lo", "p_hi", "r_lo", "r_hi", "c")}, "p_expect": list(a.p_expect)}
            for a in model.adjustables
        ],
        "storages": [{k: getattr(s, k) for k in STORAGE_PARAMS} for s in model.storages],
    }


def model_from_dict(data: dict) -> AggregateModel:
    try:
        grid = TimeGrid(int(data["grid"]["T"]), float(data["grid"].get("dt", 1.0)))
        adjustables = tuple(
            AdjustableParams(
                p_lo=float(a["p_lo"]),
                p_hi=float(a["p_hi"]),
                r_lo=float(a["r_lo"]),
                r_hi=float(a["r_hi"]),
                c=float(a.get("c", 0.0)),
                p_expect=tuple(float(v) for v in a.get("p_expect", ())),
            )
            for a in data.get("adjustables", [])
        )
        storages = tuple(StorageParams(**{k: float(s[k]) for k in STORAGE_PARAMS}) for s in data.get("storages", []))
        return AggregateModel(grid, tuple(float(v) for v in data["fixed"]), adjustables, storages)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc!r}") from exc


def save_model(model: AggregateModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path: str | Path) -> AggregateModel:
    return model_from_dict(json.loads(Path(path).read_text()))
