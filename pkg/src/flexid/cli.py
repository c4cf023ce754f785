"""Batch command line: generate data, identify parameters, evaluate, and run the numerical harnesses.

Every command reads an optional JSON run configuration (``--config``) and
writes its results under ``--out``.  All randomness derives from ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bayopt import OptBudget
from .forward import MODES, ForwardOptions
from .gp import GPState, Hyperparams, chol_append, cross_kernel, gp_fit
from .identify import (
    InfeasibleThetaError,
    NoiseSpec,
    gap_variance_slope,
    identify,
    load_dataset,
    noise_gap_experiment,
    nrmse,
    posterior_slice,
    save_dataset,
    save_gap_csv,
    surrogate_response,
    write_metrics,
)
from .model import (
    ADJUSTABLE_PARAMS,
    STORAGE_PARAMS,
    AdjustableParams,
    AggregateModel,
    ModelError,
    StorageParams,
    ThetaVector,
    TimeGrid,
    load_model,
    save_model,
    theta_layout,
    validate_model,
)
from .scenario import FleetSpec, PriceSpec, generate_prices, load_prices_csv, sample_fleet, save_prices_csv, synthesize_dataset

DEFAULT_STORAGE_BOX = {
    "p_lo": (-18.0, -6.0), "p_hi": (4.0, 16.0), "e_lo": (0.8, 9.6),
    "e_hi": (8.0, 64.0), "e0": (0.8, 64.0), "sigma": (0.85, 1.0),
}
DEFAULT_ADJUSTABLE_BOX = {"p_lo": (0.0, 5.0), "p_hi": (5.0, 15.0), "r_lo": (-15.0, 0.0), "r_hi": (0.0, 15.0)}


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    out: str = "out"
    mode: str = "static"
    fleet: dict = field(default_factory=dict)  # FleetSpec fields
    fleet_path: str | None = None  # existing fleet JSON instead of sampling
    prices: dict = field(default_factory=dict)  # PriceSpec fields
    days_train: int = 10
    days_test: int = 5
    noise: dict = field(default_factory=lambda: {"kind": "none"})
    train_path: str | None = None
    test_path: str | None = None
    budget: dict = field(default_factory=dict)  # OptBudget fields
    surrogate: dict = field(default_factory=lambda: {"n_storage": 1, "n_adjustable": 0})
    box: dict = field(default_factory=dict)  # {"storage": {name: [lo, hi]}, "adjustable": {...}}
    selection: list | None = None
    slice_resolution: int = 25
    ident_path: str | None = None
    state_path: str | None = None
    slice_dims: list = field(default_factory=lambda: [0, 1])
    theorem1: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        for name in ("fleet_path", "train_path", "test_path", "ident_path", "state_path"):
            p = getattr(cfg, name)
            if p is not None and not Path(p).exists():
                raise CliError(f"{name}: {p} does not exist")
        return cfg

    @property
    def out_dir(self) -> Path:
        d = Path(self.out)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def rng(self, stream: int) -> np.random.Generator:
        """Independent, reproducible stream per purpose."""
        return np.random.default_rng([self.seed, stream])

    def forward_options(self) -> ForwardOptions:
        return ForwardOptions()

    def noise_spec(self, T: int) -> NoiseSpec | None:
        kind = self.noise.get("kind", "none")
        if kind == "none":
            return None
        if kind == "proportional":
            return NoiseSpec.proportional(T, float(self.noise.get("factor", 0.005)))
        if kind == "isotropic":
            return NoiseSpec.isotropic(T, float(self.noise["var_agg"]), float(self.noise["var_fix"]))
        raise CliError(f"unknown noise kind {kind!r}")


# --- helpers --------------------------------------------------------------------

def _fleet(cfg: RunConfig) -> AggregateModel:
    if cfg.fleet_path:
        try:
            model = load_model(cfg.fleet_path)
        except (ModelError, ValueError, TypeError) as exc:
            raise CliError(f"cannot load fleet: {exc}") from exc
        report = validate_model(model)
        if not report.ok:
            raise CliError(f"invalid fleet:\n{report}")
        return model
    try:
        spec = FleetSpec.from_dict({"seed": cfg.seed, **cfg.fleet})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid fleet spec: {exc}") from exc
    bad = spec.violations()
    if bad:
        raise CliError("invalid fleet spec:\n" + "\n".join(f"  {v}" for v in bad))
    return sample_fleet(spec, cfg.rng(1))


def surrogate_template(cfg: RunConfig, T: int) -> tuple[AggregateModel, ThetaVector]:
    """Surrogate structure from the config, with every component at the centre of its box."""
    sbox = {**DEFAULT_STORAGE_BOX, **{k: tuple(v) for k, v in cfg.box.get("storage", {}).items()}}
    abox = {**DEFAULT_ADJUSTABLE_BOX, **{k: tuple(v) for k, v in cfg.box.get("adjustable", {}).items()}}
    n_s = int(cfg.surrogate.get("n_storage", 1))
    n_a = int(cfg.surrogate.get("n_adjustable", 0))
    mid = {k: 0.5 * (lo + hi) for k, (lo, hi) in sbox.items()}
    mid_a = {k: 0.5 * (lo + hi) for k, (lo, hi) in abox.items()}
    storage = StorageParams(**{k: mid[k] for k in STORAGE_PARAMS})
    adjustable = AdjustableParams(**{k: mid_a[k] for k in ADJUSTABLE_PARAMS})
    template = AggregateModel(TimeGrid(T), np.zeros(T), (adjustable,) * n_a, (storage,) * n_s)
    layout = theta_layout(template, cfg.selection)
    lo = np.array([(sbox if k == "storage" else abox)[n][0] for k, _, n in layout])
    hi = np.array([(sbox if k == "storage" else abox)[n][1] for k, _, n in layout])
    return template, ThetaVector(lo.copy(), layout, lo, hi)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# --- commands -------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    model = _fleet(cfg)
    out = cfg.out_dir
    days = cfg.days_train + cfg.days_test
    try:
        pspec = PriceSpec.from_dict(cfg.prices) if cfg.prices else PriceSpec()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid price spec: {exc}") from exc
    prices = generate_prices(pspec, model.T, days, cfg.rng(2))
    data = synthesize_dataset(model, prices, cfg.noise_spec(model.T), cfg.mode, cfg.forward_options(), cfg.rng(3))
    save_model(model, out / "fleet.json")
    save_prices_csv(prices, out / "prices.csv")
    save_dataset(data[: cfg.days_train], out / "dataset_train.csv")
    if cfg.days_test:
        save_dataset(data[cfg.days_train:], out / "dataset_test.csv")
    print(f"wrote {len(model.storages)} storages, {len(model.adjustables)} adjustables, "
          f"{cfg.days_train}+{cfg.days_test} days x {model.T} periods to {out}")
    return 0


def _datasets(cfg: RunConfig):
    out = Path(cfg.out)
    train_path = Path(cfg.train_path) if cfg.train_path else out / "dataset_train.csv"
    if not train_path.exists():
        raise CliError(f"training dataset {train_path} not found (run `gen` first or set train_path)")
    test_path = Path(cfg.test_path) if cfg.test_path else out / "dataset_test.csv"
    train = load_dataset(train_path)
    test = load_dataset(test_path) if test_path.exists() else []
    return train, test


def cmd_identify(cfg: RunConfig) -> int:
    train, test = _datasets(cfg)
    template, box = surrogate_template(cfg, train[0].T)
    budget = OptBudget(**cfg.budget) if cfg.budget else OptBudget()
    res = identify(train, test or None, template, box, budget, cfg.mode, cfg.rng(4), cfg.forward_options())
    out = cfg.out_dir
    write_metrics(out / "ident.json", res.to_dict())
    res.trace.to_csv(out / "trace.csv")
    state = res.trace.final_state
    if state is not None:
        (out / "gp_state.json").write_text(json.dumps(state.to_dict()))
        if cfg.slice_resolution > 0:
            best = res.trace.best_theta
            for i in range(len(template.storages)):
                idx = [k for k, (kind, j, _) in enumerate(box.layout) if kind == "storage" and j == i]
                for a_pos, a in enumerate(idx):
                    for b in idx[a_pos + 1:]:
                        names = (box.layout[a][2], box.layout[b][2])
                        grid = posterior_slice(state, (a, b), cfg.slice_resolution, best, names)
                        grid.to_csv(out / f"slice_storage{i}_{names[0]}_{names[1]}.csv")
    test_txt = "absent" if res.nrmse_test is None else f"{res.nrmse_test:.4f}"
    print(f"nrmse_train={res.nrmse_train:.4f} nrmse_test={test_txt} "
          f"evaluations={len(res.trace.iterations)} failed={res.n_failed}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    train, test = _datasets(cfg)
    ident_path = Path(cfg.ident_path) if cfg.ident_path else Path(cfg.out) / "ident.json"
    if not ident_path.exists():
        raise CliError(f"{ident_path} not found (run `identify` first or set ident_path)")
    theta = ThetaVector.from_dict(json.loads(ident_path.read_text())["theta_hat"])
    template, _ = surrogate_template(cfg, train[0].T)
    out = cfg.out_dir
    metrics = {}
    for name, samples in (("train", train), ("test", test)):
        if not samples:
            metrics[f"nrmse_{name}"] = None
            continue
        try:
            est = [surrogate_response(template, theta, s, cfg.mode, cfg.forward_options()) for s in samples]
        except InfeasibleThetaError as exc:
            raise CliError(f"identified parameters are infeasible on the {name} set: {exc}") from exc
        metrics[f"nrmse_{name}"] = nrmse(np.array([s.truth for s in samples]), np.array(est))
        rows = [[d, t, _fmt(s.truth[t]), _fmt(e[t])] for d, (s, e) in enumerate(zip(samples, est)) for t in range(s.T)]
        _write_csv(out / f"responses_{name}.csv", ["day", "t", "p_true", "p_hat"], rows)
    write_metrics(out / "eval.json", metrics)
    print(" ".join(f"{k}={'absent' if v is None else format(v, '.4f')}" for k, v in metrics.items()))
    return 0


def cmd_theorem1(cfg: RunConfig) -> int:
    c = {"T": 24, "var_agg": 0.01, "var_fix": 0.0025, "sample_counts": [10, 100, 1000], "trials": 50, "days": 20, **cfg.theorem1}
    T = int(c["T"])
    spec = NoiseSpec.isotropic(T, float(c["var_agg"]), float(c["var_fix"]))
    model = sample_fleet(FleetSpec(n_storage=1, n_generators=0, n_interruptible=0, T=T, seed=cfg.seed), cfg.rng(1))
    prices = generate_prices(PriceSpec(), T, int(c["days"]), cfg.rng(2))
    stats = noise_gap_experiment(model, spec, [int(n) for n in c["sample_counts"]], int(c["trials"]), cfg.rng(5),
                                 prices, cfg.mode, cfg.forward_options())
    out = cfg.out_dir
    save_gap_csv(stats, out / "theorem1_gap.csv")
    slope = gap_variance_slope(stats) if len(stats) > 1 else float("nan")
    write_metrics(out / "theorem1.json", {
        "target": stats[-1].target, "final_mean_gap": stats[-1].mean_gap, "final_se": stats[-1].se,
        "final_within_3se": stats[-1].within_3se, "variance_slope": slope,
    })
    last = stats[-1]
    print(f"N={last.n} gap={last.mean_gap:.5f} target={last.target:.5f} se={last.se:.5f} slope={slope:.3f}")
    return 0


def bench_chol(sizes, repeats: int, rng: np.random.Generator, dim: int = 4) -> list[tuple[int, float, float]]:
    """Median time of one bordered append vs one full factor+inverse at each size."""
    eta = Hyperparams(1.0, 0.5, 0.1)
    rows = []
    for n in sizes:
        x = rng.uniform(size=(n + 1, dim))
        y = rng.standard_normal(n + 1)
        base = gp_fit(x[:n], y[:n], eta)
        k_vec = cross_kernel(eta, x[:n], x[n:]).ravel()
        k_ss = eta.alpha + eta.eps ** 2
        t_app, t_full = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            chol_append(base.l, base.l_inv, k_vec, k_ss)
            t_app.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            gp_fit(x, y, eta)
            t_full.append(time.perf_counter() - t0)
        rows.append((int(n), float(np.median(t_app)), float(np.median(t_full))))
    return rows


def cmd_bench_chol(cfg: RunConfig) -> int:
    c = {"sizes": [100, 200, 500, 1000], "repeats": 5, **cfg.bench}
    rows = bench_chol(sorted(int(n) for n in c["sizes"]), int(c["repeats"]), cfg.rng(6))
    _write_csv(cfg.out_dir / "bench_chol.csv", ["n", "append_seconds", "refit_seconds", "ratio"],
               [[n, _fmt(a), _fmt(f), _fmt(a / f)] for n, a, f in rows])
    for n, a, f in rows:
        print(f"n={n} append={a * 1e3:.3f}ms refit={f * 1e3:.3f}ms ratio={a / f:.3f}")
    return 0


def cmd_slice(cfg: RunConfig) -> int:
    state_path = Path(cfg.state_path) if cfg.state_path else Path(cfg.out) / "gp_state.json"
    if not state_path.exists():
        raise CliError(f"{state_path} not found (run `identify` first or set state_path)")
    state = GPState.from_dict(json.loads(state_path.read_text()))
    fixed = state.x[int(np.argmin(state.y))]
    try:
        grid = posterior_slice(state, cfg.slice_dims, cfg.slice_resolution, fixed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    name = "slice_" + "_".join(str(d) for d in grid.dims) + ".csv"
    grid.to_csv(cfg.out_dir / name)
    print(f"wrote {len(grid.mean)} rows to {Path(cfg.out) / name}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "identify": cmd_identify,
    "eval": cmd_eval,
    "theorem1": cmd_theorem1,
    "bench-chol": cmd_bench_chol,
    "slice": cmd_slice,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides config)")
    parser = argparse.ArgumentParser(prog="flexid", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "sample a fleet, prices and observation datasets",
        "identify": "identify surrogate parameters from the training dataset",
        "eval": "score identified parameters on the datasets",
        "theorem1": "Monte-Carlo noise-gap harness",
        "bench-chol": "time bordered Cholesky appends against full refits",
        "slice": "GP posterior slice over one or two coordinates",
    }
    for name, text in helps.items():
        sub.add_parser(name, help=text, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        if hasattr(args, "seed"):
            if args.seed < 0:
                raise CliError("--seed must be a non-negative integer")
            cfg.seed = args.seed
        if hasattr(args, "out"):
            cfg.out = args.out
        if cfg.mode not in MODES:
            raise CliError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
        return COMMANDS[args.command](cfg)
    except (CliError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
