"""Acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured value.
"""
import math
import time

import numpy as np
import pytest

from flexid.bayopt import OptBudget, expected_improvement
from flexid.cli import DEFAULT_STORAGE_BOX, bench_chol
from flexid.forward import InfeasibleResponseError, PriceSignal, respond, solve_static_response
from flexid.gp import Hyperparams, gp_fit
from flexid.identify import NoiseSpec, beta_deviation, gap_variance_slope, identify, noise_gap_experiment
from flexid.model import AggregateModel, StorageParams, ThetaVector, TimeGrid, theta_layout
from flexid.scenario import FleetSpec, PriceSpec, generate_prices, sample_fleet, synthesize_dataset
from oracles import ei_monte_carlo, energy_recursion, storage_static_oracle

STORAGE_NAMES = ("p_lo", "p_hi", "e_lo", "e_hi", "e0", "sigma")


def storage_box(model):
    lo = np.array([DEFAULT_STORAGE_BOX[n][0] for n in STORAGE_NAMES] * len(model.storages))
    hi = np.array([DEFAULT_STORAGE_BOX[n][1] for n in STORAGE_NAMES] * len(model.storages))
    return ThetaVector(lo.copy(), theta_layout(model), lo, hi)


def one_storage_case(seed, days):
    """Seeded one-storage truth with a constant fixed load and real-time style prices."""
    rng = np.random.default_rng(seed)
    spec = FleetSpec(n_storage=1, n_generators=0, n_interruptible=0, constant_fixed=True, seed=seed)
    truth = sample_fleet(spec, rng)
    prices = generate_prices(PriceSpec(), truth.T, days, rng)
    return truth, prices, rng


def test_c1_block_cholesky(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    eta = Hyperparams(1.3, 0.4, 0.05)
    x = rng.uniform(size=(501, 4))
    state = gp_fit(x[:1], [0.0], eta)
    worst = 0.0
    for n in range(2, 502):
        state.append(x[n - 1], 0.0)
        ref = gp_fit(x[:n], np.zeros(n), eta)
        dev = max(np.max(np.abs(state.l - ref.l)), np.max(np.abs(state.l_inv - ref.l_inv)))
        worst = max(worst, dev / (1e-8 * n))
    (n, t_app, t_full), = bench_chol([1000], 7, np.random.default_rng(2))
    ratio = t_app / t_full
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and ratio <= 0.2 and elapsed < 120
    acceptance.record(1, ok, f"max deviation / (1e-8 n) = {worst:.2e}; append/refit at n=1000 = {ratio:.3f}; "
                             f"{elapsed:.1f}s")
    assert ok


def test_c2_expected_improvement(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        sd = rng.uniform(0.05, 3.0)
        mean = rng.uniform(-5, 5)
        f_best = mean + sd * rng.uniform(-3, 3)
        mu, se = ei_monte_carlo(mean, sd, f_best, 10_000_000, rng)
        worst = max(worst, abs(expected_improvement(mean, sd, f_best) - mu) / se)
    elapsed = time.perf_counter() - t0
    ok = worst <= 4.0 and elapsed < 60
    acceptance.record(2, ok, f"worst |EI - MC| = {worst:.2f} SE over 20 triples; {elapsed:.1f}s")
    assert ok


def test_c3_forward_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_obj = worst_bound = worst_periodic = 0.0
    solved = 0
    while solved < 50:
        T = int(rng.integers(1, 4))
        e_hi = rng.uniform(1, 10)
        s = dict(p_lo=-rng.uniform(0.5, 5), p_hi=rng.uniform(0.5, 5), e_lo=rng.uniform(0, 0.3) * e_hi, e_hi=e_hi,
                 sigma=rng.uniform(0.85, 1.0))
        s["e0"] = rng.uniform(s["e_lo"], e_hi)
        lam = rng.uniform(-1, 1, T)
        best, _ = storage_static_oracle(lam, **s)
        model = AggregateModel(TimeGrid(T), [0.0] * T, (), (StorageParams(**s),))
        if best is None:  # periodic energy unreachable; must be reported, not solved
            with pytest.raises(InfeasibleResponseError):
                solve_static_response(model, PriceSignal.known(lam))
            continue
        r = solve_static_response(model, PriceSignal.known(lam))
        worst_obj = max(worst_obj, abs(r.objective - best) / (1e-3 * abs(best) + 1e-6))
        e = energy_recursion(s["e0"], s["sigma"], r.p_str[0])
        worst_bound = max(worst_bound, np.max(s["e_lo"] - e), np.max(e - s["e_hi"]))
        worst_periodic = max(worst_periodic, abs(e[-1] - s["e0"]))
        solved += 1
    elapsed = time.perf_counter() - t0
    ok = worst_obj <= 1.0 and worst_bound <= 1e-8 and worst_periodic <= 1e-8 and elapsed < 120
    acceptance.record(3, ok, f"worst objective gap / tolerance = {worst_obj:.2e}; bound violation {worst_bound:.1e}; "
                             f"periodic error {worst_periodic:.1e}; {elapsed:.1f}s")
    assert ok


def test_c4_price_scaling(acceptance):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        model = sample_fleet(FleetSpec(n_storage=5, n_generators=2, n_interruptible=2, seed=seed))
        prices = generate_prices(PriceSpec(forecast_error_sd=0.01), model.T, 1, np.random.default_rng(seed))[0]
        base = respond(model, prices, "static").p_agg
        for kappa in (0.1, 3.0, 17.0):
            if not np.array_equal(respond(model, prices.scaled(kappa), "static").p_agg, base):
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    acceptance.record(4, ok, f"{mismatches} of 60 scaled responses differ from the unscaled one; {elapsed:.1f}s")
    assert ok


def test_c5_noise_gap(acceptance):
    t0 = time.perf_counter()
    model = sample_fleet(FleetSpec(n_storage=5, n_generators=2, n_interruptible=2, seed=5))
    prices = generate_prices(PriceSpec(), 24, 20, np.random.default_rng(5))
    spec = NoiseSpec.isotropic(24, 0.01, 0.0025)
    stats = noise_gap_experiment(model, spec, [10, 100, 1000], 50, np.random.default_rng(6), prices)
    last = stats[-1]
    slope = gap_variance_slope(stats)
    elapsed = time.perf_counter() - t0
    ok = abs(last.target - 0.3) < 1e-12 and last.within_3se and abs(slope + 1) <= 0.2 and elapsed < 300
    acceptance.record(5, ok, f"N=1000 gap {last.mean_gap:.5f} vs 0.3 (3 SE = {3 * last.se:.5f}); "
                             f"variance slope {slope:.3f}; {elapsed:.1f}s")
    assert ok


def test_c6_identification(acceptance):
    t0 = time.perf_counter()
    truth, prices, rng = one_storage_case(0, 15)
    data = synthesize_dataset(truth, prices, None, "static", None, rng)
    res = identify(data[:10], data[10:], truth, storage_box(truth), OptBudget(10, 50, 200, 64), rng=rng)
    elapsed = time.perf_counter() - t0
    ok = res.nrmse_test <= 0.10 and len(res.trace.iterations) == 200 and elapsed < 600
    acceptance.record(6, ok, f"test NRMSE {res.nrmse_test:.4f} (train {res.nrmse_train:.4f}), "
                             f"{res.n_failed} failed evaluations; {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_c7_beta_trend(acceptance):
    t0 = time.perf_counter()
    day_counts = (3, 10, 55)
    votes, table = 0, []
    for seed in range(3):
        truth, prices, rng = one_storage_case(seed, max(day_counts))
        clean = synthesize_dataset(truth, prices, None, "static", None, rng)
        noisy = synthesize_dataset(truth, prices, NoiseSpec.proportional(truth.T, 0.005), "static", None, rng)
        box = storage_box(truth)
        betas = []
        for d in day_counts:
            # both runs share the optimizer stream so the comparison isolates the data
            a = identify(clean[:d], None, truth, box, OptBudget(10, 50, 200, 64), rng=np.random.default_rng([seed, d]))
            b = identify(noisy[:d], None, truth, box, OptBudget(10, 50, 200, 64), rng=np.random.default_rng([seed, d]))
            betas.append(beta_deviation(a.theta_hat, b.theta_hat))
        decreasing = all(x > y for x, y in zip(betas, betas[1:]))
        votes += decreasing
        table.append("/".join(f"{b:.3f}" for b in betas))
    elapsed = time.perf_counter() - t0
    ok = votes >= 2 and elapsed < 1800
    acceptance.record(7, ok, f"beta at {day_counts} days per seed: {'; '.join(table)}; "
                             f"{votes}/3 seeds decreasing; {elapsed:.1f}s")
    assert ok


def test_c8_full_fleet(acceptance):
    t0 = time.perf_counter()
    model = sample_fleet(FleetSpec(seed=1))
    prices = generate_prices(PriceSpec(), model.T, 5, np.random.default_rng(1))
    objs = []
    for mode in ("static", "dynamic"):
        for p in prices:
            r = respond(model, p, mode)
            objs.append(r.objective)
            assert np.all(np.isfinite(r.p_agg))
    elapsed = time.perf_counter() - t0
    ok = all(math.isfinite(o) for o in objs) and elapsed < 120
    acceptance.record(8, ok, f"50 storages + 10 adjustables, 5 days static and dynamic all feasible; "
                             f"objectives {min(objs):.1f}..{max(objs):.1f}; {elapsed:.1f}s")
    assert ok
