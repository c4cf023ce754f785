import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexid.bayopt import (
    FeasibilityModel,
    OptBudget,
    expected_improvement,
    latin_hypercube,
    optimize,
    propose_next,
)
from flexid.gp import Hyperparams, gp_fit, posterior_batch
from oracles import ei_monte_carlo


class TestExpectedImprovement:
    def test_at_incumbent(self):
        assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(0.398942, abs=1e-6)

    def test_deterministic(self):
        assert expected_improvement(-1.0, 0.0, 0.0) == 1.0
        assert expected_improvement(2.0, 0.0, 0.0) == 0.0

    def test_one_sd_below(self):
        assert expected_improvement(0.0, 1.0, 1.0) == pytest.approx(1.083316, abs=1e-5)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(0)
        mu, se = ei_monte_carlo(0.3, 0.7, 0.5, 400_000, rng)
        assert abs(expected_improvement(0.3, 0.7, 0.5) - mu) <= 4 * se

    def test_vectorized(self):
        out = expected_improvement(np.array([0.0, -1.0]), np.array([1.0, 0.0]), 0.0)
        np.testing.assert_allclose(out, [0.398942280, 1.0], atol=1e-9)

    @given(st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(-1e3, 1e3))
    def test_nonnegative(self, mean, sd, f_best):
        v = expected_improvement(mean, sd, f_best)
        assert v >= 0.0
        if sd == 0 and mean >= f_best:
            assert v == 0.0


def test_budget_validation():
    with pytest.raises(ValueError):
        OptBudget(n0=5, n_classic=3, n_max=10)
    with pytest.raises(ValueError):
        OptBudget(acq_starts=0)


def test_latin_hypercube_strata():
    pts = latin_hypercube(8, 3, np.random.default_rng(0))
    for j in range(3):
        assert sorted(np.floor(pts[:, j] * 8).astype(int)) == list(range(8))


def sharp_state():
    x = np.linspace(0, 1, 9)[:, None]
    y = (x[:, 0] - 0.62) ** 2 * 20
    return gp_fit(x, y, Hyperparams(1.0, 0.2, 1e-3), standardize=True), float(y.min())


class TestPropose:
    def test_dominates_probe_grid(self):
        state, f_best = sharp_state()
        theta, ei = propose_next(state, f_best, 64, np.random.default_rng(1))
        probes = np.random.default_rng(2).uniform(size=(1000, 1))
        m, v = posterior_batch(state, probes)
        assert ei >= expected_improvement(m, np.sqrt(v), f_best).max() - 1e-12
        m1, v1 = posterior_batch(state, theta[None, :])
        assert ei == pytest.approx(float(expected_improvement(m1, np.sqrt(v1), f_best)[0]), rel=1e-12)

    def test_single_point_state(self):
        state = gp_fit([[0.0, 0.0]], [1.0], Hyperparams(1.0, 0.3, 1e-3))
        theta, ei = propose_next(state, 1.0, 16, np.random.default_rng(0))
        assert ei > 0 and np.all((theta >= 0) & (theta <= 1))
        assert np.linalg.norm(theta) > 0.1

    def test_deterministic(self):
        state, f_best = sharp_state()
        a = propose_next(state, f_best, 32, np.random.default_rng(9))
        b = propose_next(state, f_best, 32, np.random.default_rng(9))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_feasibility_model_separates():
    x_ok = np.array([[0.1], [0.2], [0.3]])
    x_fail = np.array([[0.8], [0.9]])
    feas = FeasibilityModel(x_ok, x_fail)
    p = feas(np.array([[0.2], [0.85]]))
    assert p[0] > 0.7 and p[1] < 0.3


class TestOptimize:
    def test_quadratic(self):
        tr = optimize(lambda t: float((t[0] - 0.5) ** 2), 1, OptBudget(5, 10, 30, 16), rng=np.random.default_rng(0))
        assert tr.best_f <= 1e-2
        assert len(tr.iterations) == 30
        assert [it.phase for it in tr.iterations[:5]] == ["initial"] * 5
        assert {it.phase for it in tr.iterations[10:]} == {"fast"}

    def test_constant_objective(self):
        tr = optimize(lambda t: 3.0, 2, OptBudget(4, 8, 20, 8), rng=np.random.default_rng(0))
        assert tr.best_f == 3.0 and len(tr.iterations) == 20

    def test_fast_phase_matches_refit(self):
        def f(t):
            return float(np.sum((t - 0.3) ** 2) + 0.1 * np.sin(8 * t[0]))

        tr = optimize(f, 2, OptBudget(5, 10, 40, 16), rng=np.random.default_rng(4))
        st_ = tr.final_state
        ref = gp_fit(st_.x, st_.y, st_.eta, standardize=True)
        probes = np.random.default_rng(5).uniform(size=(100, 2))
        np.testing.assert_allclose(posterior_batch(st_, probes)[0], posterior_batch(ref, probes)[0], atol=1e-6)

    def test_bookkeeping(self):
        tr = optimize(lambda t: float(abs(t[0] - 0.2) + t[1]), 2, OptBudget(4, 8, 25, 8),
                      rng=np.random.default_rng(3))
        best = tr.best_so_far()
        assert np.all(np.diff(best) <= 0)
        fs = [it.f for it in tr.iterations if not it.failed]
        assert tr.best_f == min(fs)
        first = next(it for it in tr.iterations if it.f == tr.best_f)
        assert np.array_equal(tr.best_theta, np.array(first.theta))

    def test_determinism(self):
        def run():
            return optimize(lambda t: float(np.sum(t ** 2)), 2, OptBudget(3, 6, 12, 8), rng=np.random.default_rng(8))
        a, b = run(), run()
        assert [it.theta for it in a.iterations] == [it.theta for it in b.iterations]

    def test_failures_excluded_and_counted(self):
        def f(t):
            if t[0] > 0.7:
                raise ValueError("infeasible")
            return float((t[0] - 0.6) ** 2)

        tr = optimize(f, 1, OptBudget(6, 10, 30, 16), rng=np.random.default_rng(0))
        assert len(tr.iterations) == 30
        assert tr.n_failed >= 1
        assert all(math.isnan(it.f) for it in tr.iterations if it.failed)
        assert tr.final_state.n == 30 - tr.n_failed
        assert tr.best_f <= 1e-2

    def test_initial_points_used(self):
        tr = optimize(lambda t: float(np.sum((t - 0.25) ** 2)), 2, OptBudget(3, 5, 8, 8),
                      rng=np.random.default_rng(0), initial_points=[[0.25, 0.25]])
        assert tr.iterations[0].theta == (0.25, 0.25) and tr.best_f == 0.0

    def test_csv(self, tmp_path):
        tr = optimize(lambda t: float(t[0]), 1, OptBudget(2, 3, 5, 4), rng=np.random.default_rng(0))
        tr.to_csv(tmp_path / "trace.csv")
        rows = list(csv.reader(open(tmp_path / "trace.csv")))
        assert rows[0] == ["iteration", "phase", "f", "best_f", "ei", "failed"]
        assert len(rows) == 6
        assert float(rows[-1][3]) == tr.best_f
