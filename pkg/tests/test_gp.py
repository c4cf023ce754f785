import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexid.gp import (
    DEFAULT_BOUNDS,
    FactorizationError,
    GPState,
    Hyperparams,
    chol_append,
    gp_fit,
    gram_matrix,
    log_marginal_likelihood,
    matern_kernel,
    posterior,
    posterior_batch,
    tune_hyperparameters,
)
from oracles import dense_gram, dense_lml, dense_posterior, matern52

ETA = Hyperparams(1.0, 1.0, 0.1)


class TestKernel:
    def test_zero_distance_same_index(self):
        assert matern_kernel(ETA, [0.3], [0.3], same_index=True) == pytest.approx(1.01)

    def test_unit_distance(self):
        assert matern_kernel(ETA, [0.0], [1.0]) == pytest.approx(0.52399, abs=1e-4)
        assert matern_kernel(ETA, [0.0], [1.0]) == pytest.approx(matern52(1.0, 1.0, 1.0), rel=1e-14)

    @given(st.floats(0.01, 100), st.floats(0.01, 10))
    def test_decay(self, alpha, beta):
        eta = Hyperparams(alpha, beta, 0.1)
        assert matern_kernel(eta, [0.0, 0.0], [100 * beta, 0.0]) <= 1e-10 * alpha

    def test_invalid_hyperparams(self):
        with pytest.raises(ValueError):
            Hyperparams(0.0, 1.0, 0.1)


class TestGram:
    def test_single(self):
        np.testing.assert_allclose(gram_matrix([[0.2]], ETA), [[1.01]])

    def test_identical_points(self):
        k = gram_matrix([[0.2], [0.2]], ETA)
        np.testing.assert_allclose(k, [[1.01, 1.0], [1.0, 1.01]])
        np.linalg.cholesky(k)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_matches_dense_and_factorizes(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(5, 3))
        eta = Hyperparams(rng.uniform(0.1, 3), rng.uniform(0.05, 2), rng.uniform(1e-3, 0.3))
        k = gram_matrix(x, eta)
        np.testing.assert_allclose(k, dense_gram(x, eta.alpha, eta.beta, eta.eps), rtol=1e-12)
        assert np.array_equal(k, k.T)
        st_ = gp_fit(x, np.zeros(5), eta)
        np.testing.assert_allclose(st_.l @ st_.l.T, k + st_.jitter * np.eye(5), rtol=1e-6, atol=1e-12)


class TestFit:
    def test_single_point(self):
        s = gp_fit([[0.5]], [2.0], ETA)
        np.testing.assert_allclose(s.l, [[math.sqrt(1.01)]])

    def test_reconstruction(self):
        x = np.array([[0.1], [0.5], [0.9]])
        s = gp_fit(x, [1.0, 2.0, 3.0], ETA)
        np.testing.assert_allclose(s.l @ s.l.T, gram_matrix(x, ETA), atol=1e-10)
        np.testing.assert_allclose(s.l_inv @ s.l, np.eye(3), atol=1e-10)

    def test_duplicate_points_without_noise(self):
        with pytest.raises(FactorizationError):
            gp_fit([[0.5], [0.5]], [1.0, 1.0], Hyperparams(1.0, 1.0, 0.0))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gp_fit([[0.1], [0.2]], [1.0], ETA)


class TestCholAppend:
    def test_two_by_two(self):
        l, li = chol_append(np.array([[2.0]]), np.array([[0.5]]), np.array([2.0]), 5.0)
        np.testing.assert_allclose(l, [[2, 0], [1, 2]])
        np.testing.assert_allclose(li, [[0.5, 0], [-0.25, 0.5]])
        np.testing.assert_allclose(l, np.linalg.cholesky([[4.0, 2.0], [2.0, 5.0]]))

    def test_independent_point(self):
        l0 = np.linalg.cholesky([[4.0, 1.0], [1.0, 3.0]])
        l, li = chol_append(l0, np.linalg.inv(l0), np.zeros(2), 9.0)
        np.testing.assert_allclose(l[2], [0, 0, 3.0])
        np.testing.assert_allclose(l[:2, :2], l0)
        np.testing.assert_allclose(li @ l, np.eye(3), atol=1e-14)

    def test_nonpositive_schur(self):
        with pytest.raises(FactorizationError):
            chol_append(np.array([[1.0]]), np.array([[1.0]]), np.array([2.0]), 1.0)

    def test_chain_to_200(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(200, 4))
        eta = Hyperparams(1.0, 0.5, 0.1)
        s = gp_fit(x[:1], [0.0], eta)
        for i in range(1, 200):
            s.append(x[i], 0.0)
            if i % 20 == 0 or i == 199:
                ref = gp_fit(x[: i + 1], np.zeros(i + 1), eta)
                assert np.max(np.abs(s.l - ref.l)) <= 1e-8
                assert np.max(np.abs(s.l_inv - ref.l_inv)) <= 1e-8

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 30))
    def test_append_matches_refit(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(n, 2))
        y = rng.normal(size=n)
        eta = Hyperparams(rng.uniform(0.5, 2), rng.uniform(0.1, 1), rng.uniform(0.01, 0.3))
        s = gp_fit(x[:1], y[:1], eta)
        for i in range(1, n):
            s.append(x[i], y[i])
        ref = gp_fit(x, y, eta)
        assert np.max(np.abs(s.l - ref.l)) <= 1e-8 * n
        assert np.max(np.abs(s.l_inv - ref.l_inv)) <= 1e-8 * n

    def test_append_cost_is_quadratic(self):
        rng = np.random.default_rng(1)
        eta = Hyperparams(1.0, 0.3, 0.1)

        def per_append(n):
            s = gp_fit(rng.uniform(size=(n, 3)), np.zeros(n), eta)
            s.append(rng.uniform(size=3), 0.0)  # first append allocates the buffers
            best = np.inf
            for _ in range(9):
                x = rng.uniform(size=3)
                t0 = time.perf_counter()
                s.append(x, 0.0)
                best = min(best, time.perf_counter() - t0)
            return best

        assert per_append(1000) / per_append(500) <= 5.0


class TestPosterior:
    def test_at_training_point(self):
        s = gp_fit([[0.5]], [1.0], ETA)
        p = posterior(s, [0.5])
        assert p.mean == pytest.approx(1 / 1.01)
        assert p.variance == pytest.approx(1 - 1 / 1.01)

    def test_far_point(self):
        s = gp_fit([[0.0], [0.1]], [1.0, -2.0], Hyperparams(1.0, 0.05, 0.1))
        p = posterior(s, [50.0])
        assert abs(p.mean) < 1e-12 and p.variance == pytest.approx(1.0)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_matches_dense_inverse(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(3, 2))
        y = rng.normal(size=3)
        eta = Hyperparams(rng.uniform(0.5, 2), rng.uniform(0.2, 1), rng.uniform(0.05, 0.5))
        s = gp_fit(x, y, eta)
        th = rng.uniform(size=2)
        m_ref, v_ref = dense_posterior(x, y, th, eta.alpha, eta.beta, eta.eps)
        p = posterior(s, th)
        assert p.mean == pytest.approx(m_ref, abs=1e-8)
        assert p.variance == pytest.approx(v_ref, abs=1e-8)

    def test_standardized_units(self):
        x = np.array([[0.1], [0.4], [0.8]])
        y = np.array([10.0, 14.0, 11.0])
        s = gp_fit(x, y, ETA, standardize=True)
        z = (y - y.mean()) / y.std()
        m_ref, v_ref = dense_posterior(x, z, np.array([0.3]), 1.0, 1.0, 0.1)
        p = posterior(s, [0.3])
        assert p.mean == pytest.approx(y.mean() + y.std() * m_ref, rel=1e-10)
        assert p.variance == pytest.approx(v_ref * y.var(), rel=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_variance_nonnegative_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        eta = Hyperparams(1.0, 0.3, 0.05)
        probe = rng.uniform(size=(1, 2))
        s = gp_fit(rng.uniform(size=(2, 2)), rng.normal(size=2), eta)
        prev = posterior_batch(s, probe)[1][0]
        for _ in range(8):
            s.append(probe[0] + rng.normal(scale=0.05, size=2), rng.normal())
            v = posterior_batch(s, probe)[1][0]
            assert v >= 0.0 and v <= prev + 1e-10
            prev = v


class TestEvidence:
    def test_standard_normal(self):
        eta = Hyperparams(1.0, 1.0, 0.0)
        assert log_marginal_likelihood([[0.0]], [0.0], eta) == pytest.approx(-0.918939, abs=1e-6)
        assert log_marginal_likelihood([[0.0]], [1.0], eta) == pytest.approx(-1.418939, abs=1e-6)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_matches_dense(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(4, 2))
        y = rng.normal(size=4)
        eta = Hyperparams(rng.uniform(0.5, 2), rng.uniform(0.1, 1), rng.uniform(0.05, 0.5))
        assert log_marginal_likelihood(x, y, eta) == pytest.approx(dense_lml(x, y, eta.alpha, eta.beta, eta.eps),
                                                                   abs=1e-8)


class TestTuning:
    def test_recovers_length_scale(self):
        rng = np.random.default_rng(7)
        true = Hyperparams(1.0, 0.3, 0.05)
        x = rng.uniform(size=(100, 1))
        y = np.linalg.cholesky(gram_matrix(x, true)) @ rng.standard_normal(100)
        eta = tune_hyperparameters(x, y, rng=np.random.default_rng(0))
        assert 0.15 <= eta.beta <= 0.6

    def test_constant_targets(self):
        x = np.linspace(0, 1, 8)[:, None]
        eta = tune_hyperparameters(x, np.zeros(8), rng=np.random.default_rng(0))
        assert eta.alpha == pytest.approx(DEFAULT_BOUNDS[0][0], rel=1e-6)
        assert eta.eps == pytest.approx(DEFAULT_BOUNDS[2][0], rel=1e-6)

    def test_two_points(self):
        eta = tune_hyperparameters([[0.1], [0.7]], [1.0, -1.0], rng=np.random.default_rng(0))
        for v, (lo, hi) in zip((eta.alpha, eta.beta, eta.eps), DEFAULT_BOUNDS):
            assert math.isfinite(v) and lo * (1 - 1e-9) <= v <= hi * (1 + 1e-9)

    def test_not_worse_than_start_points_and_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(12, 2))
        y = np.sin(6 * x[:, 0]) + x[:, 1]
        a = tune_hyperparameters(x, y, rng=np.random.default_rng(11))
        b = tune_hyperparameters(x, y, rng=np.random.default_rng(11))
        assert a == b
        starts = np.random.default_rng(11)
        log_b = np.log(np.asarray(DEFAULT_BOUNDS))
        best = log_marginal_likelihood(x, y, a)
        for _ in range(8):
            p0 = Hyperparams.from_log(starts.uniform(log_b[:, 0], log_b[:, 1]))
            try:
                assert best >= log_marginal_likelihood(x, y, p0) - 1e-9
            except FactorizationError:
                pass

    def test_one_point_rejected(self):
        with pytest.raises(ValueError):
            tune_hyperparameters([[0.1]], [1.0])


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    s = gp_fit(rng.uniform(size=(6, 2)), rng.normal(size=6), Hyperparams(1.3, 0.4, 0.02), standardize=True)
    path = tmp_path / "state.json"
    path.write_text(json.dumps(s.to_dict()))
    r = GPState.from_dict(json.loads(path.read_text()))
    np.testing.assert_array_equal(r.l, s.l)
    probe = rng.uniform(size=(5, 2))
    np.testing.assert_array_equal(posterior_batch(r, probe)[0], posterior_batch(s, probe)[0])
