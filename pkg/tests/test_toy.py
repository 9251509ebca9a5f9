import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbv.data import constant_policy, greedy_policy, uniform_policy, write_dataset_csv, zero_q
from sbv.toy import (KnnMsbeOracle, ToyConfig, approx_q_star, exact_q_star, generate_dataset,
                     rollout_value_and_se, simulate, step, step_batch)

SMALL_ORACLE = {"k": 20, "fit_shape": (200, 50), "eval_shape": (100, 10)}


class TestConfig:
    @pytest.mark.parametrize("phi", [-0.01, 0.26])
    def test_rejects_phi_out_of_range(self, phi):
        with pytest.raises(ValueError):
            ToyConfig(phi)

    def test_x_and_phi(self):
        assert ToyConfig.from_x(0.6).phi == pytest.approx(0.15)
        assert ToyConfig(0.0).x == 0.75


class TestStep:
    def test_deterministic_example(self):
        s2, r = step(ToyConfig(0.0), [1.0, 0.0, 0.0, 0.0], 1, np.random.default_rng(0))
        assert s2[0] == pytest.approx(np.sqrt(0.75) + 0.5, abs=1e-15)
        assert s2[0] == pytest.approx(1.3660254037844386, abs=1e-15)
        assert r == s2[0]
        assert np.array_equal(s2[1:], np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(phi=st.floats(0, 0.25), seed=st.integers(0, 10**6))
    def test_action_gap_is_one(self, phi, seed):
        cfg = ToyConfig(phi)
        rng = np.random.default_rng(seed)
        s, noise = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        a1, _ = step_batch(cfg, s, np.array([1]), noise)
        a0, _ = step_batch(cfg, s, np.array([0]), noise)
        assert a1[0, 0] - a0[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(a1[0, 1:], a0[0, 1:])

    def test_rejects_bad_action(self):
        with pytest.raises(ValueError):
            step(ToyConfig(), np.zeros(4), 2, np.random.default_rng(0))

    @pytest.mark.parametrize("phi", [0.0, 0.1, 0.25])
    def test_stationary_moments_under_uniform_actions(self, phi):
        S, _, _, _ = simulate(ToyConfig(phi), uniform_policy(2), 20000, 10, seed=3)
        for t in (0, 4, 9):
            assert np.all(np.abs(S[:, t].mean(axis=0)) < 0.05)
            assert np.all(np.abs(S[:, t].var(axis=0) - 1.0) < 0.06)


class TestDataset:
    def test_size(self):
        d = generate_dataset(ToyConfig(0.1, 25, 25, seed=4))
        assert d.num_transitions == 625 and len(d) == 25
        assert all(t.is_chained() for t in d.trajectories)

    def test_same_seed_byte_identical_csv(self, tmp_path):
        for name in ("a", "b"):
            write_dataset_csv(generate_dataset(ToyConfig(0.2, 5, 7, seed=9)), tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_action_frequency(self):
        a = generate_dataset(ToyConfig(0.25, 40, 25, seed=1)).batch.actions
        n = len(a)
        assert abs(a.mean() - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_reward_start_zeroes_early_rewards(self):
        d = generate_dataset(ToyConfig(0.25, 3, 25, seed=0, reward_start=20))
        r = np.stack([t.rewards for t in d.trajectories])
        assert np.all(r[:, :20] == 0) and np.all(r[:, 20:] != 0)


class TestRollouts:
    @pytest.mark.parametrize("phi", [0.0, 0.25])
    def test_always_one_beats_always_zero(self, phi):
        cfg = ToyConfig(phi)
        v1, _ = rollout_value_and_se(cfg, constant_policy(1, 2), 500, 50, 1.0, seed=2)
        v0, _ = rollout_value_and_se(cfg, constant_policy(0, 2), 500, 50, 1.0, seed=2)
        assert v1 > v0

    def test_gamma_zero_is_first_reward(self):
        cfg = ToyConfig(0.25)
        v, _ = rollout_value_and_se(cfg, constant_policy(1, 2), 4000, 30, 0.0, seed=0)
        v_short, _ = rollout_value_and_se(cfg, constant_policy(1, 2), 4000, 1, 1.0, seed=0)
        assert v == pytest.approx(v_short, abs=1e-12)
        assert v == pytest.approx(0.5, abs=0.05)

    def test_standard_error_shrinks_by_root_two(self):
        cfg = ToyConfig(0.25)
        _, se1 = rollout_value_and_se(cfg, uniform_policy(2), 2000, 20, 1.0, seed=5)
        _, se2 = rollout_value_and_se(cfg, uniform_policy(2), 4000, 20, 1.0, seed=6)
        assert se1 / se2 == pytest.approx(np.sqrt(2), rel=0.1)


class TestQStar:
    def test_approx_is_linear_in_a_and_s1(self):
        q = approx_q_star(ToyConfig(0.25), 2000, 50, seed=1)
        rng = np.random.default_rng(0)
        s = rng.normal(size=(10, 4))
        s_other = s.copy()
        s_other[:, 1:] = rng.normal(size=(10, 3))
        assert np.allclose(q.values(s), q.values(s_other))
        adv = q.values(s)[:, 1] - q.values(s)[:, 0]
        assert np.all(adv > 0) and np.allclose(adv, adv[0])

    def test_exact_q_star_is_fixed_point_in_deterministic_case(self):
        cfg = ToyConfig(0.0)
        q = exact_q_star(cfg, 0.9)
        s = np.random.default_rng(0).normal(size=(50, 4))
        for a in (0, 1):
            s2, r = step_batch(cfg, s, np.full(50, a), np.zeros((50, 4)))
            assert np.allclose(q(s, np.full(50, a)), r + 0.9 * q.max(s2), atol=1e-10)

    def test_approx_matches_exact_coefficients(self):
        cfg = ToyConfig(0.1)
        approx, exact = approx_q_star(cfg, 10000, 100, seed=0), exact_q_star(cfg)
        for key in ("action_coef", "s1_coef"):
            assert approx.meta[key] == pytest.approx(exact.meta[key], rel=0.05)

    def test_greedy_approx_is_optimal_policy(self):
        cfg = ToyConfig(0.25)
        pol = greedy_policy(approx_q_star(cfg, 10000, 100, seed=3))
        v_hat, se = rollout_value_and_se(cfg, pol, 1000, 100, 1.0, seed=8)
        v_star, se_star = rollout_value_and_se(cfg, constant_policy(1, 2), 1000, 100, 1.0, seed=8)
        assert abs(v_hat - v_star) <= 2 * np.hypot(se, se_star)


class TestKnnOracle:
    def test_exact_q_star_sits_at_the_smoothing_floor(self):
        # deterministic case: every fit target equals Q*(s, a), so the oracle's
        # MSBE of Q* is exactly the neighbour-averaging error of Q* itself
        cfg = ToyConfig(0.0)
        q = exact_q_star(cfg)
        oracle = KnnMsbeOracle(cfg, seed=0, **SMALL_ORACLE)
        smoothed = q(oracle.fit_states, oracle.fit_actions)[oracle.neighbors].mean(axis=1)
        floor = float(np.mean((q(oracle.eval_states, oracle.eval_actions) - smoothed) ** 2))
        assert oracle.msbe(q) == pytest.approx(floor, rel=1e-9)

    def test_exact_q_star_small_at_default_resolution(self):
        cfg = ToyConfig(0.0)
        oracle = KnnMsbeOracle(cfg, seed=0)
        assert oracle.msbe(exact_q_star(cfg)) < 0.05 * oracle.msbe(zero_q(2))

    def test_zero_worse_than_q_star(self):
        cfg = ToyConfig(0.25)
        oracle = KnnMsbeOracle(cfg, seed=1, **SMALL_ORACLE)
        assert oracle.msbe(zero_q(2)) > oracle.msbe(approx_q_star(cfg, 4000, 100, seed=0))

    def test_homogeneous_with_zero_reward(self):
        cfg = ToyConfig(0.25)
        oracle = KnnMsbeOracle(cfg, seed=2, **SMALL_ORACLE)
        oracle.fit_rewards = np.zeros_like(oracle.fit_rewards)
        q = exact_q_star(cfg)
        assert oracle.msbe(q.scaled(3.0)) == pytest.approx(9.0 * oracle.msbe(q), rel=1e-10)

    def test_same_seed_same_value(self):
        cfg = ToyConfig(0.2)
        a = KnnMsbeOracle(cfg, seed=3, **SMALL_ORACLE).msbe(exact_q_star(cfg))
        b = KnnMsbeOracle(cfg, seed=3, **SMALL_ORACLE).msbe(exact_q_star(cfg))
        assert a == b
