import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbv.tabular import (TabularMdp, bellman_backup_exact, chain2_mdp, coin1_mdp, empirical_mdp,
                         estimation_error_exact, greedy_table, msbe_exact, policy_q_exact,
                         policy_value_exact, population_emsbe_exact, random_tabular_mdp,
                         read_tabular_mdp, sample_tabular_dataset, target_variance_exact,
                         value_iteration, write_tabular_mdp)

CHAIN2_Q_STAR = np.array([[1.0, 2.0], [2.0, 2.0]])
CHAIN2_BACKUP_OF_ZERO = np.array([[0.0, 1.0], [1.0, 1.0]])

mdp_params = st.tuples(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 3))


class TestNamedInstances:
    def test_chain2_backup_of_zero(self):
        assert np.array_equal(bellman_backup_exact(chain2_mdp(), np.zeros((2, 2))), CHAIN2_BACKUP_OF_ZERO)

    def test_chain2_q_star(self):
        assert np.allclose(value_iteration(chain2_mdp()), CHAIN2_Q_STAR, atol=1e-9)

    def test_chain2_policy_value(self):
        assert policy_value_exact(chain2_mdp(), np.array([[0.0, 1.0], [0.0, 1.0]])) == pytest.approx(2.0, abs=1e-12)

    def test_chain2_msbe_of_zero(self):
        assert msbe_exact(chain2_mdp(), np.zeros((2, 2))) == pytest.approx(0.75, abs=1e-15)

    def test_chain2_estimation_error_of_zero(self):
        assert estimation_error_exact(chain2_mdp(), np.zeros((2, 2))) == pytest.approx(3.25, abs=1e-9)

    def test_chain2_emsbe_equals_msbe(self):
        q = np.array([[0.3, -1.0], [2.0, 0.5]])
        assert population_emsbe_exact(chain2_mdp(), q) == msbe_exact(chain2_mdp(), q)

    @pytest.mark.parametrize("c", [-2.0, 0.0, 0.5, 3.0])
    def test_coin1(self, c):
        mdp, q = coin1_mdp(), np.full((2, 1), c)
        assert np.allclose(bellman_backup_exact(mdp, q), 0.0)
        assert msbe_exact(mdp, q) == pytest.approx(c**2, abs=1e-15)
        assert population_emsbe_exact(mdp, q) == pytest.approx(c**2 + 1, abs=1e-15)
        assert target_variance_exact(mdp, q) == pytest.approx(1.0, abs=1e-15)

    def test_coin1_q_star_and_value(self):
        assert np.allclose(value_iteration(coin1_mdp()), 0.0)
        assert policy_value_exact(coin1_mdp(), np.ones((2, 1))) == pytest.approx(0.0, abs=1e-15)


class TestValidation:
    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            TabularMdp(np.full((1, 1, 2), 0.4), 0.0, [1.0], 0.5, [[1.0]])

    def test_rejects_gamma_one(self):
        with pytest.raises(ValueError):
            chain2_mdp().with_gamma(1.0)


class TestRandomMdp:
    def test_same_seed_same_mdp(self):
        a, b = random_tabular_mdp(4, 3, 2), random_tabular_mdp(4, 3, 2)
        assert np.array_equal(a.transition, b.transition) and np.array_equal(a.weights, b.weights)

    @settings(max_examples=40, deadline=None)
    @given(p=mdp_params)
    def test_construction(self, p):
        seed, S, A = p
        m = random_tabular_mdp(seed, S, A)
        assert np.allclose(m.transition.sum(axis=2), 1.0, atol=1e-12, rtol=0)
        assert m.psi >= min(0.01, 1 / (S * A)) - 1e-15
        assert abs(m.weights.sum() - 1) < 1e-12


class TestOracleProperties:
    @settings(max_examples=30, deadline=None)
    @given(p=mdp_params)
    def test_q_star_is_fixed_point(self, p):
        m = random_tabular_mdp(*p)
        q = value_iteration(m)
        assert np.max(np.abs(bellman_backup_exact(m, q) - q)) < 1e-8
        assert msbe_exact(m, q) < 1e-15
        assert estimation_error_exact(m, q) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(p=mdp_params, qs=st.integers(0, 10**6))
    def test_contraction(self, p, qs):
        m = random_tabular_mdp(*p)
        rng = np.random.default_rng(qs)
        q1, q2 = rng.normal(size=(2, m.num_states, m.num_actions))
        lhs = np.max(np.abs(bellman_backup_exact(m, q1) - bellman_backup_exact(m, q2)))
        assert lhs <= m.gamma * np.max(np.abs(q1 - q2)) + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(p=mdp_params, qs=st.integers(0, 10**6))
    def test_variance_decomposition(self, p, qs):
        m = random_tabular_mdp(*p)
        q = np.random.default_rng(qs).normal(size=(m.num_states, m.num_actions))
        lhs = population_emsbe_exact(m, q)
        assert lhs == pytest.approx(msbe_exact(m, q) + target_variance_exact(m, q), abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(p=mdp_params, t=st.floats(0.0, 1.0))
    def test_estimation_error_monotone_under_shrinkage(self, p, t):
        m = random_tabular_mdp(*p)
        q_star = value_iteration(m)
        q = q_star + np.random.default_rng(p[0]).normal(size=q_star.shape)
        shrunk = q_star + t * (q - q_star)
        assert estimation_error_exact(m, shrunk, q_star) <= estimation_error_exact(m, q, q_star) + 1e-12

    @pytest.mark.parametrize("seed", range(15))
    def test_greedy_q_star_is_optimal_among_deterministic_policies(self, seed):
        m = random_tabular_mdp(seed, 3, 2)
        best = max(policy_value_exact(m, np.eye(2)[list(acts)])
                   for acts in itertools.product(range(2), repeat=3))
        assert policy_value_exact(m, greedy_table(value_iteration(m))) == pytest.approx(best, abs=1e-9)

    def test_value_iteration_contracts_at_gamma(self):
        m = random_tabular_mdp(1, 4, 2, gamma=0.7)
        q_star = value_iteration(m)
        q = np.zeros_like(q_star)
        for _ in range(10):
            nxt = bellman_backup_exact(m, q)
            assert np.max(np.abs(nxt - q_star)) <= 0.7 * np.max(np.abs(q - q_star)) + 1e-12
            q = nxt

    def test_policy_q_solves_linear_system(self):
        m = random_tabular_mdp(5, 4, 3)
        pi = np.random.default_rng(0).dirichlet(np.ones(3), size=4)
        q = policy_q_exact(m, pi)
        target = m.expected_reward + m.gamma * np.einsum("sat,t->sa", m.transition, np.sum(pi * q, axis=1))
        assert np.allclose(q, target, atol=1e-12)


class TestEmpirical:
    def test_sample_covers_all_cells(self):
        m = random_tabular_mdp(2, 3, 2)
        d = sample_tabular_dataset(m, 50, seed=0)
        emp = empirical_mdp(d, 3, m.gamma)
        assert emp.psi > 0

    def test_empirical_converges(self):
        m = random_tabular_mdp(3, 2, 2)
        emp = empirical_mdp(sample_tabular_dataset(m, 40000, seed=1), 2, m.gamma)
        assert np.max(np.abs(emp.transition - m.transition)) < 0.03

    def test_file_round_trip(self, tmp_path):
        m = random_tabular_mdp(9, 3, 2)
        write_tabular_mdp(m, tmp_path / "m.txt")
        back = read_tabular_mdp(tmp_path / "m.txt")
        for name in ("transition", "reward", "d0", "weights"):
            assert np.array_equal(getattr(m, name), getattr(back, name))
        assert back.gamma == m.gamma
