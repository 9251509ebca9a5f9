import numpy as np
import pytest

from sbv.candidates import (Candidate, CandidateSet, FqiSpec, MANIFEST_HEADER, assemble_candidates,
                            fqi_grid_candidates, fqi_iterates, fqi_train, manifest_rows, min_emsbe_fit,
                            read_manifest, write_manifest, zero_candidate)
from sbv.data import MdpConfig, OfflineDataset, Trajectory, tabular_q, zero_q
from sbv.regression import CellMean, DesignMatrix, PolyRidge, RegressionError, fit, poly_ridge_grid
from sbv.tabular import (bellman_backup_exact, chain2_mdp, coin1_mdp, empirical_mdp, random_tabular_mdp,
                         sample_tabular_dataset, value_iteration)

CHAIN2_Q_STAR = np.array([[1.0, 2.0], [2.0, 2.0]])


def toy_like(seed=0, n=30):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n // 5):
        s = rng.normal(size=(6, 2))
        trajs.append(Trajectory(i, s[:-1], rng.integers(2, size=5), rng.normal(size=5), s[1:], np.zeros(5, bool)))
    return OfflineDataset(tuple(trajs), MdpConfig(2, 2))


def q_table(q, num_states):
    return q.values(np.arange(float(num_states))[:, None])


class TestFqi:
    def test_one_iteration_regresses_rewards(self):
        data = toy_like()
        q = fqi_train(FqiSpec(PolyRidge(2, 0.1), 1, 0.7), data)
        b = data.batch
        direct = fit(PolyRidge(2, 0.1), DesignMatrix(b.states, b.rewards, b.actions, 2))
        assert np.allclose(q(b.states, b.actions), direct.predict(b.states, b.actions), atol=1e-10)

    def test_chain2_converges_to_q_star(self):
        data = sample_tabular_dataset(chain2_mdp(), 40, seed=0)
        q = fqi_train(FqiSpec(CellMean(), 50, 0.5), data)
        assert np.max(np.abs(q_table(q, 2) - CHAIN2_Q_STAR)) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_reaches_empirical_value_iteration(self, seed):
        mdp = random_tabular_mdp(seed, 4, 2, gamma=0.6)
        data = sample_tabular_dataset(mdp, 300, seed=seed)
        emp = empirical_mdp(data, 4, 0.6)
        K = 40
        q = fqi_train(FqiSpec(CellMean(), K, 0.6), data)
        target = value_iteration(emp)
        rng = np.ptp(emp.reward) / (1 - 0.6)
        assert np.max(np.abs(q_table(q, 4) - target)) <= 0.6**K * rng + 1e-9

    def test_iterates_follow_the_exact_backup(self):
        mdp = random_tabular_mdp(3, 3, 2, gamma=0.8)
        data = sample_tabular_dataset(mdp, 200, seed=1)
        emp = empirical_mdp(data, 3, 0.8)
        its = fqi_iterates(FqiSpec(CellMean(), 6, 0.8), data)
        prev = np.zeros((3, 2))
        for q in its:
            cur = q_table(q, 3)
            assert np.allclose(cur, bellman_backup_exact(emp, prev), atol=1e-12)
            prev = cur

    def test_successive_iterates_contract_at_gamma(self):
        mdp = random_tabular_mdp(7, 4, 2, gamma=0.7)
        data = sample_tabular_dataset(mdp, 400, seed=2)
        tables = [q_table(q, 4) for q in fqi_iterates(FqiSpec(CellMean(), 15, 0.7), data)]
        gaps = [np.max(np.abs(b - a)) for a, b in zip(tables, tables[1:])]
        assert all(g2 <= 0.7 * g1 + 1e-12 for g1, g2 in zip(gaps, gaps[1:]))

    def test_iterates_match_train_and_first_iterate(self):
        data = toy_like(1)
        spec = FqiSpec(PolyRidge(1, 1.0), 4, 0.9)
        its = fqi_iterates(spec, data)
        b = data.batch
        assert len(its) == 4
        assert np.array_equal(its[-1].values(b.states), fqi_train(spec, data).values(b.states))
        one = fqi_train(FqiSpec(PolyRidge(1, 1.0), 1, 0.9), data)
        assert np.array_equal(its[0].values(b.states), one.values(b.states))
        assert [q.meta["iterations"] for q in its] == [1, 2, 3, 4]

    def test_terminal_transitions_drop_bootstrap(self):
        t = Trajectory(0, [[0.0], [0.0]], [0, 0], [1.0, 1.0], [[0.0], [0.0]], [True, True])
        data = OfflineDataset((t,), MdpConfig(1, 1))
        q = fqi_train(FqiSpec(CellMean(), 10, 0.9), data)
        assert q.values(np.zeros((1, 1)))[0, 0] == pytest.approx(1.0)

    def test_failure_carries_iteration_index(self):
        data = OfflineDataset((Trajectory(0, [[0.0]], [0], [np.inf], [[0.0]], [False]),), MdpConfig(1, 1))
        with pytest.raises(RegressionError, match="iteration 1"):
            fqi_train(FqiSpec(PolyRidge(1), 3, 0.5), data)

    def test_rejects_zero_iterations(self):
        with pytest.raises(ValueError):
            FqiSpec(PolyRidge(1), 0)


class TestMinEmsbe:
    def test_gamma_zero_is_least_squares(self):
        data = toy_like(2)
        q = min_emsbe_fit(1, data, 0.0, steps=20000)
        b = data.batch
        ls = fit(PolyRidge(1, 0.0), DesignMatrix(b.states, b.rewards, b.actions, 2))
        assert np.allclose(q(b.states, b.actions), ls.predict(b.states, b.actions), atol=1e-6)

    def test_chain2_reaches_zero_emsbe(self):
        data = sample_tabular_dataset(chain2_mdp(), 40, seed=3)
        q = min_emsbe_fit(1, data, 0.5, steps=20000)
        assert q.meta["train_emsbe"] < 1e-10
        assert np.allclose(q_table(q, 2), CHAIN2_Q_STAR, atol=1e-5)

    def test_coin1_cannot_beat_noise(self):
        data = sample_tabular_dataset(coin1_mdp(), 200, seed=4)
        q = min_emsbe_fit(1, data, 0.0, steps=2000)
        b = data.batch
        cells = b.states[:, 0]
        # per-state means are the best any per-action linear fit can do in-sample
        floor = sum(np.sum((b.rewards[cells == c] - b.rewards[cells == c].mean()) ** 2)
                    for c in np.unique(cells)) / len(cells)
        assert q.meta["train_emsbe"] >= floor - 1e-12
        assert q.meta["train_emsbe"] == pytest.approx(floor, abs=1e-6)

    def test_rejects_degree_zero(self):
        with pytest.raises(ValueError):
            min_emsbe_fit(0, toy_like(), 0.5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        with pytest.raises(RegressionError, match="diverged"):
            min_emsbe_fit(2, toy_like(3), 0.9, steps=2000, lr=1e6)


class TestAssembly:
    def test_grid_plus_q_star_gives_thirty(self):
        data = toy_like(4)
        grid = poly_ridge_grid((1, 2, 3, 4, 5, 6), (0.0, 0.01, 0.1, 1.0, 10.0))[:29]
        fqi = fqi_grid_candidates(data, grid, 2, 0.9)
        cands = assemble_candidates(fqi, q_star=tabular_q(np.zeros((1, 2)), "q_star"))
        assert len(cands) == 30 and cands.ids[-1] == "q_star"

    def test_zero_alone(self):
        cands = assemble_candidates([zero_candidate(2)])
        assert len(cands) == 1 and cands[0].provenance["algorithm"] == "zero"

    def test_order_is_preserved(self):
        qs = [zero_q(2, f"z{i}") for i in (3, 1, 2)]
        assert assemble_candidates(qs[:2], qs[2:]).ids == ["z3", "z1", "z2"]

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            assemble_candidates([zero_q(2), zero_q(2)])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            assemble_candidates([])

    def test_lookup(self):
        c = Candidate("a", zero_q(2))
        s = CandidateSet((c,))
        assert s.by_id("a") is c
        with pytest.raises(KeyError):
            s.by_id("b")


class TestManifest:
    def test_round_trip(self, tmp_path):
        data = toy_like(5)
        cands = assemble_candidates(fqi_grid_candidates(data, [PolyRidge(2, 0.1), PolyRidge(3, 10.0)], 3, 0.9),
                                    [zero_candidate(2)])
        write_manifest(cands, tmp_path / "m.csv")
        rows = read_manifest(tmp_path / "m.csv")
        assert [r["id"] for r in rows] == cands.ids
        assert rows[0]["algorithm"] == "fqi" and rows[0]["degree"] == "2" and float(rows[0]["lambda"]) == 0.1
        assert rows[1]["iterations"] == "3" and rows[2]["algorithm"] == "zero"
        expected = [{k: format(v, ".17g") if isinstance(v, float) else str(v) for k, v in r.items()}
                    for r in manifest_rows(cands)]
        assert rows == expected

    def test_header(self, tmp_path):
        write_manifest(assemble_candidates([zero_candidate(2)]), tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(MANIFEST_HEADER)

    def test_rejects_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,foo\n")
        with pytest.raises(ValueError):
            read_manifest(tmp_path / "m.csv")
