"""Exact numerical checks of the Bellman-error bounds and oracle equivalences.

Each suite draws random tabular instances from one seed and reports, per
property, the worst violation seen: ``lhs - rhs`` for inequalities and the
absolute deviation for identities. A property passes when the worst
violation is within its tolerance.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .candidates import FqiSpec, fqi_train
from .data import DatasetSplit, Policy, derive_seed, tabular_q
from .regression import CellMean
from .selectors import estimate_backup, fqe_q_function, sbv_score
from .tabular import (TabularMdp, bellman_backup_exact, empirical_mdp, estimation_error_exact,
                      greedy_table, msbe_exact, policy_q_exact, policy_state_values,
                      population_emsbe_exact, random_tabular_mdp,
                      sample_tabular_dataset, target_variance_exact, value_iteration)


@dataclass(frozen=True)
class CheckResult:
    name: str
    cases: int
    worst: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.worst <= self.tolerance


class _Tracker:
    def __init__(self, tolerances: dict[str, float]):
        self.tol = tolerances
        self.worst = {k: -math.inf for k in tolerances}
        self.cases = {k: 0 for k in tolerances}

    def add(self, name: str, violation: float):
        self.worst[name] = max(self.worst[name], float(violation))
        self.cases[name] += 1

    def results(self, seconds: float) -> list[CheckResult]:
        return [CheckResult(k, self.cases[k], self.worst[k], self.tol[k], seconds) for k in self.tol]


def _random_q(rng: np.random.Generator, mdp: TabularMdp, q_star: np.ndarray) -> np.ndarray:
    """Alternate between arbitrary tables and small perturbations of Q*."""
    shape = q_star.shape
    scale = 1.0 / (1.0 - mdp.gamma)
    kind = rng.integers(3)
    if kind == 0:
        return rng.uniform(-scale, scale, size=shape)
    if kind == 1:
        return q_star + rng.normal(0.0, 10.0 ** rng.uniform(-4, 0), size=shape)
    return q_star + rng.uniform(-scale, scale) * np.ones(shape)


def _greedy_value_gap(mdp: TabularMdp, q: np.ndarray, q_star: np.ndarray) -> tuple[float, float]:
    """(J(pi*) - J(pi_q), ||V* - V^{pi_q}||_inf)."""
    v_star = policy_state_values(mdp, greedy_table(q_star))
    v_q = policy_state_values(mdp, greedy_table(q))
    return float(mdp.d0 @ (v_star - v_q)), float(np.max(np.abs(v_star - v_q)))


_PROP_TOLERANCES = {"coverage_estimation": 1e-8, "coverage_regret": 1e-8, "variance_identity": 1e-10,
                    "supnorm_estimation": 1e-8, "supnorm_regret": 1e-8, "contraction": 1e-10,
                    "bound_constants": 0.0}


def _check_mdp(tr: _Tracker, mdp: TabularMdp, rng: np.random.Generator, q_per_mdp: int) -> None:
    g, psi = mdp.gamma, mdp.psi
    q_star = value_iteration(mdp)
    # the estimation constant is the smaller of the two (checked as arithmetic)
    if 0 < g and psi < 1:
        tr.add("bound_constants", 1 / (math.sqrt(psi) * (1 - g)) - 2 / (psi * (1 - g) ** 2))
    for _ in range(q_per_mdp):
        q = _random_q(rng, mdp, q_star)
        msbe = msbe_exact(mdp, q)
        eps = math.sqrt(msbe)
        tr.add("coverage_estimation", estimation_error_exact(mdp, q, q_star) - msbe / (psi * (1 - g) ** 2))
        regret, sup_regret = _greedy_value_gap(mdp, q, q_star)
        tr.add("coverage_regret", regret - 2 * eps / (psi * (1 - g) ** 2))
        tr.add("variance_identity", abs(population_emsbe_exact(mdp, q) - msbe - target_variance_exact(mdp, q)))
        berr = float(np.max(np.abs(q - bellman_backup_exact(mdp, q))))
        tr.add("supnorm_estimation", float(np.max(np.abs(q - q_star))) - berr / (1 - g))
        tr.add("supnorm_regret", sup_regret - 2 * berr / (1 - g) ** 2)
        q2 = _random_q(rng, mdp, q_star)
        lhs = float(np.max(np.abs(bellman_backup_exact(mdp, q) - bellman_backup_exact(mdp, q2))))
        tr.add("contraction", lhs - g * float(np.max(np.abs(q - q2))))


def proposition_suite(num_mdps: int = 200, q_per_mdp: int = 5, seed: int = 0,
                      max_states: int = 6, max_actions: int = 3) -> list[CheckResult]:
    """Coverage bounds, the EMSBE variance identity, sup-norm bounds and contraction.

    For a weighting with minimum mass ``psi`` and ``eps = sqrt(MSBE(q))``:

    * ``||q - Q*||^2_w <= eps^2 / (psi (1 - gamma)^2)``
    * ``J(pi*) - J(pi_q) <= 2 eps / (psi (1 - gamma)^2)``
    * ``EMSBE(q) - MSBE(q) = sum_w Var[target | s, a]``
    * ``||q - Q*||_inf <= ||q - B*q||_inf / (1 - gamma)``
    * ``||V* - V^{pi_q}||_inf <= 2 ||q - B*q||_inf / (1 - gamma)^2``
    * ``||B*q1 - B*q2||_inf <= gamma ||q1 - q2||_inf``
    """
    t0 = time.perf_counter()
    tr = _Tracker(_PROP_TOLERANCES)
    for i in range(num_mdps):
        rng = np.random.default_rng(derive_seed(seed, "props", i))
        S = int(rng.integers(1, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        noise = "stochastic" if rng.random() < 0.5 else "deterministic"
        mdp = random_tabular_mdp(derive_seed(seed, "mdp", i), S, A, noise,
                                 deterministic_transitions=bool(rng.random() < 0.2))
        _check_mdp(tr, mdp, rng, q_per_mdp)
    return tr.results(time.perf_counter() - t0)


def mdp_suite(mdps: list[TabularMdp], q_per_mdp: int = 5, seed: int = 0) -> list[CheckResult]:
    """The checks of :func:`proposition_suite` on given MDPs with random Q-tables."""
    if any(m.psi <= 0 for m in mdps):
        raise ValueError("the coverage bounds need every weight to be positive")
    t0 = time.perf_counter()
    tr = _Tracker(_PROP_TOLERANCES)
    for i, mdp in enumerate(mdps):
        _check_mdp(tr, mdp, np.random.default_rng(derive_seed(seed, "given", i)), q_per_mdp)
    return tr.results(time.perf_counter() - t0)


def _index_policy(table: np.ndarray) -> Policy:
    table = np.asarray(table, dtype=float)
    return Policy(lambda s: table[s[:, 0].astype(np.int64)], table.shape[1], False, "table")


def sbv_exactness_suite(num_instances: int = 50, seed: int = 0) -> list[CheckResult]:
    """SBV with a per-cell mean backup, fit and scored on the same dataset,
    equals the exact MSBE of that dataset's empirical MDP."""
    t0 = time.perf_counter()
    tr = _Tracker({"sbv_equals_empirical_msbe": 1e-10})
    for i in range(num_instances):
        rng = np.random.default_rng(derive_seed(seed, "exactness", i))
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mdp = random_tabular_mdp(derive_seed(seed, "exactness-mdp", i), S, A)
        data = sample_tabular_dataset(mdp, int(rng.integers(S * A, 200)), derive_seed(seed, "exactness-data", i),
                                      cover_all=bool(rng.random() < 0.5))
        emp = empirical_mdp(data, S, mdp.gamma)
        table = rng.uniform(-2, 2, size=(S, A))
        q = tabular_q(table)
        split = DatasetSplit(data, data, 0)
        est = estimate_backup(q, split, [CellMean()], mdp.gamma)
        got = sbv_score(q, est, data).score
        tr.add("sbv_equals_empirical_msbe", abs(got - msbe_exact(emp, table)))
    return tr.results(time.perf_counter() - t0)


def fqi_equivalence_suite(num_instances: int = 20, seed: int = 0, iterations: int = 60,
                          gamma: float = 0.5) -> list[CheckResult]:
    """FQI with a per-cell mean regressor reproduces value iteration on the empirical MDP."""
    t0 = time.perf_counter()
    tr = _Tracker({"fqi_matches_value_iteration": 1e-6})
    for i in range(num_instances):
        rng = np.random.default_rng(derive_seed(seed, "fqi", i))
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mdp = random_tabular_mdp(derive_seed(seed, "fqi-mdp", i), S, A, gamma=gamma)
        data = sample_tabular_dataset(mdp, int(rng.integers(S * A, 200)), derive_seed(seed, "fqi-data", i))
        emp = empirical_mdp(data, S, gamma)
        q = fqi_train(FqiSpec(CellMean(), iterations, gamma), data)
        states = np.arange(S, dtype=float)[:, None]
        tr.add("fqi_matches_value_iteration", float(np.max(np.abs(q.values(states) - value_iteration(emp)))))
    return tr.results(time.perf_counter() - t0)


def fqe_equivalence_suite(num_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """FQE with a per-cell mean regressor reproduces the linear-solve Q^pi of the empirical MDP."""
    t0 = time.perf_counter()
    tr = _Tracker({"fqe_matches_linear_solve": 1e-8})
    for i in range(num_instances):
        rng = np.random.default_rng(derive_seed(seed, "fqe", i))
        S, A = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        gamma = float(rng.uniform(0.0, 0.9))
        mdp = random_tabular_mdp(derive_seed(seed, "fqe-mdp", i), S, A, gamma=gamma)
        data = sample_tabular_dataset(mdp, int(rng.integers(S * A, 200)), derive_seed(seed, "fqe-data", i))
        emp = empirical_mdp(data, S, gamma)
        table = rng.dirichlet(np.ones(A), size=S)
        # gamma^K times the value range falls far below the tolerance
        K = max(1, math.ceil(math.log(1e-13) / math.log(gamma))) if gamma > 0 else 1
        q = fqe_q_function(_index_policy(table), data, CellMean(), K, gamma)
        states = np.arange(S, dtype=float)[:, None]
        tr.add("fqe_matches_linear_solve", float(np.max(np.abs(q.values(states) - policy_q_exact(emp, table)))))
    return tr.results(time.perf_counter() - t0)


def run_all(num_mdps: int = 200, seed: int = 0) -> list[CheckResult]:
    """Every suite at its default size; ``num_mdps`` scales the proposition suite."""
    return (proposition_suite(num_mdps, seed=seed) + sbv_exactness_suite(seed=seed)
            + fqi_equivalence_suite(seed=seed) + fqe_equivalence_suite(seed=seed))


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':32s} {'cases':>6s} {'worst':>12s} {'tol':>8s}  result"]
    for r in results:
        lines.append(f"{r.name:32s} {r.cases:6d} {r.worst:12.3e} {r.tolerance:8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

