import math

import numpy as np
import pytest

from sbv.tabular import chain2_mdp, random_tabular_mdp
from sbv.verify import (CheckResult, fqe_equivalence_suite, fqi_equivalence_suite, format_results,
                        mdp_suite, proposition_suite, sbv_exactness_suite)


class TestCheckResult:
    def test_pass_and_fail(self):
        assert CheckResult("x", 3, 1e-12, 1e-10).passed
        assert not CheckResult("x", 3, 1e-9, 1e-10).passed

    def test_no_cases_is_a_failure(self):
        assert not CheckResult("x", 0, -math.inf, 1.0).passed

    def test_format(self):
        text = format_results([CheckResult("alpha", 2, 0.5, 1.0), CheckResult("beta", 2, 2.0, 1.0)])
        lines = text.splitlines()
        assert lines[0].split()[0] == "check" and lines[1].endswith("PASS") and lines[2].endswith("FAIL")


class TestSuitesSmall:
    def test_propositions(self):
        results = proposition_suite(num_mdps=20, q_per_mdp=3, seed=1)
        assert {r.name for r in results} >= {"coverage_estimation", "coverage_regret", "variance_identity", "contraction"}
        assert all(r.passed for r in results), format_results(results)

    def test_sbv_exactness(self):
        assert all(r.passed for r in sbv_exactness_suite(10, seed=2))

    def test_fqi_equivalence(self):
        assert all(r.passed for r in fqi_equivalence_suite(5, seed=3))

    def test_fqe_equivalence(self):
        assert all(r.passed for r in fqe_equivalence_suite(5, seed=4))

    def test_same_seed_same_worst(self):
        a = proposition_suite(num_mdps=5, q_per_mdp=2, seed=9)
        b = proposition_suite(num_mdps=5, q_per_mdp=2, seed=9)
        assert [r.worst for r in a] == [r.worst for r in b]


class TestGivenMdps:
    def test_random_mdps_pass(self):
        results = mdp_suite([random_tabular_mdp(s, 3, 2) for s in range(5)], q_per_mdp=3)
        assert all(r.passed for r in results) and results[0].cases == 15

    def test_rejects_zero_weight(self):
        mdp = chain2_mdp()
        with pytest.raises(ValueError, match="positive"):
            mdp_suite([mdp.with_weights(np.array([[1.0, 0.0], [0.0, 0.0]]))])
