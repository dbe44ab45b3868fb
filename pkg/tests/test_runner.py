import csv
import math

import numpy as np
import pytest

from sugarpolicy import gp, runner
from sugarpolicy.metrics import ObjectiveKind
from sugarpolicy.sim import PolicyVector, SimParams, StateVector

TINY = SimParams(n_agents=20, n_steps=15, width=10, height=10)
POLICY = PolicyVector(0.2, 0.1, 10.0)
STATE = StateVector()


def undefined_metrics(policy, state, params, seed):
    value = math.nan if seed % 4 else 1.0
    return {k: value for k in ObjectiveKind}


def test_functionals():
    assert runner.apply_functional([0.1, 0.2, 0.3]) == pytest.approx(0.2, abs=1e-15)
    assert runner.apply_functional([5.0, 1.0, 3.0], "q05") == pytest.approx(1.2)
    assert math.isnan(runner.apply_functional([]))
    with pytest.raises(ValueError):
        runner.apply_functional([1.0], "median")


class TestEvaluate:
    def test_single_replicate(self):
        rec = runner.evaluate_objective(POLICY, STATE, "gini", 1, 77, TINY)
        direct = runner.simulate_metrics(POLICY, STATE, TINY, 77)[ObjectiveKind.GINI]
        assert rec.psi == direct and rec.values == [direct]
        assert rec.objective == rec.psi

    def test_maximised_kinds_are_negated(self):
        rec = runner.evaluate_objective(POLICY, STATE, "survival", 2, 0, TINY)
        assert rec.objective == -rec.psi

    def test_seed_prefix(self):
        short = runner.evaluate_objective(POLICY, STATE, "welfare", 3, 100, TINY)
        long = runner.evaluate_objective(POLICY, STATE, "welfare", 6, 100, TINY)
        assert long.values[:3] == short.values

    def test_record_invariants(self):
        rec = runner.evaluate_all(POLICY, STATE, 8, 0, TINY, replicate_fn=undefined_metrics)
        r = rec[ObjectiveKind.GINI]
        assert r.n_replicates - r.n_dropped == len(r.values) == 2
        assert r.degenerate
        assert r.psi == 1.0

    def test_parallel_matches_serial(self):
        serial = runner.evaluate_all(POLICY, STATE, 4, 5, TINY, workers=1)
        parallel = runner.evaluate_all(POLICY, STATE, 4, 5, TINY, workers=2)
        for kind in ObjectiveKind:
            assert serial[kind].values == parallel[kind].values
            assert serial[kind].psi == parallel[kind].psi

    def test_order_independent(self):
        seeds = list(range(10, 15))
        forward = runner.run_replicates(POLICY, STATE, TINY, seeds)
        backward = runner.run_replicates(POLICY, STATE, TINY, seeds[::-1])[::-1]
        assert forward == backward

    def test_bad_replicate_count(self):
        with pytest.raises(ValueError):
            runner.evaluate_objective(POLICY, STATE, "gini", 0, 0, TINY)


def test_default_workers(monkeypatch):
    monkeypatch.setenv(runner.WORKERS_ENV, "3")
    assert runner.default_workers() == 3
    monkeypatch.setenv(runner.WORKERS_ENV, "lots")
    assert runner.default_workers() == 1


class TestObjective:
    def test_seed_bases(self):
        f = runner.AbmObjective("gini", STATE, 2, master_seed=9, params=TINY)
        f([0.1, 0.1, 8.0])
        f([0.5, 0.0, 12.0])
        assert [r.seed_base for r in f.records] == [9, 9 + 10 ** 6]

    def test_degenerate_is_nan(self):
        f = runner.AbmObjective("gini", STATE, 4, 1, TINY, replicate_fn=undefined_metrics)
        assert math.isnan(f([0.0, 0.0, 8.0]))

    def test_optimize_policy(self):
        history, objective = runner.optimize_policy(
            "welfare", STATE, m=3, M=2, replicates=2, params=TINY,
            fit_config=gp.FitConfig(n_iter=100))
        assert len(history) == len(objective.records) == 5
        assert history.best_value == -objective.records[history.best_index].psi
        assert all(runner.POLICY_BOUNDS.contains(x) for x in history.X)


class TestSensitivityExperiment:
    def test_writes_csv(self, tmp_path):
        exp = runner.sensitivity_experiment(
            ["gini", "survival"], "metabolism_max", n=12, replicates=2, params=TINY,
            fit_config=gp.FitConfig(n_iter=100))
        assert set(exp.design[:, 3]) <= {1.0, 2.0, 3.0, 4.0, 5.0}
        exp.write(tmp_path)
        with open(tmp_path / "sensitivity_metabolism_max.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["objective"] for r in rows] == ["gini", "survival"]
        assert all(r["nu"] == "4" for r in rows)
        design = np.genfromtxt(tmp_path / "sensitivity_metabolism_max_design.csv",
                               delimiter=",", names=True)
        assert len(design) == 12

    def test_unknown_state_variable(self):
        with pytest.raises(ValueError):
            runner.sensitivity_experiment(["gini"], "rainfall", n=10, replicates=1, params=TINY)

    def test_noise_control(self):
        """Seeded noise in place of the model: rejections stay rare."""
        rejections = 0
        for seed in range(20):
            exp = runner.sensitivity_experiment(
                ["gini"], "pollution_rate", n=40, replicates=1, master_seed=seed,
                replicate_fn=runner.noise_metrics)
            rejections += exp.reports[0].reject
        # 99.7% point of Bin(20, 0.05) is 4
        assert rejections <= 4
