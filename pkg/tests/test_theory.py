import numpy as np
import pytest

from deferlab.errors import UnsupportedTaskError
from deferlab.evaluation import area_under
from deferlab.experts import sample_complexity_bound
from deferlab.harness import run_theory_checks
from deferlab.simulate import SyntheticTaskSpec
from deferlab.theory import (
    TrialConfig,
    bayes_optimal_reference,
    misidentification_rate,
    posterior_convergence_errors,
)


class TestPosteriorConvergence:
    def test_certain_expert_closed_form_error(self):
        rng = np.random.default_rng(0)
        schedule = [1, 10, 100, 1000]
        errors = posterior_convergence_errors(1.0, schedule, rng)
        for n, err in zip(schedule, errors):
            assert err == pytest.approx(1.0 / (2 + n), abs=1e-15)

    def test_no_observations_uniform_prior(self):
        rng = np.random.default_rng(0)
        assert posterior_convergence_errors(0.5, [0], rng) == [0.0]

    def test_large_sample_median_error_small(self):
        rng = np.random.default_rng(12)
        errors = [posterior_convergence_errors(0.7, [100_000], rng)[0] for _ in range(1000)]
        assert np.median(errors) < 0.005

    def test_median_errors_shrink_along_schedule(self):
        schedule = [10, 100, 1000, 10_000, 100_000]
        rng = np.random.default_rng(3)
        per_step = np.array(
            [posterior_convergence_errors(0.7, schedule, rng) for _ in range(1000)]
        )
        medians = np.median(per_step, axis=0)
        assert np.all(np.diff(medians) <= 0)

    def test_invalid_theta_rejected(self):
        with pytest.raises(ValueError):
            posterior_convergence_errors(1.5, [10], np.random.default_rng(0))


class TestMisidentificationRate:
    def test_no_samples_predicts_class_zero(self):
        # with n=0 every posterior mean is 0.5 and the argmax tie-break
        # lands on class 0
        cfg = TrialConfig(3, np.array([0.5, 0.9, 0.5]), 1, 0, 50, 0.05, seed=0)
        assert misidentification_rate(cfg) == 1.0
        cfg0 = TrialConfig(3, np.array([0.9, 0.5, 0.5]), 0, 0, 50, 0.05, seed=0)
        assert misidentification_rate(cfg0) == 0.0

    def test_rate_within_bound_at_reference_cell(self):
        n = sample_complexity_bound(10, 0.05, 0.3)
        assert n == 134
        acc = np.full(10, 0.6)
        acc[3] = 0.9
        cfg = TrialConfig(10, acc, 3, n, 2000, 0.05, seed=7)
        assert misidentification_rate(cfg) <= 0.05

    def test_rate_shrinks_with_ten_times_bound(self):
        n = sample_complexity_bound(5, 0.1, 0.2)
        acc = np.full(5, 0.55)
        acc[2] = 0.75
        for seed in (0, 1, 2):
            small = misidentification_rate(TrialConfig(5, acc, 2, max(1, n // 10), 2000, 0.1, seed=seed))
            at_bound = misidentification_rate(TrialConfig(5, acc, 2, n, 2000, 0.1, seed=seed))
            big = misidentification_rate(TrialConfig(5, acc, 2, 10 * n, 2000, 0.1, seed=seed))
            assert big <= at_bound <= small
            assert big < small

    def test_dominance_requirement_enforced(self):
        with pytest.raises(ValueError):
            TrialConfig(3, np.array([0.9, 0.9, 0.5]), 0, 10, 100, 0.05, seed=0)


def uniform_spec(test_size=2000, separation=0.0):
    return SyntheticTaskSpec(
        num_classes=5,
        dim=6,
        separation=separation,
        noise_scale=1.0,
        train_size=0,
        val_size=0,
        test_size=test_size,
        context_pool_size=0,
        seed=11,
    )


class TestBayesOptimalReference:
    def test_zero_separation_classifier_at_chance_and_full_deferral(self):
        spec = uniform_spec()
        # any expert better than chance makes deferral worthwhile everywhere
        system, expert = bayes_optimal_reference(spec, np.full(5, 0.6))
        clf_acc = system.accuracies[0]
        assert clf_acc == pytest.approx(0.2, abs=1e-12)  # balanced partition, exact
        # deferring everything reaches the expert's expected accuracy
        assert system.accuracies[-1] == pytest.approx(0.6, abs=1e-12)
        # the deferral value strictly exceeds the top posterior on every case
        assert np.all(expert.accuracies >= 0.6 - 1e-12)

    def test_oracle_expert_defers_everywhere(self):
        spec = uniform_spec(separation=2.0)
        system, expert = bayes_optimal_reference(spec, np.ones(5))
        # expected expert correctness is 1 on every deferred case
        assert np.all(expert.accuracies == 1.0)
        assert system.accuracies[-1] == 1.0
        # with max posterior < 1 a.s., full deferral is optimal
        assert area_under(system, 0.0, 1.0) <= 1.0

    def test_multi_expert_matrix_takes_best(self):
        spec = uniform_spec(separation=1.5)
        acc = np.array([[1.0, 0.3, 0.3, 0.3, 0.3], [0.3, 1.0, 0.3, 0.3, 0.3]])
        system_pair, _ = bayes_optimal_reference(spec, acc)
        system_single, _ = bayes_optimal_reference(spec, acc[0])
        assert area_under(system_pair, 0.0, 1.0) >= area_under(system_single, 0.0, 1.0) - 1e-12

    def test_non_gaussian_task_rejected(self):
        with pytest.raises(UnsupportedTaskError):
            bayes_optimal_reference({"kind": "csv"}, np.ones(3))


class TestRunTheoryChecks:
    def test_default_grid_passes(self, tmp_path):
        rows, default_used = run_theory_checks([0], out_dir=tmp_path)
        assert not default_used
        failing = [r for r in rows if not r.passed]
        assert failing == []
        report = (tmp_path / "theory_report.csv").read_text().splitlines()
        assert report[0] == "check,param_json,observed,threshold,pass"
        assert len(report) == len(rows) + 1
        assert all(line.endswith(",pass") for line in report[1:])

    def test_undersized_bound_is_negative_control(self):
        rows, _ = run_theory_checks([0], bound_scale=0.1, include_ceiling=False)
        id_rows = [r for r in rows if r.check == "identification_bound"]
        assert any(not r.passed for r in id_rows)

    def test_empty_seed_list_uses_default(self):
        rows, default_used = run_theory_checks([], include_ceiling=False)
        assert default_used
        assert rows
