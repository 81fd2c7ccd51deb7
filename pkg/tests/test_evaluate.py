"""Evaluation metric tests: log-RMSE arithmetic, VPC structure, MMD oracles."""

import dataclasses

import numpy as np
import pytest

from funkflow import evaluate, inference, model
from funkflow.errors import InsufficientDataError, ValidationError
from funkflow.sim import MetaStudyPrior, simulate_study

CFG = model.MINI_CONFIG
SMALL_PRIOR = dataclasses.replace(MetaStudyPrior(), num_individuals_range=(3, 4))


class TestLogRmse:
    def test_identity_zero(self):
        obs = np.array([0.5, 1.0, 3.0])
        assert evaluate.log_rmse(obs, obs) == 0.0

    def test_constant_log_ratio(self):
        obs = np.array([0.5, 1.0, 3.0])
        assert evaluate.log_rmse(np.e * obs, obs) == pytest.approx(1.0, rel=1e-12)

    def test_single_point_two_log_units(self):
        obs = np.array([2.0])
        pred = obs / np.e**2
        assert evaluate.log_rmse(pred, obs) == pytest.approx(2.0, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            evaluate.log_rmse(np.array([]), np.array([]))


class TestLooForecastEval:
    def test_row_count_and_skips(self):
        studies = [simulate_study(SMALL_PRIOR, seed=s) for s in (30, 31)]
        params = inference.zero_field_params(
            model.init_model_params(CFG, np.random.default_rng(0)))
        prefix_len = 6
        eligible = sum(1 for s in studies for r in s.individuals
                       if r.times.size > prefix_len)
        total = sum(len(s.individuals) for s in studies)
        result = evaluate.loo_forecast_eval(params, CFG, studies,
                                            prefix_len=prefix_len, n_samples=4,
                                            steps=5)
        assert len(result.rows) == eligible
        assert result.skipped == total - eligible
        assert all(r["log_rmse"] >= 0.0 for r in result.rows)

    def test_oracle_scores_zero(self):
        # perfect "model": feed observed values back through log_rmse
        studies = [simulate_study(SMALL_PRIOR, seed=32)]
        for rec in studies[0].individuals:
            assert evaluate.log_rmse(rec.concentrations, rec.concentrations) == 0.0

    def test_zero_field_baseline_reproducible(self):
        studies = [simulate_study(SMALL_PRIOR, seed=33)]
        params = inference.zero_field_params(
            model.init_model_params(CFG, np.random.default_rng(1)))
        a = evaluate.loo_forecast_eval(params, CFG, studies, prefix_len=4,
                                       n_samples=4, steps=5)
        b = evaluate.loo_forecast_eval(params, CFG, studies, prefix_len=4,
                                       n_samples=4, steps=5)
        assert [r["log_rmse"] for r in a.rows] == [r["log_rmse"] for r in b.rows]


class TestVpc:
    @pytest.fixture(scope="class")
    def table(self):
        study = simulate_study(SMALL_PRIOR, seed=34)
        params = inference.zero_field_params(
            model.init_model_params(CFG, np.random.default_rng(2)))
        return evaluate.vpc(params, CFG, study, n_replicates=100, bins=4, steps=5)

    def test_percentile_monotonicity(self, table):
        for row in table.rows:
            if "p10" in row:
                assert row["p10"] <= row["p50"] <= row["p90"]

    def test_bin_edges_cover_time_range(self, table):
        assert table.bin_edges[0] == 0.0
        assert table.bin_edges[-1] >= table.bin_edges[0]
        assert np.all(np.diff(table.bin_edges) > 0)

    def test_replicate_floor_enforced(self):
        study = simulate_study(SMALL_PRIOR, seed=35)
        with pytest.raises(ValidationError):
            evaluate.vpc(None, CFG, study, n_replicates=50)


def _curves(rng, n, offset=0.0):
    out = []
    for _ in range(n):
        t = np.sort(rng.uniform(0, 10, 6))
        t[0] = 0.0
        y = rng.standard_normal(6) + offset
        out.append((t, y))
    return out


class TestMmd:
    def test_identical_duplicated_sets_zero(self):
        t = np.linspace(0, 10, 6)
        y = np.sin(t) + 2
        a = [(t, y)] * 5
        b = [(t, y)] * 7
        assert abs(evaluate.mmd_rbf(a, b)) <= 1e-12

    def test_self_comparison_non_positive(self):
        rng = np.random.default_rng(3)
        a = _curves(rng, 40)
        assert evaluate.mmd_rbf(a, list(a)) <= 0.0

    def test_separated_populations_large_positive(self):
        rng = np.random.default_rng(4)
        a = _curves(rng, 100)
        b = _curves(rng, 100, offset=10.0)
        assert evaluate.mmd_rbf(a, b) > 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = _curves(rng, 20)
        b = _curves(rng, 25, offset=0.3)
        ab = evaluate.mmd_rbf(a, b)
        ba = evaluate.mmd_rbf(b, a)
        assert ab == pytest.approx(ba, rel=1e-10)

    def test_permutation_p_value_uniform_under_null(self):
        rng = np.random.default_rng(6)
        p_values = []
        for trial in range(60):
            pop = _curves(rng, 24)
            half = 12
            p = evaluate.mmd_permutation_test(pop[:half], pop[half:],
                                              n_permutations=60, seed=trial)
            p_values.append(p["p_value"])
        p_values = np.array(p_values)
        # crude uniformity checks at generous tolerances
        assert 0.3 < p_values.mean() < 0.7
        assert (p_values < 0.2).mean() < 0.45
        assert (p_values > 0.8).mean() < 0.45

    def test_too_few_trajectories_rejected(self):
        t = np.linspace(0, 1, 4)
        with pytest.raises(InsufficientDataError):
            evaluate.mmd_rbf([(t, t)], [(t, t), (t, t)])


class TestIntervalCoverage:
    def test_observations_at_median_inside_everything(self):
        obs = np.array([1.0, 2.0, 3.0])
        quantiles = {q: (obs + (q - 0.5)) for q in inference.QUANTILES}
        cov = evaluate.interval_coverage(quantiles, obs)
        assert all(v == 1.0 for v in cov.values())

    def test_degenerate_intervals_zero_coverage(self):
        rng = np.random.default_rng(7)
        obs = rng.standard_normal(100) + 10.0
        point = np.zeros(100)
        quantiles = {q: point for q in inference.QUANTILES}
        cov = evaluate.interval_coverage(quantiles, obs)
        assert all(v == 0.0 for v in cov.values())

    def test_gaussian_toy_calibration(self):
        rng = np.random.default_rng(8)
        n = 1000
        mu = rng.uniform(-1, 1, n)
        obs = mu + rng.standard_normal(n)
        from scipy.stats import norm

        quantiles = {q: mu + norm.ppf(q) for q in inference.QUANTILES}
        cov = evaluate.interval_coverage(quantiles, obs)
        assert cov[0.8] == pytest.approx(0.80, abs=0.04)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            evaluate.interval_coverage({}, np.array([]))
