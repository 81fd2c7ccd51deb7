"""Simulator tests: closed-form ODE oracles, OU moments, sampling contracts."""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from funkflow import _kernels, sim
from funkflow.errors import (
    DegenerateTrajectoryError,
    InsufficientDataError,
    SimulationFailure,
    ValidationError,
)


def constant_paths(grid, k_a=0.0, k_e=0.0, volume=1.0, k_plus=(), k_minus=()):
    n = grid.size
    kp = np.array([np.full(n, v) for v in k_plus]).reshape(len(k_plus), n)
    km = np.array([np.full(n, v) for v in k_minus]).reshape(len(k_minus), n)
    return sim.KineticsPaths(k_a=np.full(n, k_a), k_e=np.full(n, k_e),
                             V=np.full(n, volume), k_plus=kp, k_minus=km)


GRID = np.linspace(0.0, 24.0, 100)


class TestStudyConfig:
    def test_individuals_within_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            cfg = sim.sample_study_config(sim.DEFAULT_PRIOR, rng)
            assert 5 <= cfg.num_individuals <= 10
            assert 1 <= cfg.num_peripherals <= 3

    def test_degenerate_prior_forces_configuration(self):
        prior = sim.MetaStudyPrior(
            num_individuals_range=(7, 7),
            num_peripherals_range=(2, 2),
            log_k_a_mean_range=(0.5, 0.5), log_k_a_std_range=(0.2, 0.2),
            k_a_tmag_range=(0.02, 0.02), k_a_tscl_range=(3.0, 3.0),
            log_k_e_mean_range=(-2.0, -2.0), log_k_e_std_range=(0.2, 0.2),
            k_e_tmag_range=(0.02, 0.02), k_e_tscl_range=(3.0, 3.0),
            log_V_mean_range=(2.0, 2.0), log_V_std_range=(0.2, 0.2),
            V_tmag_range=(0.005, 0.005), V_tscl_range=(3.0, 3.0),
            log_k_1p_mean_range=(-2.0, -2.0), log_k_1p_std_range=(0.2, 0.2),
            k_1p_tmag_range=(0.02, 0.02), k_1p_tscl_range=(3.0, 3.0),
            log_k_p1_mean_range=(-2.0, -2.0), log_k_p1_std_range=(0.2, 0.2),
            k_p1_tmag_range=(0.02, 0.02), k_p1_tscl_range=(3.0, 3.0),
            rel_ruv_range=(0.05, 0.05),
            dose_range=(10.0, 10.0), oral_probability=1.0,
        )
        cfg = sim.sample_study_config(prior, np.random.default_rng(1))
        assert cfg.num_individuals == 7
        assert cfg.num_peripherals == 2
        assert all(d.amount == pytest.approx(10.0) for d in cfg.doses)
        assert all(d.route == sim.ROUTE_ORAL for d in cfg.doses)
        assert cfg.k_a.log_mean == 0.5 and cfg.k_a.tscl == 3.0
        assert cfg.rel_ruv == 0.05

    def test_cohort_size_uniform_chi_square(self):
        rng = np.random.default_rng(7)
        counts = np.zeros(6)
        for _ in range(10_000):
            cfg = sim.sample_study_config(sim.DEFAULT_PRIOR, rng)
            counts[cfg.num_individuals - 5] += 1
        chi2 = ((counts - counts.sum() / 6) ** 2 / (counts.sum() / 6)).sum()
        # 5 dof; 3-sigma-ish bound
        assert chi2 < stats.chi2.ppf(0.9973, df=5)


class TestOUSampler:
    def test_deterministic_mean_reversion(self):
        # sigma=0, theta(0)=mu+1, lambda=1, step 1 -> theta(1) = mu + e^{-1}
        mu = 0.7
        decay = np.exp(-1.0 * np.array([[1.0]]))
        out = _kernels.ou_recurse(np.array([mu + 1.0]), np.array([mu]),
                                  decay, np.array([[0.0]]), np.array([[0.0]]))
        assert out[1, 0] == pytest.approx(mu + np.exp(-1.0), rel=1e-12)

    def test_zero_volatility_constant_path(self):
        spec = sim.OUSpec(mu=1.2, lam=0.8, sigma=0.0)
        path = sim.sample_ou_path(spec, GRID, np.random.default_rng(3))
        assert np.all(path == 1.2)

    def test_stationary_moments_monte_carlo(self):
        spec = sim.OUSpec(mu=1.3, lam=0.5, sigma=0.2)
        rng = np.random.default_rng(11)
        grid = np.linspace(0.0, 10.0, 6)
        finals = np.array([sim.sample_ou_path(spec, grid, rng)[-1] for _ in range(10_000)])
        assert finals.mean() == pytest.approx(1.3, rel=0.05)
        assert finals.var() == pytest.approx(0.2**2 / (2 * 0.5), rel=0.05)

    def test_conditional_moments_monte_carlo(self):
        # exact transition law from a fixed starting point
        mu, lam, sigma, x0, dt = 0.4, 0.7, 0.3, 1.5, 0.9
        rng = np.random.default_rng(13)
        decay = np.exp(-lam * np.array([[dt]]))
        scale = sigma * np.sqrt((1 - decay**2) / (2 * lam))
        draws = np.array([
            _kernels.ou_recurse(np.array([x0]), np.array([mu]), decay, scale,
                                rng.standard_normal((1, 1)))[1, 0]
            for _ in range(10_000)
        ])
        want_mean = mu + (x0 - mu) * np.exp(-lam * dt)
        want_var = sigma**2 * (1 - np.exp(-2 * lam * dt)) / (2 * lam)
        assert draws.mean() == pytest.approx(want_mean, rel=0.05)
        assert draws.var() == pytest.approx(want_var, rel=0.05)

    def test_rejects_non_increasing_grid(self):
        spec = sim.OUSpec(mu=0.0, lam=1.0, sigma=0.1)
        with pytest.raises(ValidationError):
            sim.sample_ou_path(spec, np.array([0.0, 1.0, 1.0]), np.random.default_rng(0))


class TestSolvePkOde:
    def test_iv_exponential_decay(self):
        k_e, volume, amount = 0.2, 5.0, 100.0
        traj = sim.solve_pk_ode(constant_paths(GRID, k_e=k_e, volume=volume),
                                sim.DoseSpec(amount, sim.ROUTE_IV), GRID)
        exact = amount * np.exp(-k_e * GRID)
        rel = np.abs(traj.states[:, 1] - exact) / exact
        assert rel.max() <= 1e-6
        np.testing.assert_allclose(traj.concentration, traj.states[:, 1] / volume, rtol=1e-15)

    def test_oral_bateman(self):
        k_a, k_e, amount = 0.3, 0.1, 50.0
        traj = sim.solve_pk_ode(constant_paths(GRID, k_a=k_a, k_e=k_e),
                                sim.DoseSpec(amount, sim.ROUTE_ORAL), GRID)
        exact = amount * k_a / (k_a - k_e) * (np.exp(-k_e * GRID) - np.exp(-k_a * GRID))
        rel = np.abs(traj.states[1:, 1] - exact[1:]) / exact[1:]
        assert rel.max() <= 1e-6
        assert traj.states[0, 1] == 0.0

    def test_zero_dose_zero_trajectory(self):
        traj = sim.solve_pk_ode(constant_paths(GRID, k_a=0.5, k_e=0.1),
                                sim.DoseSpec(0.0, sim.ROUTE_ORAL), GRID)
        assert np.all(traj.states == 0.0)
        assert np.all(traj.concentration == 0.0)

    def test_mass_conservation_without_elimination(self):
        # k_e = 0: the dose only moves between compartments
        rng = np.random.default_rng(5)
        n = GRID.size
        paths = sim.KineticsPaths(
            k_a=np.exp(rng.normal(-0.5, 0.2, n)),
            k_e=np.zeros(n),
            V=np.full(n, 3.0),
            k_plus=np.exp(rng.normal(-2.0, 0.3, (2, n))),
            k_minus=np.exp(rng.normal(-2.0, 0.3, (2, n))),
        )
        amount = 20.0
        traj = sim.solve_pk_ode(paths, sim.DoseSpec(amount, sim.ROUTE_ORAL), GRID)
        total = traj.states.sum(axis=1)
        assert np.abs(total - amount).max() <= 1e-9 * amount

    def test_blowup_raises_simulation_failure(self):
        with pytest.raises(SimulationFailure) as exc:
            sim.solve_pk_ode(constant_paths(GRID, k_a=1e8, k_e=0.1),
                             sim.DoseSpec(10.0, sim.ROUTE_ORAL), GRID)
        assert exc.value.step >= 1


class TestCharacteristicTimes:
    def test_iv_half_life(self):
        k_e = 0.2
        traj = sim.solve_pk_ode(constant_paths(GRID, k_e=k_e),
                                sim.DoseSpec(10.0, sim.ROUTE_IV), GRID)
        t_peak, t_half = sim.characteristic_times(traj)
        assert t_peak == 0.0
        assert abs(t_half - np.log(2) / k_e) <= GRID[1] - GRID[0]

    def test_monotone_increase_never_halves(self):
        conc = np.linspace(0.1, 1.0, GRID.size)
        traj = sim.DenseTrajectory(grid=GRID, states=np.zeros((GRID.size, 2)),
                                   concentration=conc)
        _, t_half = sim.characteristic_times(traj)
        assert t_half == 24.0

    def test_bateman_peak_time(self):
        k_a, k_e = 2.0, 0.2
        traj = sim.solve_pk_ode(constant_paths(GRID, k_a=k_a, k_e=k_e),
                                sim.DoseSpec(10.0, sim.ROUTE_ORAL), GRID)
        t_peak, _ = sim.characteristic_times(traj)
        exact = np.log(k_a / k_e) / (k_a - k_e)
        assert abs(t_peak - exact) <= GRID[1] - GRID[0]

    def test_all_zero_rejected(self):
        traj = sim.DenseTrajectory(grid=GRID, states=np.zeros((GRID.size, 2)),
                                   concentration=np.zeros(GRID.size))
        with pytest.raises(DegenerateTrajectoryError):
            sim.characteristic_times(traj)


class TestObservationTimes:
    def test_sorted_strictly_increasing_in_window(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            t = sim.sample_observation_times(1.5, 4.0, 24.0, rng)
            assert np.all(np.diff(t) > 0)
            assert t[0] >= 0.0 and t[-1] <= 24.0
            assert t.size >= 2

    def test_mixture_support_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            t = sim.sample_observation_times(1.0, 2.0, 24.0, rng)
            assert t.max() <= 9.0  # t_peak + 4 * t_half

    def test_count_uniform_chi_square(self):
        rng = np.random.default_rng(6)
        counts = np.zeros(11)
        for _ in range(10_000):
            t = sim.sample_observation_times(2.0, 6.0, 24.0, rng)
            counts[t.size - 5] += 1
        chi2 = ((counts - counts.sum() / 11) ** 2 / (counts.sum() / 11)).sum()
        assert chi2 < stats.chi2.ppf(0.9973, df=10)


class TestObservationNoise:
    def test_zero_ruv_identity(self):
        conc = np.array([0.5, 1.0, 2.0])
        out = sim.apply_observation_noise(conc, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, conc)

    def test_noise_sd_monte_carlo(self):
        rng = np.random.default_rng(8)
        out = sim.apply_observation_noise(np.ones(100_000), 0.1, rng)
        assert out.std() == pytest.approx(0.1, rel=0.03)

    def test_zero_concentration_stays_zero(self):
        out = sim.apply_observation_noise(np.zeros(10), 0.1, np.random.default_rng(1))
        np.testing.assert_array_equal(out, np.zeros(10))


class TestSimulateStudy:
    def test_study_invariants(self):
        study = sim.simulate_study(sim.DEFAULT_PRIOR, seed=123)
        study.validate()
        assert 5 <= len(study.individuals) <= 10
        for rec in study.individuals:
            assert rec.times.size >= 2
            assert np.all(rec.concentrations >= 0)

    def test_degenerate_hierarchy_shares_curves(self):
        prior = dataclasses.replace(
            sim.DEFAULT_PRIOR,
            log_k_a_std_range=(0.0, 0.0), k_a_tmag_range=(0.0, 0.0),
            log_k_e_std_range=(0.0, 0.0), k_e_tmag_range=(0.0, 0.0),
            log_V_std_range=(0.0, 0.0), V_tmag_range=(0.0, 0.0),
            log_k_1p_std_range=(0.0, 0.0), k_1p_tmag_range=(0.0, 0.0),
            log_k_p1_std_range=(0.0, 0.0), k_p1_tmag_range=(0.0, 0.0),
            dose_range=(50.0, 50.0),
        )
        rng = np.random.default_rng(21)
        cfg = sim.sample_study_config(prior, rng)
        a = sim.simulate_subject_curve(cfg, cfg.doses[0], rng)
        b = sim.simulate_subject_curve(cfg, cfg.doses[1], rng)
        np.testing.assert_array_equal(a.concentration, b.concentration)

    def test_determinism_bitwise(self):
        a = sim.simulate_study(sim.DEFAULT_PRIOR, seed=77)
        b = sim.simulate_study(sim.DEFAULT_PRIOR, seed=77)
        assert a.study_id == b.study_id and a.seed == b.seed
        for ra, rb in zip(a.individuals, b.individuals):
            np.testing.assert_array_equal(ra.times, rb.times)
            np.testing.assert_array_equal(ra.concentrations, rb.concentrations)
            assert ra.dose == rb.dose

    def test_fuzz_invariants_many_studies(self):
        studies = sim.simulate_studies(sim.DEFAULT_PRIOR, 100, master_seed=99)
        for s in studies:
            s.validate()

    def test_metric_corridor_spans_decades(self):
        studies = sim.simulate_studies(sim.DEFAULT_PRIOR, 300, master_seed=31)
        cmax, auc = [], []
        for s in studies:
            for r in s.individuals:
                m = sim.compute_pk_metrics(r.times, r.concentrations, r.dose.amount)
                cmax.append(m.cmax_per_dose)
                auc.append(m.auc_per_dose)
        cmax, auc = np.array(cmax), np.array(auc)
        assert np.quantile(cmax, 0.95) / max(np.quantile(cmax, 0.05), 1e-300) > 100.0
        assert np.quantile(auc, 0.95) / max(np.quantile(auc, 0.05), 1e-300) > 100.0


class TestPkMetrics:
    def test_constant_curve(self):
        t = np.linspace(0.0, 10.0, 21)
        m = sim.compute_pk_metrics(t, np.full(21, 3.0), dose_amount=2.0)
        assert m.cmax_per_dose == pytest.approx(1.5)
        assert m.tmax == 0.0
        assert m.auc_per_dose == pytest.approx(3.0 * 10.0 / 2.0)

    def test_iv_auc_closed_form(self):
        k_e, volume, amount = 0.3, 4.0, 10.0
        t = np.linspace(0.0, 24.0, 2000)
        conc = amount * np.exp(-k_e * t) / volume
        m = sim.compute_pk_metrics(t, conc, amount)
        exact = amount * (1 - np.exp(-k_e * 24.0)) / (volume * k_e) / amount
        assert m.auc_per_dose == pytest.approx(exact, rel=1e-3)

    def test_single_point_rejected(self):
        with pytest.raises(InsufficientDataError):
            sim.compute_pk_metrics(np.array([1.0]), np.array([2.0]), 1.0)

    def test_identical_individuals_zero_cv(self):
        rec = sim.IndividualRecord(id="a", dose=sim.DoseSpec(5.0, sim.ROUTE_IV),
                                   times=np.array([0.0, 1.0, 2.0]),
                                   concentrations=np.array([3.0, 2.0, 1.0]))
        rec2 = dataclasses.replace(rec, id="b")
        study = sim.Study(study_id="s", seed=0, individuals=(rec, rec2))
        out = sim.study_pk_metrics(study)
        assert all(v == 0.0 for v in out["percent_cv"].values())
