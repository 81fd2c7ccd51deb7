"""Hierarchical synthetic pharmacokinetic study generator.

A study draws population-level hyperparameters from broad uniform ranges,
gives each subject mean-reverting (OU) log-kinetic parameter paths, pushes
them through a gut/central/peripheral compartment ODE, and records sparse
noisy concentration measurements at irregular times shaped by the curve's
peak and half-decay timescales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import _kernels
from .errors import (
    DegenerateTrajectoryError,
    InsufficientDataError,
    SimulationFailure,
    ValidationError,
)

ROUTE_IV = "iv"
ROUTE_ORAL = "oral"
ROUTES = (ROUTE_IV, ROUTE_ORAL)

# Retries per subject before a simulation failure is surfaced.
MAX_SUBJECT_RETRIES = 10

# Positivity floor for the multiplicative observation-noise factor.
NOISE_FLOOR = 1e-6


def _check_interval(name: str, lo: float, hi: float) -> None:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValidationError(f"{name}: bounds must be finite, got [{lo}, {hi}]")
    if lo > hi:
        raise ValidationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")


@dataclass(frozen=True)
class MetaStudyPrior:
    """Hyperprior ranges governing synthetic study generation.

    Field names follow the meta-study configuration table verbatim; ranges
    are inclusive [low, high] pairs. Log-mean/log-std ranges drive the
    per-study population law of each kinetic parameter, tmag/tscl set the
    within-subject OU volatility and reversion timescale.
    """

    num_individuals_range: tuple[int, int] = (5, 10)
    num_peripherals_range: tuple[int, int] = (1, 3)
    time_start: float = 0.0
    time_stop: float = 24.0
    time_num_steps: int = 100

    log_k_a_mean_range: tuple[float, float] = (-1.0, 2.0)
    log_k_a_std_range: tuple[float, float] = (0.15, 0.45)
    k_a_tmag_range: tuple[float, float] = (0.01, 0.1)
    k_a_tscl_range: tuple[float, float] = (1.0, 5.0)

    log_k_e_mean_range: tuple[float, float] = (-5.0, 0.0)
    log_k_e_std_range: tuple[float, float] = (0.15, 0.45)
    k_e_tmag_range: tuple[float, float] = (0.01, 0.1)
    k_e_tscl_range: tuple[float, float] = (1.0, 5.0)

    log_V_mean_range: tuple[float, float] = (1.0, 7.0)
    log_V_std_range: tuple[float, float] = (0.15, 0.45)
    V_tmag_range: tuple[float, float] = (0.001, 0.01)
    V_tscl_range: tuple[float, float] = (1.0, 5.0)

    log_k_1p_mean_range: tuple[float, float] = (-4.0, 0.0)
    log_k_1p_std_range: tuple[float, float] = (0.15, 0.45)
    k_1p_tmag_range: tuple[float, float] = (0.01, 0.1)
    k_1p_tscl_range: tuple[float, float] = (1.0, 5.0)

    log_k_p1_mean_range: tuple[float, float] = (-4.0, -1.0)
    log_k_p1_std_range: tuple[float, float] = (0.15, 0.45)
    k_p1_tmag_range: tuple[float, float] = (0.01, 0.1)
    k_p1_tscl_range: tuple[float, float] = (1.0, 5.0)

    rel_ruv_range: tuple[float, float] = (0.01, 0.1)

    dose_range: tuple[float, float] = (1.0, 1000.0)
    oral_probability: float = 0.7

    def validate(self) -> None:
        for f in fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                _check_interval(f.name, lo, hi)
        if self.num_individuals_range[0] < 1:
            raise ValidationError("num_individuals_range must start at >= 1")
        if self.num_peripherals_range[0] < 0:
            raise ValidationError("num_peripherals_range must start at >= 0")
        if self.time_num_steps < 2:
            raise ValidationError(f"time_num_steps must be >= 2, got {self.time_num_steps}")
        if not self.time_start < self.time_stop:
            raise ValidationError("time_start must be < time_stop")
        if not 0.0 <= self.oral_probability <= 1.0:
            raise ValidationError(f"oral_probability must lie in [0, 1], got {self.oral_probability}")
        lo, hi = self.rel_ruv_range
        if not (0.0 < lo and hi < 1.0):
            raise ValidationError(f"rel_ruv_range must lie inside (0, 1), got [{lo}, {hi}]")
        if self.dose_range[0] <= 0.0:
            raise ValidationError("dose_range must be positive (amounts are log-uniform)")

    def grid(self) -> np.ndarray:
        return np.linspace(self.time_start, self.time_stop, self.time_num_steps)


DEFAULT_PRIOR = MetaStudyPrior()


@dataclass(frozen=True)
class OUSpec:
    """Mean-reverting log-parameter process: long-term mean, reversion speed, volatility."""

    mu: float
    lam: float
    sigma: float

    def validate(self) -> None:
        if not self.lam > 0.0:
            raise ValidationError(f"OU reversion speed must be > 0, got {self.lam}")
        if self.sigma < 0.0:
            raise ValidationError(f"OU volatility must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class DoseSpec:
    """Administered dose: amount and route ("iv" puts it in central, "oral" in gut)."""

    amount: float
    route: str

    def validate(self) -> None:
        if not self.amount > 0.0:
            raise ValidationError(f"dose amount must be > 0, got {self.amount}")
        if self.route not in ROUTES:
            raise ValidationError(f"route must be one of {ROUTES}, got {self.route!r}")


@dataclass(frozen=True)
class SubjectKinetics:
    """Per-subject OU specs for log V, log k_a, log k_e and peripheral exchange pairs."""

    log_V: OUSpec
    log_k_a: OUSpec
    log_k_e: OUSpec
    peripheral: tuple[tuple[OUSpec, OUSpec], ...] = ()

    def all_specs(self) -> list[OUSpec]:
        specs = [self.log_V, self.log_k_a, self.log_k_e]
        for plus, minus in self.peripheral:
            specs.extend((plus, minus))
        return specs


@dataclass(frozen=True)
class KineticsPaths:
    """Positive per-grid-point parameter values (exponentiated OU paths)."""

    k_a: np.ndarray
    k_e: np.ndarray
    V: np.ndarray
    k_plus: np.ndarray  # (P, n)
    k_minus: np.ndarray  # (P, n)


@dataclass(frozen=True)
class DenseTrajectory:
    """ODE solution on the uniform grid: amounts per compartment and concentration."""

    grid: np.ndarray
    states: np.ndarray  # (n, 2+P): gut, central, peripherals
    concentration: np.ndarray  # central amount / V(t)


@dataclass(frozen=True)
class IndividualRecord:
    id: str
    dose: DoseSpec
    times: np.ndarray
    concentrations: np.ndarray

    def validate(self) -> None:
        self.dose.validate()
        t = np.asarray(self.times, dtype=np.float64)
        y = np.asarray(self.concentrations, dtype=np.float64)
        if t.ndim != 1 or y.ndim != 1 or t.shape != y.shape:
            raise ValidationError(f"subject {self.id}: times/concentrations must be equal-length vectors")
        if t.size < 1:
            raise ValidationError(f"subject {self.id}: needs at least one observation")
        if not np.all(np.diff(t) > 0.0):
            raise ValidationError(f"subject {self.id}: times must be strictly increasing")
        if np.any(y < 0.0):
            raise ValidationError(f"subject {self.id}: concentrations must be >= 0")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValidationError(f"subject {self.id}: non-finite observation values")


@dataclass(frozen=True)
class Study:
    study_id: str
    seed: int
    individuals: tuple[IndividualRecord, ...]

    def validate(self) -> None:
        if not self.individuals:
            raise ValidationError(f"study {self.study_id}: has no individuals")
        for rec in self.individuals:
            rec.validate()


@dataclass(frozen=True)
class StudyLevelHyper:
    """Population-level law for one kinetic parameter within a study."""

    log_mean: float
    log_std: float
    tmag: float
    tscl: float

    def subject_spec(self, rng: np.random.Generator) -> OUSpec:
        # lambda = 1/tscl and sigma = tmag; subject mean drawn around the study mean.
        mu = rng.normal(self.log_mean, self.log_std)
        return OUSpec(mu=mu, lam=1.0 / self.tscl, sigma=self.tmag)


@dataclass(frozen=True)
class StudyConfig:
    num_individuals: int
    num_peripherals: int
    doses: tuple[DoseSpec, ...]
    k_a: StudyLevelHyper
    k_e: StudyLevelHyper
    V: StudyLevelHyper
    peripheral: tuple[tuple[StudyLevelHyper, StudyLevelHyper], ...]
    rel_ruv: float
    grid: np.ndarray = field(repr=False)


def _uniform(rng: np.random.Generator, interval: tuple[float, float]) -> float:
    return float(rng.uniform(interval[0], interval[1]))


def _draw_hyper(rng: np.random.Generator, prior: MetaStudyPrior, key: str) -> StudyLevelHyper:
    return StudyLevelHyper(
        log_mean=_uniform(rng, getattr(prior, f"log_{key}_mean_range")),
        log_std=_uniform(rng, getattr(prior, f"log_{key}_std_range")),
        tmag=_uniform(rng, getattr(prior, f"{key}_tmag_range")),
        tscl=_uniform(rng, getattr(prior, f"{key}_tscl_range")),
    )


def sample_study_config(prior: MetaStudyPrior, rng: np.random.Generator) -> StudyConfig:
    """Draw one study configuration: cohort size, compartments, doses, hyperparameters."""
    prior.validate()
    num_individuals = int(rng.integers(prior.num_individuals_range[0],
                                       prior.num_individuals_range[1] + 1))
    num_peripherals = int(rng.integers(prior.num_peripherals_range[0],
                                       prior.num_peripherals_range[1] + 1))
    route = ROUTE_ORAL if rng.uniform() < prior.oral_probability else ROUTE_IV
    # study-level dose scale with modest per-individual spread: within-study
    # dose ratios stay O(1) so per-study max-normalization keeps targets O(1)
    log_lo, log_hi = np.log(prior.dose_range[0]), np.log(prior.dose_range[1])
    log_scale = rng.uniform(log_lo, log_hi)
    log_window = min(np.log(1.3), 0.5 * (log_hi - log_lo))
    doses = tuple(
        DoseSpec(amount=float(np.exp(rng.uniform(log_scale - log_window,
                                                 log_scale + log_window))),
                 route=route)
        for _ in range(num_individuals)
    )
    k_a = _draw_hyper(rng, prior, "k_a")
    k_e = _draw_hyper(rng, prior, "k_e")
    vol = _draw_hyper(rng, prior, "V")
    peripheral = tuple(
        (_draw_hyper(rng, prior, "k_1p"), _draw_hyper(rng, prior, "k_p1"))
        for _ in range(num_peripherals)
    )
    rel_ruv = _uniform(rng, prior.rel_ruv_range)
    return StudyConfig(
        num_individuals=num_individuals,
        num_peripherals=num_peripherals,
        doses=doses,
        k_a=k_a,
        k_e=k_e,
        V=vol,
        peripheral=peripheral,
        rel_ruv=rel_ruv,
        grid=prior.grid(),
    )


def _ou_transition_terms(specs: list[OUSpec], grid: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    mus = np.array([s.mu for s in specs])
    lams = np.array([s.lam for s in specs])
    sigmas = np.array([s.sigma for s in specs])
    stat_sd = sigmas / np.sqrt(2.0 * lams)
    dt = np.diff(grid)[:, None]  # (n-1, 1)
    decay = np.exp(-lams[None, :] * dt)
    scale = sigmas[None, :] * np.sqrt((1.0 - decay**2) / (2.0 * lams[None, :]))
    return mus, stat_sd, decay, scale


def sample_ou_paths(specs: list[OUSpec], grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact-transition OU sampling of K independent paths; returns (len(grid), K)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 1:
        raise ValidationError("grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) <= 0.0):
        raise ValidationError("grid must be strictly increasing")
    for s in specs:
        s.validate()
    mus, stat_sd, decay, scale = _ou_transition_terms(specs, grid)
    theta0 = mus + stat_sd * rng.standard_normal(len(specs))
    noise = rng.standard_normal((grid.size - 1, len(specs)))
    return _kernels.ou_recurse(theta0, mus, decay, scale, noise)


def sample_ou_path(spec: OUSpec, grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Single-path convenience wrapper around sample_ou_paths."""
    return sample_ou_paths([spec], grid, rng)[:, 0]


def solve_pk_ode(paths: KineticsPaths, dose: DoseSpec, grid: np.ndarray) -> DenseTrajectory:
    """Integrate the compartment system with RK4, one step per grid interval.

    Parameters are held at their left-endpoint value within each step. The
    full dose starts in gut (oral) or central (iv); everything else at zero.
    Raises SimulationFailure when the state becomes non-finite or materially
    negative (both signal the solver left its stability region).
    """
    grid = np.asarray(grid, dtype=np.float64)
    n = grid.size
    steps = np.diff(grid)
    if n < 2 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValidationError("solve_pk_ode requires a uniform grid with >= 2 points")
    for arr in (paths.k_a, paths.k_e, paths.V):
        if arr.shape != (n,):
            raise ValidationError("parameter paths must match the grid length")
    npER = paths.k_plus.shape[0]
    if paths.k_plus.shape != (npER, n) or paths.k_minus.shape != (npER, n):
        raise ValidationError("peripheral paths must have shape (P, len(grid))")

    x0 = np.zeros(2 + npER)
    if dose.route == ROUTE_ORAL:
        x0[0] = dose.amount
    else:
        x0[1] = dose.amount
    states, fail_step = _kernels.rk4_pk(paths.k_a, paths.k_e, paths.k_plus,
                                        paths.k_minus, x0, float(steps[0]))
    if fail_step >= 0:
        raise SimulationFailure(fail_step)
    neg = states < -1e-9 * max(dose.amount, 1.0)
    if np.any(neg):
        raise SimulationFailure(int(np.argmax(neg.any(axis=1))),
                                "RK4 produced negative compartment amounts (unstable step size)")
    states = np.maximum(states, 0.0)
    conc = states[:, 1] / paths.V
    return DenseTrajectory(grid=grid, states=states, concentration=conc)


def characteristic_times(traj: DenseTrajectory) -> tuple[float, float]:
    """Peak time and first post-peak time at or below half the peak concentration.

    Falls back to the grid end when the curve never halves.
    """
    conc = traj.concentration
    if not np.any(conc > 0.0):
        raise DegenerateTrajectoryError("all-zero trajectory has no characteristic times")
    peak_idx = int(np.argmax(conc))
    t_peak = float(traj.grid[peak_idx])
    half = 0.5 * conc[peak_idx]
    after = conc[peak_idx + 1:] <= half
    if np.any(after):
        t_half = float(traj.grid[peak_idx + 1 + int(np.argmax(after))])
    else:
        t_half = float(traj.grid[-1])
    return t_peak, t_half


def sample_observation_times(t_peak: float, t_half: float, time_stop: float,
                             rng: np.random.Generator,
                             resolution: float | None = None) -> np.ndarray:
    """Irregular clinical-style sampling times: dense around the peak, sparse later.

    Draws 5-15 times from an even mixture of Uniform(0, min(2*t_peak + eps,
    stop)) and Uniform(t_peak, min(t_peak + 4*t_half, stop)), with eps one
    grid step. Times landing in the same grid cell are redrawn so the sorted
    result is strictly increasing.
    """
    if t_peak > time_stop:
        raise ValidationError("t_peak must not exceed time_stop")
    if resolution is None:
        resolution = time_stop / 99.0
    hi_early = min(2.0 * t_peak + resolution, time_stop)
    hi_late = min(t_peak + 4.0 * t_half, time_stop)
    n_cells = int(np.floor(time_stop / resolution)) + 1
    n_obs = int(rng.integers(5, 16))
    n_obs = max(2, min(n_obs, n_cells))

    def draw(k: int) -> np.ndarray:
        early = rng.uniform(size=k) < 0.5
        lo = np.where(early, 0.0, t_peak)
        hi = np.where(early, hi_early, hi_late)
        return rng.uniform(lo, hi)

    times = draw(n_obs)
    for _ in range(1000):
        cells = np.floor(times / resolution).astype(np.int64)
        _, first = np.unique(cells, return_index=True)
        if first.size == times.size:
            break
        dup = np.setdiff1d(np.arange(times.size), first)
        times[dup] = draw(dup.size)
    else:
        cells = np.floor(times / resolution).astype(np.int64)
        _, first = np.unique(cells, return_index=True)
        times = times[first]
        occupied = set(np.floor(times / resolution).astype(np.int64).tolist())
        cell = 0
        while times.size < 2:  # unreachable in practice; keeps the n >= 2 contract total
            if cell not in occupied:
                times = np.append(times, min((cell + 0.5) * resolution, time_stop))
                occupied.add(cell)
            cell += 1
    return np.sort(times)


def apply_observation_noise(conc: np.ndarray, ruv: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Proportional measurement noise with a positivity floor on the factor."""
    conc = np.asarray(conc, dtype=np.float64)
    if np.any(conc < 0.0):
        raise ValidationError("concentrations must be >= 0 before noise")
    if not 0.0 <= ruv < 1.0:
        raise ValidationError(f"ruv must lie in [0, 1), got {ruv}")
    factor = 1.0 + ruv * rng.standard_normal(conc.shape)
    return conc * np.maximum(factor, NOISE_FLOOR)


def simulate_subject_curve(config: StudyConfig, dose: DoseSpec,
                           rng: np.random.Generator) -> DenseTrajectory:
    """One subject's dense trajectory; retries fresh parameter draws on failure."""
    hypers = [config.V, config.k_a, config.k_e]
    for plus, minus in config.peripheral:
        hypers.extend((plus, minus))
    last: SimulationFailure | None = None
    for _ in range(1 + MAX_SUBJECT_RETRIES):
        specs = [h.subject_spec(rng) for h in hypers]
        log_paths = sample_ou_paths(specs, config.grid, rng)
        values = np.exp(log_paths)
        if config.num_peripherals:
            per = values[:, 3:].T.reshape(config.num_peripherals, 2, -1)
            k_plus, k_minus = per[:, 0].copy(), per[:, 1].copy()
        else:
            k_plus = k_minus = np.zeros((0, config.grid.size))
        paths = KineticsPaths(
            V=values[:, 0],
            k_a=values[:, 1],
            k_e=values[:, 2],
            k_plus=k_plus,
            k_minus=k_minus,
        )
        try:
            return solve_pk_ode(paths, dose, config.grid)
        except SimulationFailure as exc:
            last = exc
    assert last is not None
    raise last


def simulate_study(prior: MetaStudyPrior, seed: int, study_id: str | None = None) -> Study:
    """Generate a complete synthetic study from its own seeded stream."""
    rng = np.random.default_rng(seed)
    config = sample_study_config(prior, rng)
    resolution = float(config.grid[1] - config.grid[0])
    records = []
    for i in range(config.num_individuals):
        dose = config.doses[i]
        traj = simulate_subject_curve(config, dose, rng)
        t_peak, t_half = characteristic_times(traj)
        times = sample_observation_times(t_peak, t_half, prior.time_stop, rng,
                                         resolution=resolution)
        conc = np.interp(times, config.grid, traj.concentration)
        noisy = apply_observation_noise(conc, config.rel_ruv, rng)
        records.append(IndividualRecord(id=f"subj_{i}", dose=dose,
                                        times=times, concentrations=noisy))
    study = Study(study_id=study_id or f"study_{seed}", seed=seed,
                  individuals=tuple(records))
    study.validate()
    return study


def derive_study_seed(master_seed: int, index: int) -> int:
    """Deterministic per-study seed from (master seed, study index)."""
    ss = np.random.SeedSequence(entropy=[int(master_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def simulate_studies(prior: MetaStudyPrior, num_studies: int, master_seed: int,
                     id_prefix: str = "study") -> list[Study]:
    """Generate independent studies; each owns a stream derived from (seed, index)."""
    from .parallel import parallel_map

    def one(i: int) -> Study:
        return simulate_study(prior, derive_study_seed(master_seed, i),
                              study_id=f"{id_prefix}_{i:04d}")

    return parallel_map(one, range(num_studies))


@dataclass(frozen=True)
class PKMetrics:
    """Dose-normalized exposure summary for one concentration-time record."""

    cmax_per_dose: float
    tmax: float
    auc_per_dose: float


def compute_pk_metrics(times: np.ndarray, concentrations: np.ndarray,
                       dose_amount: float) -> PKMetrics:
    """Cmax/dose, Tmax, and trapezoidal AUC/dose over the observed points."""
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(concentrations, dtype=np.float64)
    if t.size < 2:
        raise InsufficientDataError("PK metrics need at least two time points")
    idx = int(np.argmax(y))
    auc = float(np.trapezoid(y, t))
    return PKMetrics(
        cmax_per_dose=float(y[idx]) / dose_amount,
        tmax=float(t[idx]),
        auc_per_dose=auc / dose_amount,
    )


def percent_cv(values: np.ndarray) -> float:
    """100 * sd / mean; zero-dispersion cohorts give exactly 0."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    if sd == 0.0:
        return 0.0
    return float(100.0 * sd / mean)


def study_pk_metrics(study: Study) -> dict:
    """Per-subject PK metrics plus cohort coefficients of variation."""
    rows = []
    for rec in study.individuals:
        m = compute_pk_metrics(rec.times, rec.concentrations, rec.dose.amount)
        rows.append({"id": rec.id, "cmax_per_dose": m.cmax_per_dose,
                     "tmax": m.tmax, "auc_per_dose": m.auc_per_dose})
    cv = {
        key: percent_cv(np.array([r[key] for r in rows]))
        for key in ("cmax_per_dose", "tmax", "auc_per_dose")
    }
    return {"study_id": study.study_id, "subjects": rows, "percent_cv": cv}
