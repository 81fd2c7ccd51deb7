"""Quantitative evaluation: forecasting error, VPC tables, coverage, MMD.

All metrics operate on plain arrays or Study objects so they apply equally
to model output and simulator output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .inference import forecast_individual, synthesize_population
from .model import ModelConfig
from .parallel import parallel_map
from .sim import Study
from .training import context_without

LOG_FLOOR = 1e-6


def log_rmse(predicted: np.ndarray, observed: np.ndarray) -> float:
    """Root-mean-square error in log-concentration space with a 1e-6 floor."""
    pred = np.asarray(predicted, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.float64)
    if pred.size == 0 or pred.shape != obs.shape:
        raise ValidationError("log_rmse needs aligned, nonempty arrays")
    diff = np.log(np.maximum(pred, LOG_FLOOR)) - np.log(np.maximum(obs, LOG_FLOOR))
    return float(np.sqrt(np.mean(diff**2)))


@dataclass(frozen=True)
class LooResult:
    rows: list[dict]  # study_id, subject_id, log_rmse, n_future
    skipped: int
    per_study: dict[str, dict]  # study_id -> {mean, sd, n}

    @property
    def scores(self) -> np.ndarray:
        return np.array([r["log_rmse"] for r in self.rows])


def loo_forecast_eval(params, config: ModelConfig, studies: list[Study],
                      prefix_len: int = 4, n_samples: int = 64,
                      seed: int = 0, steps: int = 100) -> LooResult:
    """Leave-one-individual-out forecasting score over a list of studies.

    Each subject with more than prefix_len observations is removed from its
    study's context, conditioned on its first prefix_len samples, and scored
    by log-RMSE of the predictive mean on its remaining times. Subjects with
    too few observations are skipped and counted.
    """
    tasks = []
    skipped = 0
    for study in studies:
        for rec in study.individuals:
            if rec.times.size <= prefix_len:
                skipped += 1
                continue
            tasks.append((study, rec))

    def score(item):
        task_index, (study, rec) = item
        context = context_without(study, rec.id)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[seed, task_index]))
        result = forecast_individual(
            params, config, context, rec.times[:prefix_len],
            rec.concentrations[:prefix_len], rec.dose, rec.times[prefix_len:],
            n_samples, rng, steps=steps)
        observed = rec.concentrations[prefix_len:]
        p = prefix_len
        inside = {
            level: int(round(frac * observed.size))
            for level, frac in interval_coverage(
                {q: v[p:] for q, v in result.quantiles.items()}, observed).items()
        }
        return {
            "study_id": study.study_id,
            "subject_id": rec.id,
            "log_rmse": log_rmse(result.future_mean, observed),
            "n_future": int(observed.size),
            "coverage_counts": inside,
        }

    rows = parallel_map(score, list(enumerate(tasks)))
    per_study: dict[str, dict] = {}
    for study in studies:
        scores = np.array([r["log_rmse"] for r in rows if r["study_id"] == study.study_id])
        if scores.size:
            per_study[study.study_id] = {
                "mean": float(scores.mean()),
                "sd": float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
                "n": int(scores.size),
            }
    return LooResult(rows=rows, skipped=skipped, per_study=per_study)


def aggregate_coverage(rows: list[dict]) -> dict[float, float]:
    """Pool per-subject interval-coverage counts into overall fractions."""
    rows = [r for r in rows if "coverage_counts" in r and r["n_future"] > 0]
    if not rows:
        raise ValidationError("no coverage counts to aggregate")
    total = sum(r["n_future"] for r in rows)
    levels = rows[0]["coverage_counts"].keys()
    return {level: sum(r["coverage_counts"][level] for r in rows) / total
            for level in levels}


@dataclass(frozen=True)
class VpcTable:
    bin_edges: np.ndarray  # (bins+1,)
    rows: list[dict]  # per bin: times, sim percentiles, observed coverage

    def percentile_columns(self, percentile: float) -> np.ndarray:
        return np.array([r[f"p{percentile:g}"] for r in self.rows])


def vpc(params, config: ModelConfig, study: Study, n_replicates: int = 100,
        percentiles: tuple[float, ...] = (10.0, 50.0, 90.0), bins: int = 8,
        seed: int = 0, steps: int = 100) -> VpcTable:
    """Visual-predictive-check table for one study.

    Synthesizes n_replicates virtual subjects per study individual on that
    individual's own sampling times (matching dose), pools simulated values
    into equal-count time bins, and reports simulation percentiles next to
    the fraction of observed values inside the outer percentile band.
    """
    if n_replicates < 100:
        raise ValidationError("vpc needs n_replicates >= 100")
    sim_t, sim_y = [], []
    for i, rec in enumerate(study.individuals):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, i]))
        draws = synthesize_population(params, config, study, n_replicates,
                                      rec.times, rng, dose=rec.dose, steps=steps)
        sim_t.append(np.tile(rec.times, n_replicates))
        sim_y.append(draws.ravel())
    sim_t = np.concatenate(sim_t)
    sim_y = np.concatenate(sim_y)
    obs_t = np.concatenate([r.times for r in study.individuals])
    obs_y = np.concatenate([r.concentrations for r in study.individuals])

    edges = np.quantile(obs_t, np.linspace(0.0, 1.0, bins + 1))
    edges[0] = 0.0
    edges[-1] = max(edges[-1], obs_t.max())
    edges = np.unique(edges)

    lo_p, hi_p = min(percentiles), max(percentiles)
    rows = []
    for b in range(edges.size - 1):
        lo, hi = edges[b], edges[b + 1]
        last = b == edges.size - 2
        in_bin_sim = (sim_t >= lo) & ((sim_t <= hi) if last else (sim_t < hi))
        in_bin_obs = (obs_t >= lo) & ((obs_t <= hi) if last else (obs_t < hi))
        row = {"bin_lo": float(lo), "bin_hi": float(hi),
               "n_obs": int(in_bin_obs.sum()), "n_sim": int(in_bin_sim.sum())}
        if row["n_sim"]:
            for p in percentiles:
                row[f"p{p:g}"] = float(np.percentile(sim_y[in_bin_sim], p))
            if row["n_obs"]:
                inside = ((obs_y[in_bin_obs] >= row[f"p{lo_p:g}"])
                          & (obs_y[in_bin_obs] <= row[f"p{hi_p:g}"]))
                row["obs_frac_in_band"] = float(inside.mean())
        rows.append(row)
    return VpcTable(bin_edges=edges, rows=rows)


def _resample_to_grid(trajectories, grid_points: int) -> np.ndarray:
    cleaned = []
    t_max = 0.0
    for times, values in trajectories:
        t = np.asarray(times, dtype=np.float64)
        y = np.asarray(values, dtype=np.float64)
        if t.size < 2:
            raise ValidationError("each trajectory needs >= 2 points for resampling")
        cleaned.append((t, y))
        t_max = max(t_max, float(t[-1]))
    grid = np.linspace(0.0, t_max, grid_points)
    return np.stack([np.interp(grid, t, y) for t, y in cleaned])


def mmd_rbf(set_a, set_b, grid_points: int = 32,
            bandwidth: float | None = None) -> float:
    """Unbiased RBF-kernel MMD^2 between two trajectory sets.

    Trajectories are (times, values) pairs linearly resampled onto a shared
    grid of grid_points times; the kernel bandwidth defaults to the median
    pairwise distance over the pooled sets.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise InsufficientDataError("mmd needs at least two trajectories per set")
    xa = _resample_to_grid(set_a, grid_points)
    xb = _resample_to_grid(set_b, grid_points)
    return _mmd2_unbiased(xa, xb, bandwidth)


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1)
    yy = (y * y).sum(axis=1)
    return np.maximum(xx[:, None] + yy[None, :] - 2.0 * x @ y.T, 0.0)


def _median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    pooled = np.vstack([x, y])
    d2 = _pairwise_sq_dists(pooled, pooled)
    off = d2[np.triu_indices_from(d2, k=1)]
    med = float(np.sqrt(np.median(off)))
    return med if med > 0.0 else 1.0


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float | None) -> float:
    bw = _median_bandwidth(x, y) if bandwidth is None else bandwidth
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * _pairwise_sq_dists(x, x))
    kyy = np.exp(-gamma * _pairwise_sq_dists(y, y))
    kxy = np.exp(-gamma * _pairwise_sq_dists(x, y))
    m, n = x.shape[0], y.shape[0]
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def mmd_permutation_test(set_a, set_b, n_permutations: int = 200,
                         grid_points: int = 32, seed: int = 0) -> dict:
    """Permutation p-value for the null that both sets share one law.

    The bandwidth is fixed from the pooled data, so permuted statistics are
    exchangeable with the observed one.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise InsufficientDataError("mmd needs at least two trajectories per set")
    xa = _resample_to_grid(set_a, grid_points)
    xb = _resample_to_grid(set_b, grid_points)
    bw = _median_bandwidth(xa, xb)
    observed = _mmd2_unbiased(xa, xb, bw)
    pooled = np.vstack([xa, xb])
    m = xa.shape[0]
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(pooled.shape[0])
        stat = _mmd2_unbiased(pooled[perm[:m]], pooled[perm[m:]], bw)
        if stat >= observed:
            hits += 1
    return {"mmd2": observed,
            "p_value": (hits + 1) / (n_permutations + 1),
            "bandwidth": bw}


def interval_coverage(quantiles: dict[float, np.ndarray], observed: np.ndarray,
                      levels: tuple[float, ...] = (0.5, 0.8, 0.95)) -> dict[float, float]:
    """Fraction of observations inside each central predictive interval."""
    obs = np.asarray(observed, dtype=np.float64)
    if obs.size == 0:
        raise ValidationError("interval_coverage needs observations")
    out = {}
    for level in levels:
        lo_q = round((1.0 - level) / 2.0, 6)
        hi_q = round(1.0 - lo_q, 6)
        if lo_q not in quantiles or hi_q not in quantiles:
            raise ValidationError(
                f"need quantiles {lo_q} and {hi_q} for the {level:.0%} interval")
        lo = np.asarray(quantiles[lo_q])
        hi = np.asarray(quantiles[hi_q])
        if lo.shape != obs.shape or hi.shape != obs.shape:
            raise ValidationError("quantile arrays must align with observations")
        out[level] = float(((obs >= lo) & (obs <= hi)).mean())
    return out
