"""Flow integration and the two inference modes.

Population synthesis starts the flow from a softplus-GP prior draw on the
query grid; forecasting starts from the softplus-GP posterior conditioned
on an observed prefix. The learned field is zero on past slots, so
forecasts never move the observed prefix. The study encoding depends on
the flow time, so the encoder is re-evaluated at every ODE step; all
samples for one context integrate jointly with the context broadcast
across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gp, nn
from .errors import NumericalError, ValidationError
from .model import (
    ContextStack,
    ModelConfig,
    TargetStack,
    as_leaves,
    make_target,
    normalize_study,
    stack_contexts,
    stack_targets,
    vector_field,
)
from .sim import DoseSpec, Study

QUANTILES = (0.025, 0.10, 0.25, 0.50, 0.75, 0.90, 0.975)


def integrate_flow(params, config: ModelConfig, ctx: ContextStack,
                   tgt: TargetStack, z0: np.ndarray, steps: int = 100,
                   method: str = "euler", field_fn=None) -> np.ndarray:
    """Integrate dz/dt = v(z, t, context) from t=0 to 1 with fixed steps.

    z0: (B, T). Past slots stay bitwise constant because the field is
    exactly zero there. Raises NumericalError with the step index if the
    state leaves the finite range. field_fn(state, t) overrides the learned
    field (oracle hook for testing the integrator).
    """
    if method not in ("euler", "rk4"):
        raise ValidationError(f"unknown integrator {method!r}")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    z = np.array(z0, dtype=np.float64)
    if tgt.times.shape[0] == 1 and z.shape[0] > 1:
        tgt = tgt.tile(z.shape[0])
    if z.shape != tgt.times.shape:
        raise ValidationError("z0 must match the target grid shape")
    dt = 1.0 / steps
    with nn.no_grad():
        if field_fn is not None:
            field = field_fn
        else:
            leaves = as_leaves(params) if not isinstance(params, dict) else params

            def field(state: np.ndarray, t: float) -> np.ndarray:
                return vector_field(leaves, config, ctx, tgt.with_state(state),
                                    np.full(state.shape[0], t), train=False).data

        for k in range(steps):
            t = k * dt
            if method == "euler":
                z = z + dt * field(z, t)
            else:
                k1 = field(z, t)
                k2 = field(z + 0.5 * dt * k1, t + 0.5 * dt)
                k3 = field(z + 0.5 * dt * k2, t + 0.5 * dt)
                k4 = field(z + dt * k3, min(t + dt, 1.0))
                z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(z)):
                raise NumericalError(f"flow integration diverged at step {k + 1}")
    return z


def _single_context(study: Study, config: ModelConfig) -> ContextStack:
    return stack_contexts([normalize_study(study, config)])


def synthesize_population(params, config: ModelConfig, study: Study,
                          n_samples: int, query_times: np.ndarray,
                          rng: np.random.Generator, dose: DoseSpec | None = None,
                          steps: int = 100, method: str = "euler") -> np.ndarray:
    """Zero-shot virtual subjects on the query grid; returns (n_samples, T).

    Doses are resampled uniformly from the context individuals unless a
    DoseSpec is supplied. Concentrations are denormalized and clamped at 0.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    q = np.asarray(query_times, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(np.diff(q) <= 0.0):
        raise ValidationError("query_times must be a strictly increasing vector")
    ctx = _single_context(study, config)
    scales = ctx.scales[0]
    times_n = scales.normalize_time(q)
    kernel = gp.RBFKernel(config.gp_variance, config.gp_length_scale)

    doses = study.individuals
    targets = []
    z0 = np.empty((n_samples, q.size))
    for s in range(n_samples):
        if dose is None:
            pick = doses[int(rng.integers(len(doses)))].dose
        else:
            pick = dose
        _, x_future = gp.reference_sample(None, times_n, kernel, config.gp_jitter, rng)
        z0[s] = x_future
        targets.append(make_target(times_n, 0, pick.amount / scales.dose,
                                   config.route_code(pick.route)))
    tgt = stack_targets(targets)
    z1 = integrate_flow(params, config, ctx, tgt, z0, steps=steps, method=method)
    return np.maximum(scales.denormalize_conc(z1), 0.0)


@dataclass(frozen=True)
class ForecastResult:
    """Predictive samples on the full prefix+future grid plus summaries."""

    times: np.ndarray  # (T,) hours, prefix then future
    prefix_len: int
    samples: np.ndarray  # (n_samples, T) concentrations
    mean: np.ndarray  # (T,)
    quantiles: dict[float, np.ndarray]

    @property
    def future_times(self) -> np.ndarray:
        return self.times[self.prefix_len:]

    @property
    def future_samples(self) -> np.ndarray:
        return self.samples[:, self.prefix_len:]

    @property
    def future_mean(self) -> np.ndarray:
        return self.mean[self.prefix_len:]


def forecast_individual(params, config: ModelConfig, study: Study,
                        prefix_times: np.ndarray, prefix_values: np.ndarray,
                        dose: DoseSpec, future_times: np.ndarray, n_samples: int,
                        rng: np.random.Generator, steps: int = 100,
                        method: str = "euler") -> ForecastResult:
    """Prefix-conditioned predictive distribution for one individual.

    The study is the conditioning context (exclude the target subject from
    it before calling). Sources are softplus-GP posterior draws conditioned
    on the normalized prefix; the flow moves only the future slots.
    """
    p_times = np.asarray(prefix_times, dtype=np.float64)
    p_values = np.asarray(prefix_values, dtype=np.float64)
    f_times = np.asarray(future_times, dtype=np.float64)
    if p_times.size == 0:
        raise ValidationError("forecasting needs a nonempty prefix")
    if p_times.shape != p_values.shape:
        raise ValidationError("prefix times and values must match in length")
    if f_times.size == 0 or np.any(np.diff(f_times) <= 0.0):
        raise ValidationError("future_times must be strictly increasing and nonempty")
    if f_times.min() <= p_times.max():
        raise ValidationError("future_times must lie after the prefix")
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")

    ctx = _single_context(study, config)
    scales = ctx.scales[0]
    pt_n = scales.normalize_time(p_times)
    pv_n = scales.normalize_conc(p_values)
    ft_n = scales.normalize_time(f_times)
    kernel = gp.RBFKernel(config.gp_variance, config.gp_length_scale)
    post = gp.gp_posterior(pt_n, pv_n, kernel, config.gp_jitter)

    grid_n = np.concatenate([pt_n, ft_n])
    p = p_times.size
    z0 = np.empty((n_samples, grid_n.size))
    targets = []
    for s in range(n_samples):
        raw = gp.gp_posterior_sample(post, ft_n, rng)
        z0[s] = np.concatenate([pv_n, gp.softplus_transform(raw)])
        targets.append(make_target(grid_n, p, dose.amount / scales.dose,
                                   config.route_code(dose.route)))
    tgt = stack_targets(targets)
    z1 = integrate_flow(params, config, ctx, tgt, z0, steps=steps, method=method)

    samples = scales.denormalize_conc(z1)
    samples[:, p:] = np.maximum(samples[:, p:], 0.0)
    # integration provably leaves normalized past slots untouched; restore the
    # observed values exactly rather than round-tripping them through the scale
    samples[:, :p] = p_values[None, :]
    quantiles = {q: np.quantile(samples, q, axis=0) for q in QUANTILES}
    return ForecastResult(
        times=np.concatenate([p_times, f_times]),
        prefix_len=p,
        samples=samples,
        mean=samples.mean(axis=0),
        quantiles=quantiles,
    )


def zero_field_params(params: nn.ParamStore) -> nn.ParamStore:
    """Copy of the parameters with the head's final affine zeroed.

    The resulting vector field is identically zero, so inference reduces to
    the softplus-GP reference: the analytic null baseline.
    """
    out = params.copy()
    out["head.l2.w"] = np.zeros_like(out["head.l2.w"])
    out["head.l2.b"] = np.zeros_like(out["head.l2.b"])
    return out
