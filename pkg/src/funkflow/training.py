"""Flow-matching training: example assembly, conditional path, loss, loop.

Each training example pairs one simulated study (context) with one held-out
subject (target). The target's observations are split at a random prefix
index; the flow source fills the future slots with a softplus-GP draw
(posterior when a prefix exists, prior otherwise) and the velocity target
is the displacement from source to data on the future slots only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import gp, nn
from .errors import NonFiniteLossError, NumericalError, ValidationError
from .model import (
    ContextStack,
    ModelConfig,
    StudyBatch,
    TargetStack,
    make_target,
    normalize_study,
    stack_contexts,
    stack_targets,
    vector_field,
)
from .sim import IndividualRecord, Study


@dataclass(frozen=True)
class FlowExample:
    """One training tuple: context study, target grid, source z0 and data z1."""

    context: StudyBatch
    target: TargetStack  # z slot unused here; carries grid, masks, dose
    z0: np.ndarray  # (T,) = (observed past, GP source future)
    z1: np.ndarray  # (T,) = (observed past, observed future)
    prefix_len: int
    study_id: str
    subject_id: str

    def validate(self) -> None:
        past = ~self.target.future[0]
        if not np.array_equal(self.z0[past], self.z1[past]):
            raise ValidationError("z0 and z1 must agree exactly on past slots")
        if np.any(self.z0[self.target.future[0]] <= 0.0):
            raise ValidationError("source future values must be positive")


def context_without(study: Study, subject_id: str) -> Study:
    rest = tuple(r for r in study.individuals if r.id != subject_id)
    if len(rest) == len(study.individuals):
        raise ValidationError(f"subject {subject_id!r} not found in study {study.study_id}")
    return Study(study_id=study.study_id, seed=study.seed, individuals=rest)


def make_training_example(study: Study, target: IndividualRecord,
                          config: ModelConfig, rng: np.random.Generator) -> FlowExample:
    """Leave-one-subject-out example with a uniform random prefix split."""
    if target.times.size < 1:
        raise ValidationError("target must have at least one observation")
    context = normalize_study(context_without(study, target.id), config)
    scales = context.scales
    times_n = scales.normalize_time(target.times)
    values_n = scales.normalize_conc(target.concentrations)

    p = int(rng.integers(0, target.times.size))  # uniform over {0, ..., T-1}
    kernel = gp.RBFKernel(config.gp_variance, config.gp_length_scale)
    prefix = (times_n[:p], values_n[:p]) if p > 0 else None
    _, x_future = gp.reference_sample(prefix, times_n[p:], kernel,
                                      config.gp_jitter, rng)
    z0 = np.concatenate([values_n[:p], x_future])
    z1 = values_n.copy()

    tgt = make_target(times_n, p, target.dose.amount / scales.dose,
                      config.route_code(target.dose.route))
    example = FlowExample(context=context, target=tgt, z0=z0, z1=z1,
                          prefix_len=p, study_id=study.study_id,
                          subject_id=target.id)
    example.validate()
    return example


def conditional_path_sample(z0: np.ndarray, z1: np.ndarray, t: float,
                            sigma_min: float, future: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
    """Gaussian path point: interpolation plus sigma_min noise on future slots.

    Past slots stay exactly equal to the observed prefix at every flow time.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    future = np.asarray(future, dtype=bool)
    z_t = z1.copy()
    noise = sigma_min * rng.standard_normal(z0.shape)
    mixed = t * z1 + (1.0 - t) * z0 + noise
    z_t[future] = mixed[future]
    return z_t


def cfm_loss(v_pred, y_future_minus_source: np.ndarray, future_valid: np.ndarray):
    """Mean squared error over valid future slots; empty futures contribute 0.

    v_pred: Var (B, T); y_future_minus_source: (B, T) target velocity
    (arbitrary on non-future slots); future_valid: (B, T) bool.
    """
    weights = future_valid.astype(np.float64)
    counts = weights.sum(axis=1)
    active = counts > 0
    if not np.any(active):
        return nn.mul(nn.vsum(nn.mul(v_pred, 0.0)), 0.0)
    per_slot = weights / np.maximum(counts, 1.0)[:, None] / active.sum()
    resid = nn.sub(v_pred, y_future_minus_source)
    return nn.vsum(nn.mul(nn.mul(resid, resid), per_slot))


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    base_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    clip_norm: float = 0.5
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch size must be >= 1")
        if self.base_lr < 0 or self.clip_norm <= 0:
            raise ValidationError("bad learning rate or clip norm")


@dataclass
class BatchArrays:
    """Stacked constants for one optimizer step."""

    ctx: ContextStack
    tgt: TargetStack
    velocity: np.ndarray  # (B, T)
    future_valid: np.ndarray  # (B, T)
    t: np.ndarray  # (B,)


def assemble_batch(examples: list[FlowExample], config: ModelConfig,
                   rng: np.random.Generator) -> BatchArrays:
    """Draw flow times and path points, pad, and stack a batch of examples."""
    targets = []
    ts = rng.uniform(0.0, 1.0, size=len(examples))
    for example, t in zip(examples, ts):
        z_t = conditional_path_sample(example.z0, example.z1, t, config.sigma_min,
                                      example.target.future[0], rng)
        targets.append(example.target.with_state(z_t))
    tgt = stack_targets(targets)
    ctx = stack_contexts([e.context for e in examples])

    b, t_len = tgt.times.shape
    velocity = np.zeros((b, t_len))
    for i, example in enumerate(examples):
        m = example.z1.size
        velocity[i, :m] = example.z1 - example.z0
    future_valid = tgt.future & tgt.valid
    return BatchArrays(ctx=ctx, tgt=tgt, velocity=velocity,
                       future_valid=future_valid, t=ts)


def batch_loss(leaves: dict[str, nn.Var], batch: BatchArrays, config: ModelConfig,
               rng: np.random.Generator | None, train: bool):
    v = vector_field(leaves, config, batch.ctx, batch.tgt, batch.t,
                     rng=rng, train=train)
    return cfm_loss(v, batch.velocity, batch.future_valid)


@dataclass
class TrainResult:
    params: nn.ParamStore
    history: list[dict]  # rows: epoch, mean_loss, lr
    best_params: nn.ParamStore = field(repr=False, default=None)
    best_loss: float = np.inf


def train(params: nn.ParamStore, studies: list[Study], model_config: ModelConfig,
          train_config: TrainConfig, checkpoint_fn=None,
          log_fn=None) -> TrainResult:
    """Optimize the vector field on a fixed corpus of simulated studies.

    Each epoch reshuffles the corpus; every study contributes one example
    per pass with a freshly drawn target subject, prefix split, flow time,
    source draw, and path noise. checkpoint_fn(params, epoch, mean_loss) is
    called every checkpoint_every epochs and on the best epoch.
    """
    train_config.validate()
    model_config.validate()
    if not studies:
        raise ValidationError("training needs at least one study")
    opt_state = nn.adamw_init(params, weight_decay=train_config.weight_decay)
    result = TrainResult(params=params, history=[], best_params=params.copy())

    for epoch in range(train_config.epochs):
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[train_config.seed, epoch]))
        order = epoch_rng.permutation(len(studies))
        lr = nn.lr_schedule(epoch, train_config.base_lr, train_config.warmup_epochs)
        losses = []
        start = time.perf_counter()
        for lo in range(0, len(order), train_config.batch_size):
            chunk = order[lo:lo + train_config.batch_size]
            examples = []
            for idx in chunk:
                study = studies[idx]
                target = study.individuals[int(epoch_rng.integers(len(study.individuals)))]
                examples.append(make_training_example(study, target, model_config,
                                                      epoch_rng))
            batch = assemble_batch(examples, model_config, epoch_rng)
            try:
                loss, grads = nn.loss_and_grad(
                    params,
                    lambda leaves: batch_loss(leaves, batch, model_config,
                                              epoch_rng, train=True))
            except NonFiniteLossError as exc:
                raise NumericalError(
                    f"training aborted at epoch {epoch}: {exc}; "
                    "last checkpoint retained") from exc
            grads, _ = nn.clip_global_norm(grads, train_config.clip_norm)
            nn.adamw_step(opt_state, params, grads, lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        row = {"epoch": epoch, "mean_loss": mean_loss, "lr": lr,
               "seconds": time.perf_counter() - start}
        result.history.append(row)
        if log_fn is not None:
            log_fn(row)
        if mean_loss < result.best_loss:
            result.best_loss = mean_loss
            result.best_params = params.copy()
            if checkpoint_fn is not None:
                checkpoint_fn(params, epoch, mean_loss, tag="best")
        if checkpoint_fn is not None and (epoch + 1) % train_config.checkpoint_every == 0:
            checkpoint_fn(params, epoch, mean_loss, tag="periodic")
    return result
