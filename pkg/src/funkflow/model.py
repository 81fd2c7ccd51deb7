"""Operator encoder-decoder vector field conditioned on a study context.

The encoder turns a normalized study (all subjects' observations) into
per-observation representations under block-diagonal subject masking; the
decoder embeds the flow-interpolated target grid, self-attends over past
and future, cross-attends to the encoded study, and emits one velocity per
target time. Everything is conditioned on the flow time through Fourier
features added at the embedding and after each block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from . import nn
from .errors import ValidationError
from .sim import ROUTE_IV, ROUTE_ORAL, Study


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    ffn_expansion: int = 4
    dropout: float = 0.1
    f_max: float = 256.0
    sigma_min: float = 1e-4
    gp_variance: float = 1e-4
    gp_length_scale: float = 1.7e-3
    gp_jitter: float = 1e-7
    route_encoding: tuple[tuple[str, float], ...] = ((ROUTE_IV, 0.0), (ROUTE_ORAL, 1.0))

    def validate(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden dim {self.hidden} must be divisible by {self.heads} heads")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ValidationError("encoder and decoder depths must be >= 1")
        if self.hidden % 2 != 0 or self.hidden < 4:
            raise ValidationError("hidden dim must be even and >= 4 (time embedding)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")

    def route_code(self, route: str) -> float:
        for name, code in self.route_encoding:
            if name == route:
                return code
        raise ValidationError(f"unknown route {route!r}")


MINI_CONFIG = ModelConfig(hidden=8, enc_depth=1, dec_depth=1, heads=2, dropout=0.1)
TOY_CONFIG = ModelConfig(hidden=32, enc_depth=2, dec_depth=2, heads=2, dropout=0.1)


@dataclass(frozen=True)
class StudyScales:
    """Per-study normalization constants estimated from the context set."""

    conc: float
    time: float
    dose: float

    def normalize_conc(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self.conc

    def denormalize_conc(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.conc

    def normalize_time(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self.time


@dataclass(frozen=True)
class StudyBatch:
    """One study flattened to padded per-observation slots."""

    x: np.ndarray  # (N, 4): normalized (tau, y, a, r)
    valid: np.ndarray  # (N,) bool
    subject: np.ndarray  # (N,) int
    qw: np.ndarray  # (N,) per-subject quadrature weights
    scales: StudyScales


def normalize_study(study: Study, config: ModelConfig) -> StudyBatch:
    """Flatten a study into padded slots, normalized by its own maxima."""
    if not study.individuals:
        raise ValidationError("cannot normalize an empty study")
    conc_max = max(float(np.max(r.concentrations)) for r in study.individuals)
    time_max = max(float(np.max(r.times)) for r in study.individuals)
    dose_max = max(r.dose.amount for r in study.individuals)
    if conc_max <= 0.0:
        raise ValidationError("study has all-zero concentrations; cannot normalize")
    if time_max <= 0.0:
        raise ValidationError("study has no positive observation time; cannot normalize")
    scales = StudyScales(conc=conc_max, time=time_max, dose=dose_max)

    slots = max(r.times.size for r in study.individuals)
    n_ind = len(study.individuals)
    x = np.zeros((n_ind * slots, 4))
    valid = np.zeros(n_ind * slots, dtype=bool)
    subject = np.zeros(n_ind * slots, dtype=np.int64)
    for i, rec in enumerate(study.individuals):
        base = i * slots
        m = rec.times.size
        x[base:base + m, 0] = rec.times / time_max
        x[base:base + m, 1] = rec.concentrations / conc_max
        x[base:base + slots, 2] = rec.dose.amount / dose_max
        x[base:base + slots, 3] = config.route_code(rec.dose.route)
        valid[base:base + m] = True
        subject[base:base + slots] = i
    qw = att.subject_quadrature_weights(x[:, 0], subject, valid)
    return StudyBatch(x=x, valid=valid, subject=subject, qw=qw, scales=scales)


@dataclass(frozen=True)
class ContextStack:
    """Batch of study contexts padded to a common slot count."""

    x: np.ndarray  # (B, N, 4)
    valid: np.ndarray  # (B, N)
    qw: np.ndarray  # (B, N)
    self_mask: np.ndarray  # (B, N, N) block-diagonal & valid
    scales: list[StudyScales]


def stack_contexts(batches: list[StudyBatch]) -> ContextStack:
    b = len(batches)
    n = max(sb.x.shape[0] for sb in batches)
    x = np.zeros((b, n, 4))
    valid = np.zeros((b, n), dtype=bool)
    qw = np.zeros((b, n))
    self_mask = np.zeros((b, n, n), dtype=bool)
    for i, sb in enumerate(batches):
        m = sb.x.shape[0]
        x[i, :m] = sb.x
        valid[i, :m] = sb.valid
        qw[i, :m] = sb.qw
        self_mask[i, :m, :m] = att.block_diagonal_mask(sb.subject, sb.valid)
    return ContextStack(x=x, valid=valid, qw=qw, self_mask=self_mask,
                        scales=[sb.scales for sb in batches])


@dataclass(frozen=True)
class TargetStack:
    """Batch of target grids (prefix + future times, sorted) with flow state."""

    times: np.ndarray  # (B, T) normalized
    z: np.ndarray  # (B, T) flow state, normalized concentration units
    valid: np.ndarray  # (B, T) bool
    future: np.ndarray  # (B, T) bool: time past the prefix split
    qw: np.ndarray  # (B, T)
    dose: np.ndarray  # (B,) normalized dose amounts
    route: np.ndarray  # (B,) route codes

    def with_state(self, z: np.ndarray) -> "TargetStack":
        return replace(self, z=np.asarray(z, dtype=np.float64))

    def tile(self, batch: int) -> "TargetStack":
        """Repeat a single-example target across a sample batch."""
        if self.times.shape[0] != 1:
            raise ValidationError("tile expects a single-example target")
        rep = lambda a: np.repeat(a, batch, axis=0)
        return TargetStack(times=rep(self.times), z=rep(self.z), valid=rep(self.valid),
                           future=rep(self.future), qw=rep(self.qw),
                           dose=np.repeat(self.dose, batch),
                           route=np.repeat(self.route, batch))


def make_target(times_norm: np.ndarray, prefix_len: int, dose_norm: float,
                route_code: float, z: np.ndarray | None = None) -> TargetStack:
    """Single-example target grid; prefix_len leading times form the past."""
    t = np.asarray(times_norm, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValidationError("target needs a nonempty 1-d time grid")
    if np.any(np.diff(t) <= 0.0):
        raise ValidationError("target times must be strictly increasing")
    if not 0 <= prefix_len <= t.size:
        raise ValidationError("prefix length out of range")
    future = np.ones(t.size, dtype=bool)
    future[:prefix_len] = False
    qw = att.trapezoid_weights(t).weights
    z = np.zeros(t.size) if z is None else np.asarray(z, dtype=np.float64)
    return TargetStack(times=t[None], z=z[None], valid=np.ones((1, t.size), dtype=bool),
                       future=future[None], qw=qw[None],
                       dose=np.array([dose_norm]), route=np.array([route_code]))


def stack_targets(targets: list[TargetStack]) -> TargetStack:
    b = len(targets)
    t_max = max(tg.times.shape[1] for tg in targets)
    times = np.zeros((b, t_max))
    z = np.zeros((b, t_max))
    valid = np.zeros((b, t_max), dtype=bool)
    future = np.zeros((b, t_max), dtype=bool)
    qw = np.zeros((b, t_max))
    dose = np.zeros(b)
    route = np.zeros(b)
    for i, tg in enumerate(targets):
        m = tg.times.shape[1]
        times[i, :m] = tg.times[0]
        z[i, :m] = tg.z[0]
        valid[i, :m] = tg.valid[0]
        future[i, :m] = tg.future[0]
        qw[i, :m] = tg.qw[0]
        dose[i] = tg.dose[0]
        route[i] = tg.route[0]
    return TargetStack(times=times, z=z, valid=valid, future=future, qw=qw,
                       dose=dose, route=route)


def init_model_params(config: ModelConfig, rng: np.random.Generator) -> nn.ParamStore:
    """Allocate all trainable weights; insertion order fixes the flat layout."""
    config.validate()
    d = config.hidden
    hidden_ffn = config.ffn_expansion * d
    store = nn.ParamStore()

    nn.init_mlp(store, "enc_embed", [4, d, d, d], rng)
    _init_ln(store, "enc_embed_ln", d)
    for layer in range(config.enc_depth):
        p = f"enc{layer}"
        _init_ln(store, f"{p}.ln1", d)
        att.init_attention(store, f"{p}.attn", d, rng)
        _init_ln(store, f"{p}.ln2", d)
        nn.init_mlp(store, f"{p}.ffn", [d, hidden_ffn, d], rng)
    _init_ln(store, "enc_final_ln", d)

    nn.init_mlp(store, "dec_embed", [4, d, d, d], rng)
    _init_ln(store, "dec_embed_ln", d)
    for layer in range(config.dec_depth):
        p = f"dec{layer}"
        _init_ln(store, f"{p}.ln1", d)
        att.init_attention(store, f"{p}.self_attn", d, rng)
        _init_ln(store, f"{p}.ln2", d)
        nn.init_mlp(store, f"{p}.ffn1", [d, hidden_ffn, d], rng)
        _init_ln(store, f"{p}.ln3", d)
        att.init_attention(store, f"{p}.cross_attn", d, rng)
        _init_ln(store, f"{p}.ln4", d)
        nn.init_mlp(store, f"{p}.ffn2", [d, hidden_ffn, d], rng)
    _init_ln(store, "dec_final_ln", d)

    nn.init_mlp(store, "head", [d, d, d, 1], rng)
    return store


def _init_ln(store: nn.ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def _ln(leaves, name, x):
    return nn.layer_norm(x, leaves[f"{name}.g"], leaves[f"{name}.b"])


def _time_embedding(t, config: ModelConfig) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return nn.fourier_time_embed(t, config.hidden, config.f_max)[:, None, :]  # (B, 1, d)


def embed_context(leaves, config: ModelConfig, obs: np.ndarray, t: float,
                  rng: np.random.Generator | None = None, train: bool = False):
    """Lift one normalized (tau, y, a, r) observation to the model dimension."""
    obs = np.asarray(obs, dtype=np.float64).reshape(1, 1, 4)
    t_emb = _time_embedding(t, config)
    h = nn.mlp_forward(leaves, "enc_embed", nn.Var(obs), 3,
                       dropout_rate=config.dropout, rng=rng, train=train)
    h = _ln(leaves, "enc_embed_ln", nn.add(h, t_emb))
    return nn.reshape(h, (config.hidden,))


def encode_study(leaves, config: ModelConfig, ctx: ContextStack, t,
                 rng: np.random.Generator | None = None, train: bool = False):
    """Per-observation study representation h^S of shape (B, N, d)."""
    t_emb = _time_embedding(t, config)
    h = nn.mlp_forward(leaves, "enc_embed", nn.Var(ctx.x), 3,
                       dropout_rate=config.dropout, rng=rng, train=train)
    h = _ln(leaves, "enc_embed_ln", nn.add(h, t_emb))
    for layer in range(config.enc_depth):
        p = f"enc{layer}"
        attn = att.self_op_attn(leaves, f"{p}.attn", _ln(leaves, f"{p}.ln1", h),
                                ctx.qw, ctx.self_mask, config.heads,
                                valid_q=ctx.valid, dropout_rate=config.dropout,
                                rng=rng, train=train)
        h = nn.add(h, attn)
        ffn = nn.mlp_forward(leaves, f"{p}.ffn", _ln(leaves, f"{p}.ln2", h), 2,
                             dropout_rate=config.dropout, rng=rng, train=train)
        h = nn.add(nn.add(h, ffn), t_emb)
    return _ln(leaves, "enc_final_ln", h)


def decode_target(leaves, config: ModelConfig, tgt: TargetStack, t, h_study,
                  ctx: ContextStack, rng: np.random.Generator | None = None,
                  train: bool = False):
    """Velocity value per target position, shape (B, T)."""
    b, t_len = tgt.times.shape
    x = np.stack([
        tgt.times,
        tgt.z,
        np.broadcast_to(tgt.dose[:, None], (b, t_len)),
        np.broadcast_to(tgt.route[:, None], (b, t_len)),
    ], axis=-1)
    t_emb = _time_embedding(t, config)
    g = nn.mlp_forward(leaves, "dec_embed", nn.Var(x), 3,
                       dropout_rate=config.dropout, rng=rng, train=train)
    g = _ln(leaves, "dec_embed_ln", nn.add(g, t_emb))

    self_mask = tgt.valid[:, :, None] & tgt.valid[:, None, :]
    cross_mask = tgt.valid[:, :, None] & ctx.valid[:, None, :]
    for layer in range(config.dec_depth):
        p = f"dec{layer}"
        attn = att.self_op_attn(leaves, f"{p}.self_attn",
                                _ln(leaves, f"{p}.ln1", g), tgt.qw, self_mask,
                                config.heads, valid_q=tgt.valid,
                                dropout_rate=config.dropout, rng=rng, train=train)
        g = nn.add(g, attn)
        ffn = nn.mlp_forward(leaves, f"{p}.ffn1", _ln(leaves, f"{p}.ln2", g), 2,
                             dropout_rate=config.dropout, rng=rng, train=train)
        g = nn.add(g, ffn)
        cross = att.cross_op_attn(leaves, f"{p}.cross_attn",
                                  _ln(leaves, f"{p}.ln3", g), h_study, ctx.qw,
                                  cross_mask, config.heads, valid_q=tgt.valid,
                                  dropout_rate=config.dropout, rng=rng, train=train)
        g = nn.add(g, cross)
        ffn2 = nn.mlp_forward(leaves, f"{p}.ffn2", _ln(leaves, f"{p}.ln4", g), 2,
                              dropout_rate=config.dropout, rng=rng, train=train)
        g = nn.add(nn.add(g, ffn2), t_emb)
    g = _ln(leaves, "dec_final_ln", g)
    out = nn.mlp_forward(leaves, "head", g, 3,
                         dropout_rate=config.dropout, rng=rng, train=train)
    return nn.reshape(out, (b, t_len))


def vector_field(leaves, config: ModelConfig, ctx: ContextStack, tgt: TargetStack,
                 t, rng: np.random.Generator | None = None, train: bool = False,
                 h_study=None):
    """Masked velocity: decoder output zeroed at prefix (past) positions."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if h_study is None:
        # a broadcast context (sample batch sharing one study) is encoded once
        t_enc = t_arr
        if ctx.x.shape[0] == 1 and t_arr.size > 1:
            if np.ptp(t_arr) != 0.0:
                raise ValidationError(
                    "a shared context requires one common flow time per batch")
            t_enc = t_arr[:1]
        h_study = encode_study(leaves, config, ctx, t_enc, rng=rng, train=train)
    raw = decode_target(leaves, config, tgt, t_arr, h_study, ctx, rng=rng, train=train)
    mask = (tgt.future & tgt.valid).astype(np.float64)
    return nn.mul(raw, mask)


def as_leaves(params: nn.ParamStore) -> dict[str, nn.Var]:
    """Wrap a parameter store for forward-only evaluation."""
    return {name: nn.Var(value, op=f"param:{name}") for name, value in params.items()}
