"""Continuum operator attention on irregular grids.

Attention sums are quadrature approximations of integral operators: keys
carry trapezoidal weights derived from their time increments, so irregular
sampling does not bias the attention average. The normalizing denominator
of the attention ratio telescopes to the same weighted sum as the
numerator, which is how it is evaluated here (with rowwise max-shift
stabilization that cancels in the ratio).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ValidationError


@dataclass(frozen=True)
class QuadratureWeights:
    """Per-position trapezoid weights, zero on padding, unit sum over valid."""

    weights: np.ndarray
    valid: np.ndarray

    def validate(self) -> None:
        w = self.weights
        if np.any(w < 0.0):
            raise ValidationError("quadrature weights must be nonnegative")
        if np.any(w[~self.valid] != 0.0):
            raise ValidationError("padded positions must carry zero weight")
        if abs(w[self.valid].sum() - 1.0) > 1e-12:
            raise ValidationError("valid quadrature weights must sum to 1")


def raw_trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Unnormalized trapezoid weights of a sorted grid; a single point gets 1."""
    t = np.asarray(times, dtype=np.float64)
    if t.size == 0:
        raise ValidationError("trapezoid weights need at least one time point")
    if np.any(np.diff(t) < 0.0):
        raise ValidationError("times must be sorted ascending")
    if t.size == 1:
        return np.ones(1)
    dt = np.diff(t)
    w = np.empty(t.size)
    w[0] = 0.5 * dt[0]
    w[-1] = 0.5 * dt[-1]
    w[1:-1] = 0.5 * (dt[:-1] + dt[1:])
    return w


def trapezoid_weights(times: np.ndarray, pad_mask: np.ndarray | None = None) -> QuadratureWeights:
    """Unit-sum trapezoid weights over the valid positions of one grid."""
    t = np.asarray(times, dtype=np.float64)
    valid = np.ones(t.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if valid.shape != t.shape:
        raise ValidationError("pad_mask must match times in shape")
    if not valid.any():
        raise ValidationError("cannot build quadrature weights with zero valid positions")
    raw = raw_trapezoid_weights(t[valid])
    total = raw.sum()
    if total <= 0.0:
        # coincident valid times: fall back to a uniform rule
        raw = np.ones(raw.size)
        total = raw.sum()
    w = np.zeros(t.shape)
    w[valid] = raw / total
    return QuadratureWeights(weights=w, valid=valid)


def subject_quadrature_weights(times: np.ndarray, subject_index: np.ndarray,
                               valid: np.ndarray) -> np.ndarray:
    """Per-subject trapezoid weights on a concatenated multi-subject grid.

    Each subject's block is normalized to unit sum on its own (no increments
    across subject boundaries), so a subject's weights never depend on how
    the others are arranged.
    """
    t = np.asarray(times, dtype=np.float64)
    subj = np.asarray(subject_index)
    valid = np.asarray(valid, dtype=bool)
    w = np.zeros(t.shape)
    for s in np.unique(subj[valid]):
        sel = (subj == s) & valid
        w[sel] = trapezoid_weights(t[sel]).weights
    return w


def block_diagonal_mask(subject_index: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean (N, N) mask: attend only within the same subject, minus padding."""
    subj = np.asarray(subject_index)
    if valid is None:
        valid = np.ones(subj.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    same = subj[:, None] == subj[None, :]
    return same & valid[:, None] & valid[None, :]


def padding_mask(valid_q: np.ndarray, valid_k: np.ndarray) -> np.ndarray:
    """Boolean (Tq, Tk) mask admitting only valid query/key pairs."""
    return np.asarray(valid_q, dtype=bool)[:, None] & np.asarray(valid_k, dtype=bool)[None, :]


def _masked_shifted_exp(scores, mask: np.ndarray, shift: np.ndarray):
    """exp(scores - shift) where attendable, exactly 0 elsewhere."""
    sd = nn._data(scores)
    shifted = np.where(mask, sd - shift, 0.0)
    e = np.where(mask, np.exp(shifted), 0.0)
    parents = ((scores, lambda g: g * e),) if isinstance(scores, nn.Var) else ()
    return nn.Var(e, parents, "masked_exp")


def operator_attention(q, k, v, mask: np.ndarray, key_weights: np.ndarray):
    """Quadrature-weighted attention ratio.

    q: (..., Tq, dA); k, v: (..., Tk, dA); mask: boolean broadcastable to
    (..., Tq, Tk), True where a query may attend; key_weights broadcastable
    to (..., Tk). Output rows whose mask admits no key are zero. Rows whose
    attendable keys all carry zero weight fall back to the plain average.
    """
    dA = nn._data(q).shape[-1]
    kd, vd = nn._data(k), nn._data(v)
    if kd.shape[-1] != dA:
        raise ValidationError("query and key feature dimensions must agree")
    if vd.shape[-2] != kd.shape[-2]:
        raise ValidationError("keys and values must share their position count")
    kt = nn.transpose(k, tuple(range(kd.ndim - 2)) + (-1, -2)) \
        if isinstance(k, nn.Var) else np.swapaxes(k, -1, -2)
    scores = nn.mul(nn.matmul(q, kt), 1.0 / np.sqrt(dA))
    sdata = scores.data if isinstance(scores, nn.Var) else scores
    mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), sdata.shape)

    with np.errstate(invalid="ignore"):
        row_max = np.max(np.where(mask_b, sdata, -np.inf), axis=-1, keepdims=True)
    any_key = mask_b.any(axis=-1, keepdims=True)
    row_max = np.where(any_key, row_max, 0.0)

    w_b = np.broadcast_to(np.asarray(key_weights, dtype=np.float64)[..., None, :], sdata.shape)
    w_eff = np.where(mask_b, w_b, 0.0)
    attended_w = w_eff.sum(axis=-1, keepdims=True)
    degenerate = any_key & (attended_w <= 0.0)
    if np.any(degenerate):
        w_eff = np.where(degenerate & mask_b, 1.0, w_eff)

    e = _masked_shifted_exp(scores, mask_b, row_max)
    ew = nn.mul(e, w_eff)
    num = nn.matmul(ew, v)
    den = nn.vsum(ew, axis=-1, keepdims=True)
    den = nn.add(den, (~any_key).astype(np.float64))  # all-masked rows -> 0/1 = 0
    return nn.div(num, den)


def _split_heads(x, heads: int):
    b, t, d = nn._data(x).shape
    return nn.transpose(nn.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, da = nn._data(x).shape
    return nn.reshape(nn.transpose(x, (0, 2, 1, 3)), (b, t, h * da))


def _check_valid_queries(mask: np.ndarray, valid_q: np.ndarray | None) -> None:
    if valid_q is None:
        return
    bad = np.asarray(valid_q, dtype=bool) & ~mask.any(axis=-1)
    if np.any(bad):
        raise ValidationError("a valid query row has no unmasked key")


def self_op_attn(params: dict, prefix: str, x, key_weights: np.ndarray,
                 mask: np.ndarray, heads: int, valid_q: np.ndarray | None = None,
                 dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                 train: bool = False):
    """Multi-head operator self-attention with learned affine projections.

    x: (B, T, d); key_weights: (B, T); mask: (B, T, T) boolean.
    """
    d = nn._data(x).shape[-1]
    if d % heads != 0:
        raise ValidationError(f"hidden dim {d} not divisible by {heads} heads")
    _check_valid_queries(mask, valid_q)
    q = _split_heads(nn.affine(params, f"{prefix}.q", x), heads)
    k = _split_heads(nn.affine(params, f"{prefix}.k", x), heads)
    v = _split_heads(nn.affine(params, f"{prefix}.v", x), heads)
    out = operator_attention(q, k, v, mask[:, None], key_weights[:, None])
    out = nn.affine(params, f"{prefix}.o", _merge_heads(out))
    return nn.dropout(out, dropout_rate, rng, train)


def cross_op_attn(params: dict, prefix: str, x, y, key_weights: np.ndarray,
                  mask: np.ndarray, heads: int, valid_q: np.ndarray | None = None,
                  dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                  train: bool = False):
    """Queries from x (B, Tq, d); keys/values from y (B, Tk, d); mask (B, Tq, Tk)."""
    d = nn._data(x).shape[-1]
    if d % heads != 0:
        raise ValidationError(f"hidden dim {d} not divisible by {heads} heads")
    _check_valid_queries(mask, valid_q)
    q = _split_heads(nn.affine(params, f"{prefix}.q", x), heads)
    k = _split_heads(nn.affine(params, f"{prefix}.k", y), heads)
    v = _split_heads(nn.affine(params, f"{prefix}.v", y), heads)
    out = operator_attention(q, k, v, mask[:, None], key_weights[:, None])
    out = nn.affine(params, f"{prefix}.o", _merge_heads(out))
    return nn.dropout(out, dropout_rate, rng, train)


def init_attention(store: nn.ParamStore, prefix: str, d: int,
                   rng: np.random.Generator) -> None:
    for name in ("q", "k", "v", "o"):
        nn.init_affine(store, f"{prefix}.{name}", d, d, rng)


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Plain scaled-dot-product softmax attention (uniform-grid oracle)."""
    dA = q.shape[-1]
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(dA)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)) @ v
