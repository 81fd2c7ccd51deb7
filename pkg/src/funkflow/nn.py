"""Minimal trainable-network substrate.

A small reverse-mode tape over float64 numpy arrays provides exactly the
primitives the vector-field model needs (affine maps, GELU, layer norm,
exp, reductions, shape ops), plus a named parameter store, AdamW with
decoupled weight decay, global-norm clipping, and the warmup schedule.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NonFiniteLossError, ValidationError

_GRAD_ENABLED = True
_COUNTER = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LN_EPS = 1e-5


@contextmanager
def no_grad():
    """Disable tape recording inside the context (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """Node in the computation graph: an ndarray plus vjp links to parents."""

    __slots__ = ("data", "grad", "parents", "op", "index")

    def __init__(self, data, parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents) if _GRAD_ENABLED else ()
        self.op = op
        self.index = next(_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.data.shape})"


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to a broadcast operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, out_data, vjp_a, vjp_b, op):
    parents = []
    if isinstance(a, Var):
        parents.append((a, vjp_a))
    if isinstance(b, Var):
        parents.append((b, vjp_b))
    return Var(out_data, parents, op)


def add(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad + bd,
                   lambda g: _unbroadcast(g, ad.shape),
                   lambda g: _unbroadcast(g, bd.shape), "add")


def sub(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad - bd,
                   lambda g: _unbroadcast(g, ad.shape),
                   lambda g: _unbroadcast(-g, bd.shape), "sub")


def mul(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad * bd,
                   lambda g: _unbroadcast(g * bd, ad.shape),
                   lambda g: _unbroadcast(g * ad, bd.shape), "mul")


def div(a, b):
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return _binary(a, b, out,
                   lambda g: _unbroadcast(g / bd, ad.shape),
                   lambda g: _unbroadcast(-g * out / bd, bd.shape), "div")


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValidationError("matmul operands must have ndim >= 2")
    out = ad @ bd

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)

    return _binary(a, b, out, vjp_a, vjp_b, "matmul")


def vexp(a):
    out = np.exp(_data(a))
    parents = ((a, lambda g: g * out),) if isinstance(a, Var) else ()
    return Var(out, parents, "exp")


def gelu(a):
    """Exact GELU x * Phi(x) with the standard-normal CDF."""
    x = _data(a)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return g * (cdf + x * pdf)

    parents = ((a, vjp),) if isinstance(a, Var) else ()
    return Var(out, parents, "gelu")


def layer_norm(x, gain, shift, eps: float = LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = _data(x)
    if xd.shape[-1] < 2:
        raise ValidationError("layer_norm needs a last dimension of size >= 2")
    gd, sd = _data(gain), _data(shift)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + sd

    def vjp_x(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gd.shape)

    def vjp_shift(g):
        return _unbroadcast(g, sd.shape)

    parents = []
    if isinstance(x, Var):
        parents.append((x, vjp_x))
    if isinstance(gain, Var):
        parents.append((gain, vjp_gain))
    if isinstance(shift, Var):
        parents.append((shift, vjp_shift))
    return Var(out, parents, "layer_norm")


def vsum(a, axis=None, keepdims=False):
    ad = _data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, ad.shape).copy()

    parents = ((a, vjp),) if isinstance(a, Var) else ()
    return Var(out, parents, "sum")


def vmean(a, axis=None, keepdims=False):
    ad = _data(a)
    n = ad.size if axis is None else ad.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    ad = _data(a)
    parents = ((a, lambda g: g.reshape(ad.shape)),) if isinstance(a, Var) else ()
    return Var(ad.reshape(shape), parents, "reshape")


def transpose(a, axes):
    ad = _data(a)
    axes = tuple(ax % ad.ndim for ax in axes)
    inverse = np.argsort(axes)
    parents = ((a, lambda g: g.transpose(inverse)),) if isinstance(a, Var) else ()
    return Var(ad.transpose(axes), parents, "transpose")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity when not training or rate is zero."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode needs an RNG stream")
    keep = 1.0 - rate
    mask = (rng.random(_data(x).shape) < keep) / keep
    return mul(x, mask)


def backward(root: Var) -> None:
    """Reverse-mode sweep seeding d(root)/d(root) = 1."""
    if root.data.size != 1:
        raise ValidationError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _find_first_non_finite(root: Var) -> str:
    nodes: list[Var] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p, _ in node.parents)
    nodes.sort(key=lambda n: n.index)
    for node in nodes:
        if not np.all(np.isfinite(node.data)):
            return node.op
    return root.op


class ParamStore:
    """Ordered named float64 parameter arrays with a lossless flat view."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._params:
            raise ValidationError(f"unknown parameter name {name!r}")
        if self._params[name].shape != np.shape(value):
            raise ValidationError(f"shape mismatch for {name!r}")
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._params.items()}

    def size(self) -> int:
        return sum(v.size for v in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._params.items():
            out.add(k, v.copy())
        return out

    def flatten(self) -> np.ndarray:
        if not self._params:
            return np.empty(0)
        return np.concatenate([v.ravel() for v in self._params.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamStore":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size(),):
            raise ValidationError(
                f"flat vector length {vec.size} != parameter count {self.size()}")
        out = ParamStore()
        offset = 0
        for k, v in self._params.items():
            out.add(k, vec[offset:offset + v.size].reshape(v.shape).copy())
            offset += v.size
        return out


def loss_and_grad(params: ParamStore, loss_fn) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate loss_fn on parameter leaves and return exact gradients.

    loss_fn receives a dict name -> Var and must return a scalar Var. A
    non-finite loss raises NonFiniteLossError naming the first bad op.
    """
    leaves = {name: Var(value, op=f"param:{name}") for name, value in params.items()}
    loss = loss_fn(leaves)
    if not isinstance(loss, Var):
        raise ValidationError("loss_fn must return a Var")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLossError(_find_first_non_finite(loss))
    backward(loss)
    grads = {
        name: leaves[name].grad if leaves[name].grad is not None
        else np.zeros_like(params[name])
        for name in params.names()
    }
    return float(loss.data), grads


def init_affine(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    """Glorot-normal weight, zero bias."""
    sd = np.sqrt(2.0 / (fan_in + fan_out))
    store.add(f"{name}.w", rng.normal(0.0, sd, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def affine(params: dict[str, Var], name: str, x):
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def mlp_forward(params: dict[str, Var], name: str, x, layer_count: int,
                dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                train: bool = False):
    """Alternating affine layers and GELU; no activation after the last affine."""
    out = x
    for i in range(layer_count):
        out = affine(params, f"{name}.l{i}", out)
        if i < layer_count - 1:
            out = gelu(out)
            out = dropout(out, dropout_rate, rng, train)
    return out


def init_mlp(store: ParamStore, name: str, dims: list[int],
             rng: np.random.Generator) -> None:
    for i in range(len(dims) - 1):
        init_affine(store, f"{name}.l{i}", dims[i], dims[i + 1], rng)


def fourier_time_embed(t, d: int, f_max: float) -> np.ndarray:
    """Sinusoidal features of the flow time with log-spaced frequencies.

    Frequencies run from 1 down to 1/f_max over d/2 channels; scalar t gives
    a (d,) vector, a batch (B,) gives (B, d).
    """
    if d % 2 != 0 or d < 4:
        raise ValidationError(f"embedding dimension must be even and >= 4, got {d}")
    half = d // 2
    k = np.arange(half)
    omega = f_max ** (-k / (half - 1))
    t = np.asarray(t, dtype=np.float64)
    phase = t[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def lr_schedule(epoch: int, base_lr: float = 1e-5, warmup: int = 5) -> float:
    """Linear ramp to base_lr over the warmup epochs, then constant."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if warmup > 0 and epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    return base_lr


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float = 0.5) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global l2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise ValidationError("clip_global_norm requires finite gradients")
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamWState:
    """Per-parameter moment accumulators and step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_init(params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adamw_step(state: AdamWState, params: ParamStore,
               grads: dict[str, np.ndarray], lr: float) -> None:
    """Bias-corrected AdamW update with decoupled weight decay (in place)."""
    if set(grads) != set(params.names()):
        raise ValidationError("gradient names must mirror the parameter store")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params[name] = p - lr * (update + state.weight_decay * p)
