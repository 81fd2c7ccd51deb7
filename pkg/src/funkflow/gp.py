"""Gaussian-process reference measure for the flow source.

RBF kernel with a 4*l^2 bandwidth convention, exact Cholesky-based
regression with jitter escalation, prior/posterior sampling, and the
softplus map that keeps sampled concentrations positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ValidationError

DEFAULT_JITTER = 1e-7


@dataclass(frozen=True)
class RBFKernel:
    """Squared-exponential kernel k(a, b) = variance * exp(-(a-b)^2 / (4 l^2))."""

    variance: float = 1e-4
    length_scale: float = 1.7e-3

    def validate(self) -> None:
        if not self.variance > 0.0:
            raise ValidationError(f"kernel variance must be > 0, got {self.variance}")
        if not self.length_scale > 0.0:
            raise ValidationError(f"kernel length scale must be > 0, got {self.length_scale}")


def kernel_matrix(times_a: np.ndarray, times_b: np.ndarray, kernel: RBFKernel) -> np.ndarray:
    kernel.validate()
    a = np.asarray(times_a, dtype=np.float64)
    b = np.asarray(times_b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("kernel inputs must be finite")
    diff = a[:, None] - b[None, :]
    return kernel.variance * np.exp(-(diff**2) / (4.0 * kernel.length_scale**2))


def _cholesky_with_escalation(matrix: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    """Cholesky of matrix + eps*I, escalating eps through (1x, 10x, 100x)."""
    for factor in (1.0, 10.0, 100.0):
        eps = jitter * factor
        try:
            lower = np.linalg.cholesky(matrix + eps * np.eye(matrix.shape[0]))
            return lower, eps
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"Cholesky failed after jitter escalation up to {100 * jitter:g}")


def _check_times(times: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise ValidationError(f"{what} must be a nonempty 1-d array")
    if np.any(np.diff(t) <= 0.0):
        raise ValidationError(f"{what} must be strictly increasing")
    return t


def gp_prior_sample(times: np.ndarray, kernel: RBFKernel, jitter: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw from N(0, K + eps*I) at the given times (pre-softplus scale)."""
    t = _check_times(times, "times")
    lower, _ = _cholesky_with_escalation(kernel_matrix(t, t, kernel), jitter)
    return lower @ rng.standard_normal(t.size)


@dataclass(frozen=True)
class GPPosterior:
    """Precomputed exact GP regression state.

    chol is the lower Cholesky factor of K(T,T) + eps*I and alpha the solve
    of the training values, so the posterior mean at q is K(q,T) @ alpha.
    """

    train_times: np.ndarray
    train_values: np.ndarray
    kernel: RBFKernel
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray

    def mean(self, query_times: np.ndarray) -> np.ndarray:
        q = np.asarray(query_times, dtype=np.float64)
        return kernel_matrix(q, self.train_times, self.kernel) @ self.alpha

    def cov(self, query_times: np.ndarray) -> np.ndarray:
        q = np.asarray(query_times, dtype=np.float64)
        k_tq = kernel_matrix(self.train_times, q, self.kernel)
        w = solve_triangular(self.chol, k_tq, lower=True)
        return kernel_matrix(q, q, self.kernel) - w.T @ w

    def variance(self, query_times: np.ndarray) -> np.ndarray:
        return np.diag(self.cov(query_times)).copy()


def gp_posterior(train_times: np.ndarray, train_values: np.ndarray,
                 kernel: RBFKernel, jitter: float = DEFAULT_JITTER) -> GPPosterior:
    """Exact GP regression on (times, values) with jittered Cholesky."""
    t = _check_times(train_times, "train_times")
    y = np.asarray(train_values, dtype=np.float64)
    if y.shape != t.shape:
        raise ValidationError("train_values must match train_times in length")
    lower, eps = _cholesky_with_escalation(kernel_matrix(t, t, kernel), jitter)
    alpha = solve_triangular(lower, y, lower=True)
    alpha = solve_triangular(lower, alpha, lower=True, trans="T")
    return GPPosterior(train_times=t, train_values=y, kernel=kernel,
                       jitter=eps, chol=lower, alpha=alpha)


def gp_posterior_sample(post: GPPosterior, query_times: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mu*, Sigma* + eps*I) at the query times."""
    q = _check_times(query_times, "query_times")
    mu = post.mean(q)
    cov = post.cov(q)
    lower, _ = _cholesky_with_escalation(cov, post.jitter)
    return mu + lower @ rng.standard_normal(q.size)


def softplus_transform(values: np.ndarray) -> np.ndarray:
    """Elementwise log(1 + e^x), computed as x + log(1 + e^{-x}) for x > 20."""
    x = np.asarray(values, dtype=np.float64)
    big = x > 20.0
    return np.where(big,
                    x + np.log1p(np.exp(-np.maximum(x, 20.0))),
                    np.log1p(np.exp(np.minimum(x, 20.0))))


def reference_sample(prefix: tuple[np.ndarray, np.ndarray] | None,
                     future_times: np.ndarray, kernel: RBFKernel, jitter: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flow-source draw on the future grid.

    With no prefix the source is softplus of a GP prior draw; with a prefix
    it is softplus of a GP posterior draw conditioned on the raw observed
    values. Returns (past values unchanged, positive future values).
    """
    q = _check_times(future_times, "future_times")
    if prefix is None or len(prefix[0]) == 0:
        raw = gp_prior_sample(q, kernel, jitter, rng)
        return np.empty(0), softplus_transform(raw)
    p_times = np.asarray(prefix[0], dtype=np.float64)
    p_values = np.asarray(prefix[1], dtype=np.float64)
    if p_times.max() >= q.min():
        raise ValidationError("prefix times must precede all future times")
    post = gp_posterior(p_times, p_values, kernel, jitter)
    raw = gp_posterior_sample(post, q, rng)
    return p_values.copy(), softplus_transform(raw)
