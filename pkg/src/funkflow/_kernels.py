"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection is controlled by the FUNKFLOW_NUMBA environment variable:
"1" forces numba (ImportError if unavailable), "0" forces numpy, anything
else (default "auto") uses numba when importable.

Random numbers are always drawn outside the kernels, so RNG streams never
depend on the backend. Both backends perform the same arithmetic; results
may differ in the last ulp because of summation-order differences.
"""

from __future__ import annotations

import os

import numpy as np

_MODE = os.environ.get("FUNKFLOW_NUMBA", "auto").strip().lower()


def _ou_recurse_np(theta0: np.ndarray, mu: np.ndarray, decay: np.ndarray,
                   scale: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Exact OU transitions for K independent paths on a shared grid.

    theta0: (K,) initial values; mu: (K,) long-term means;
    decay: (n-1, K) per-step e^{-lambda*dt}; scale: (n-1, K) transition sd;
    noise: (n-1, K) standard normals. Returns (n, K).
    """
    n = decay.shape[0] + 1
    out = np.empty((n, theta0.shape[0]), dtype=np.float64)
    out[0] = theta0
    for i in range(1, n):
        out[i] = mu + (out[i - 1] - mu) * decay[i - 1] + scale[i - 1] * noise[i - 1]
    return out


def _rk4_pk_np(ka: np.ndarray, ke: np.ndarray, kp: np.ndarray, km: np.ndarray,
               x0: np.ndarray, dt: float) -> tuple[np.ndarray, int]:
    """RK4 on the gut/central/peripheral mass-balance system.

    ka, ke: (n,) rate paths; kp, km: (P, n) exchange-rate paths;
    x0: (2+P,) initial amounts; dt: uniform grid step. Rates are held at
    their left-endpoint value within each step. Returns (states (n, 2+P),
    fail_step) with fail_step -1 on success, else the first step whose
    update produced a non-finite state.
    """
    n = ka.shape[0]
    states = np.zeros((n, x0.shape[0]), dtype=np.float64)
    states[0] = x0
    x = x0.copy()
    for i in range(n - 1):
        kp_i = kp[:, i]
        km_i = km[:, i]

        def f(y: np.ndarray) -> np.ndarray:
            d = np.empty_like(y)
            d[0] = -ka[i] * y[0]
            d[2:] = kp_i * y[1] - km_i * y[2:]
            d[1] = ka[i] * y[0] - (ke[i] + kp_i.sum()) * y[1] + (km_i * y[2:]).sum()
            return d

        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            return states, i + 1
        states[i + 1] = x
    return states, -1


# Single-source jittable bodies; compiled with numba when available.

def _ou_recurse_loop(theta0, mu, decay, scale, noise):
    n = decay.shape[0] + 1
    k = theta0.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    for j in range(k):
        out[0, j] = theta0[j]
    for i in range(1, n):
        for j in range(k):
            out[i, j] = mu[j] + (out[i - 1, j] - mu[j]) * decay[i - 1, j] \
                + scale[i - 1, j] * noise[i - 1, j]
    return out


def _rk4_pk_loop(ka, ke, kp, km, x0, dt):
    n = ka.shape[0]
    nper = kp.shape[0]
    dim = 2 + nper
    states = np.zeros((n, dim), dtype=np.float64)
    x = np.empty(dim, dtype=np.float64)
    for d in range(dim):
        states[0, d] = x0[d]
        x[d] = x0[d]
    k1 = np.empty(dim, dtype=np.float64)
    k2 = np.empty(dim, dtype=np.float64)
    k3 = np.empty(dim, dtype=np.float64)
    k4 = np.empty(dim, dtype=np.float64)
    y = np.empty(dim, dtype=np.float64)

    for i in range(n - 1):
        _pk_rates(x, ka[i], ke[i], kp, km, i, k1)
        for d in range(dim):
            y[d] = x[d] + 0.5 * dt * k1[d]
        _pk_rates(y, ka[i], ke[i], kp, km, i, k2)
        for d in range(dim):
            y[d] = x[d] + 0.5 * dt * k2[d]
        _pk_rates(y, ka[i], ke[i], kp, km, i, k3)
        for d in range(dim):
            y[d] = x[d] + dt * k3[d]
        _pk_rates(y, ka[i], ke[i], kp, km, i, k4)
        ok = True
        for d in range(dim):
            x[d] = x[d] + (dt / 6.0) * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d])
            if not np.isfinite(x[d]):
                ok = False
        if not ok:
            return states, i + 1
        for d in range(dim):
            states[i + 1, d] = x[d]
    return states, -1


def _pk_rates(y, ka_i, ke_i, kp, km, i, out):
    nper = kp.shape[0]
    out[0] = -ka_i * y[0]
    leak = ke_i
    back = 0.0
    for j in range(nper):
        leak += kp[j, i]
        back += km[j, i] * y[2 + j]
        out[2 + j] = kp[j, i] * y[1] - km[j, i] * y[2 + j]
    out[1] = ka_i * y[0] - leak * y[1] + back


if _MODE == "0":
    BACKEND = "numpy"
    ou_recurse, rk4_pk = _ou_recurse_np, _rk4_pk_np
else:
    try:
        import numba as _nb

        _pk_rates = _nb.njit(cache=True)(_pk_rates)
        ou_recurse = _nb.njit(cache=True)(_ou_recurse_loop)
        rk4_pk = _nb.njit(cache=True)(_rk4_pk_loop)
        BACKEND = "numba"
    except ImportError:
        if _MODE == "1":
            raise
        BACKEND = "numpy"
        ou_recurse, rk4_pk = _ou_recurse_np, _rk4_pk_np


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return BACKEND
