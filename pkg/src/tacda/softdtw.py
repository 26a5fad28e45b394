"""Soft dynamic time warping: value, gradient, and enumeration oracles.

Series are laid out as ``(n_sensors, n_timesteps)``; a 1-D input is read as a
single sensor.  All dynamic programming runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numba import njit

# +inf stand-in for the DP boundary; anything above ABSENT is treated as missing
BIG = 1e30
ABSENT = 1e29
MAX_BRUTE_FORCE_LENGTH = 8


@dataclass
class SoftDtwResult:
    value: float
    r_table: np.ndarray
    grad_x: Optional[np.ndarray] = None
    alignment: Optional[np.ndarray] = None


# ----------------------------------------------------------------------------
# numba kernels
# ----------------------------------------------------------------------------

@njit(cache=True)
def _softmin3(a, b, c, gamma):
    m = min(a, min(b, c))
    if m > ABSENT:
        return BIG
    s = 0.0
    if a <= ABSENT:
        s += math.exp(-(a - m) / gamma)
    if b <= ABSENT:
        s += math.exp(-(b - m) / gamma)
    if c <= ABSENT:
        s += math.exp(-(c - m) / gamma)
    return m - gamma * math.log(s)


@njit(cache=True)
def _cost(x, y):
    n_sensors, n = x.shape
    m = y.shape[1]
    delta = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(n_sensors):
                d = x[k, i] - y[k, j]
                acc += d * d
            delta[i, j] = acc
    return delta


@njit(cache=True)
def _forward(delta, gamma):
    n, m = delta.shape
    r = np.full((n + 2, m + 2), BIG)
    r[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            r[i, j] = delta[i - 1, j - 1] + _softmin3(
                r[i - 1, j], r[i, j - 1], r[i - 1, j - 1], gamma
            )
    return r


@njit(cache=True)
def _backward(delta, r, gamma):
    """Soft alignment matrix E = d value / d delta."""
    n, m = delta.shape
    d = np.zeros((n + 2, m + 2))
    d[1:n + 1, 1:m + 1] = delta
    rb = r.copy()
    for i in range(1, n + 1):
        rb[i, m + 1] = -BIG
    for j in range(1, m + 1):
        rb[n + 1, j] = -BIG
    rb[n + 1, m + 1] = r[n, m]
    e = np.zeros((n + 2, m + 2))
    e[n + 1, m + 1] = 1.0
    for j in range(m, 0, -1):
        for i in range(n, 0, -1):
            a = math.exp((rb[i + 1, j] - rb[i, j] - d[i + 1, j]) / gamma)
            b = math.exp((rb[i, j + 1] - rb[i, j] - d[i, j + 1]) / gamma)
            c = math.exp((rb[i + 1, j + 1] - rb[i, j] - d[i + 1, j + 1]) / gamma)
            e[i, j] = a * e[i + 1, j] + b * e[i, j + 1] + c * e[i + 1, j + 1]
    return e[1:n + 1, 1:m + 1]


@njit(cache=True)
def _grad_from_alignment(x, y, e):
    n_sensors, n = x.shape
    m = y.shape[1]
    g = np.zeros((n_sensors, n))
    for i in range(n):
        for j in range(m):
            w = e[i, j]
            if w == 0.0:
                continue
            for k in range(n_sensors):
                g[k, i] += 2.0 * w * (x[k, i] - y[k, j])
    return g


@njit(cache=True)
def _value(x, y, gamma):
    delta = _cost(x, y)
    r = _forward(delta, gamma)
    return r[delta.shape[0], delta.shape[1]]


@njit(cache=True)
def _batch_values(xs, ys, gamma):
    out = np.empty(xs.shape[0])
    for b in range(xs.shape[0]):
        out[b] = _value(xs[b], ys[b], gamma)
    return out


@njit(cache=True)
def _batch_values_grads(xs, ys, gamma):
    out = np.empty(xs.shape[0])
    grads = np.zeros(xs.shape)
    for b in range(xs.shape[0]):
        delta = _cost(xs[b], ys[b])
        r = _forward(delta, gamma)
        n, m = delta.shape
        out[b] = r[n, m]
        e = _backward(delta, r, gamma)
        grads[b] = _grad_from_alignment(xs[b], ys[b], e)
    return out, grads


@njit(cache=True)
def _pairwise(xs, cs, gamma):
    out = np.empty((xs.shape[0], cs.shape[0]))
    for i in range(xs.shape[0]):
        for k in range(cs.shape[0]):
            out[i, k] = _value(xs[i], cs[k], gamma)
    return out


# ----------------------------------------------------------------------------
# public API
# ----------------------------------------------------------------------------

def _as_series(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-D or (n_sensors, n_timesteps), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def _check_pair(x, y, gamma):
    x = _as_series(x, "x")
    y = _as_series(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return x, y, float(gamma)


def cost_matrix(x, y) -> np.ndarray:
    """Squared Euclidean distance between every pair of time steps.

    ``delta[i, j] = sum_m (x[m, i] - y[m, j]) ** 2``.
    """
    x = _as_series(x, "x")
    y = _as_series(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return _cost(x, y)


def soft_dtw(x, y, gamma: float = 0.1) -> SoftDtwResult:
    """Soft-DTW value via the smoothed-min recurrence.

    The returned ``r_table`` is the ``(L, L)`` table of accumulated costs with
    ``r_table[-1, -1] == value``.
    """
    x, y, gamma = _check_pair(x, y, gamma)
    delta = _cost(x, y)
    r = _forward(delta, gamma)
    n, m = delta.shape
    return SoftDtwResult(value=float(r[n, m]), r_table=r[1:n + 1, 1:m + 1].copy())


def soft_dtw_grad(x, y, gamma: float = 0.1) -> SoftDtwResult:
    """Soft-DTW value together with its gradient with respect to ``x``.

    ``alignment`` holds the expected alignment matrix E; the gradient is the
    chain rule of E through the squared-Euclidean cost.
    """
    x, y, gamma = _check_pair(x, y, gamma)
    delta = _cost(x, y)
    r = _forward(delta, gamma)
    e = _backward(delta, r, gamma)
    n, m = delta.shape
    return SoftDtwResult(
        value=float(r[n, m]),
        r_table=r[1:n + 1, 1:m + 1].copy(),
        grad_x=_grad_from_alignment(x, y, e),
        alignment=e,
    )


def _as_batch(xs, name):
    arr = np.ascontiguousarray(np.asarray(xs, dtype=np.float64))
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n, n_sensors, n_timesteps), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def soft_dtw_batch(xs, ys, gamma: float = 0.1, return_grad: bool = False):
    """Row-wise soft-DTW between two stacks of equally shaped series.

    With ``return_grad`` also returns the gradient stack with respect to ``xs``.
    """
    xs = _as_batch(xs, "xs")
    ys = _as_batch(ys, "ys")
    if xs.shape != ys.shape:
        raise ValueError(f"shape mismatch: {xs.shape} vs {ys.shape}")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if return_grad:
        return _batch_values_grads(xs, ys, float(gamma))
    return _batch_values(xs, ys, float(gamma))


def soft_dtw_pairwise(xs, centers, gamma: float = 0.1) -> np.ndarray:
    """Soft-DTW from every series in ``xs`` to every series in ``centers``.

    Each entry only reads its own two inputs, so callers may split the work
    across processes freely.
    """
    xs = _as_batch(xs, "xs")
    centers = _as_batch(centers, "centers")
    if xs.shape[1:] != centers.shape[1:]:
        raise ValueError(f"shape mismatch: {xs.shape[1:]} vs {centers.shape[1:]}")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return _pairwise(xs, centers, float(gamma))


# ----------------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------------

def warping_paths(n: int, m: Optional[int] = None) -> Iterator[list]:
    """Yield every monotone path from (0, 0) to (n-1, m-1)."""
    m = n if m is None else m
    path = [(0, 0)]

    def walk(i, j):
        if i == n - 1 and j == m - 1:
            yield list(path)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                path.append((a, b))
                yield from walk(a, b)
                path.pop()

    yield from walk(0, 0)


def brute_force_soft_dtw(x, y, gamma: float = 0.1) -> float:
    """Literal log-sum-exp over all warping paths.  Refuses L > 8."""
    x, y, gamma = _check_pair(x, y, gamma)
    n = x.shape[1]
    if n > MAX_BRUTE_FORCE_LENGTH:
        raise ValueError(
            f"brute force limited to L <= {MAX_BRUTE_FORCE_LENGTH} (got {n}); path count grows too fast"
        )
    delta = ((x[:, :, None] - y[:, None, :]) ** 2).sum(axis=0)
    costs = np.array([sum(delta[i, j] for i, j in p) for p in warping_paths(n)])
    z = -costs / gamma
    zmax = z.max()
    return float(-gamma * (zmax + np.log(np.exp(z - zmax).sum())))


def hard_dtw(x, y) -> float:
    """Classic min-over-paths DTW with squared Euclidean cost."""
    x = _as_series(x, "x")
    y = _as_series(y, "y")
    delta = ((x[:, :, None] - y[:, None, :]) ** 2).sum(axis=0)
    n, m = delta.shape
    r = np.full((n + 1, m + 1), np.inf)
    r[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            r[i, j] = delta[i - 1, j - 1] + min(r[i - 1, j], r[i, j - 1], r[i - 1, j - 1])
    return float(r[n, m])
