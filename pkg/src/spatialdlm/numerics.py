"""Shared numerical helpers: guarded Cholesky solves, log-space weight
bookkeeping, and weighted sample statistics.

Everything here operates on plain numpy arrays and is safe to call from
worker processes.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

JITTER_START = 1e-12
JITTER_MAX = 1e-6

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A positive-definite factorization failed even at maximum jitter."""


class DegenerateWeightsError(RuntimeError):
    """Every particle weight is zero (log-weight -inf)."""


def chol_jitter(a: np.ndarray, start: float = JITTER_START, stop: float = JITTER_MAX):
    """Cholesky factor of `a` (stacked ok), adding escalating diagonal jitter.

    Returns (L, jitter_used). jitter_used is 0.0 when the clean factorization
    succeeds. Raises NumericalError past `stop`.
    """
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[-1])
    jitter = start
    while jitter <= stop:
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 100.0
    raise NumericalError(
        f"matrix not positive definite at jitter {stop:g} (shape {a.shape})"
    )


def solve_psd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for symmetric positive-definite `a` with jitter guard."""
    L, jitter = chol_jitter(a)
    if jitter:
        a = a + jitter * np.eye(a.shape[-1])
    return np.linalg.solve(a, b)


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(mean, cov) at x, via guarded Cholesky."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = x.shape[-1]
    if d == 0:
        return 0.0
    L, _ = chol_jitter(np.atleast_2d(cov))
    z = np.linalg.solve(L, x - mean)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L)))
    return float(-0.5 * (d * LOG_2PI + logdet + z @ z))


def symmetrize(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c + np.swapaxes(c, -1, -2))


def normalized_log_weights(log_w: np.ndarray) -> np.ndarray:
    """Shift log-weights so they sum (in probability space) to one."""
    log_w = np.asarray(log_w, dtype=float)
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise DegenerateWeightsError("all log-weights are -inf")
    return log_w - total


def ess_log_weights(log_w: np.ndarray) -> float:
    """Effective sample size 1/sum(w^2) of normalized weights, in log space."""
    lw = normalized_log_weights(log_w)
    return float(np.exp(-logsumexp(2.0 * lw)))


def weighted_mean_cov(x: np.ndarray, weights: np.ndarray):
    """Weighted mean and covariance of rows of x. Weights need not be normalized."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ x
    d = x - mean
    cov = (d * w[:, None]).T @ d
    return mean, symmetrize(cov)


def weighted_variance(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-column weighted variance. Weights need not be normalized."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ x
    return w @ (x - mean) ** 2


def weighted_quantile(values: np.ndarray, q, weights: np.ndarray | None = None):
    """Weighted empirical quantile with type-7-style interpolation.

    Plotting positions are (C_i - w_i) / (S - w_N) on the sorted sample,
    which reduces exactly to numpy's default (type-7) quantile for uniform
    weights.
    """
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    if weights is None:
        return np.quantile(v, q)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise ValueError("values and weights must have the same shape")
    keep = w > 0.0
    if not keep.any():
        raise ValueError("weights sum to zero")
    if not keep.all():
        # zero-weight points carry no mass and must not anchor interpolation
        v, w = v[keep], w[keep]
    order = np.argsort(v, kind="stable")
    v = v[order]
    w = w[order]
    cum = np.cumsum(w)
    denom = cum[-1] - w[-1]
    if denom <= 0.0:
        # single effective sample point
        return np.full_like(q, v[np.argmax(w)]) if q.ndim else float(v[np.argmax(w)])
    pos = (cum - w) / denom
    return np.interp(q, pos, v)


def ks_distance(x1: np.ndarray, x2: np.ndarray,
                w1: np.ndarray | None = None,
                w2: np.ndarray | None = None) -> float:
    """Two-sample Kolmogorov-Smirnov distance between weighted samples."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    w1 = np.full(x1.shape, 1.0 / x1.size) if w1 is None else np.asarray(w1) / np.sum(w1)
    w2 = np.full(x2.shape, 1.0 / x2.size) if w2 is None else np.asarray(w2) / np.sum(w2)
    grid = np.concatenate([x1, x2])
    grid.sort(kind="stable")
    o1 = np.argsort(x1, kind="stable")
    o2 = np.argsort(x2, kind="stable")
    c1 = np.concatenate([[0.0], np.cumsum(w1[o1])])
    c2 = np.concatenate([[0.0], np.cumsum(w2[o2])])
    f1 = c1[np.searchsorted(x1[o1], grid, side="right")]
    f2 = c2[np.searchsorted(x2[o2], grid, side="right")]
    return float(np.max(np.abs(f1 - f2)))
