"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

RELATIVE_FLOOR = 1e-8


def relative_error(fd: np.ndarray, g: np.ndarray) -> np.ndarray:
    fd, g = np.asarray(fd, dtype=np.float64), np.asarray(g, dtype=np.float64)
    return np.abs(fd - g) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), RELATIVE_FLOOR)


def finite_diff_check(f: Callable[[np.ndarray], float], params: np.ndarray, analytic_grad: np.ndarray,
                      eps: float = 1e-5, coords=None) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    ``coords`` is an iterable of flat indices to probe; all coordinates when
    omitted.  ``params`` is perturbed in place and restored afterwards.
    """
    params = np.asarray(params)
    if params.dtype != np.float64:
        raise TypeError("finite_diff_check needs float64 parameters")
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != parameter shape {params.shape}")
    flat = params.reshape(-1)
    gflat = analytic_grad.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    fd = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(params)
        flat[i] = orig - eps
        fm = f(params)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective is non-finite at coordinate {int(i)}")
        fd[n] = (fp - fm) / (2.0 * eps)
    return float(relative_error(fd, gflat[idx]).max())


def sample_coords(grad: np.ndarray, n: int, rng: np.random.Generator, min_abs: float = 0.0) -> np.ndarray:
    """Pick up to ``n`` flat indices, restricted to ``|grad| > min_abs`` when possible.

    Coordinates whose true derivative is far below the central-difference
    round-off floor (about ``|f| * 1e-16 / eps``) measure noise, not the
    gradient, so callers may exclude them.
    """
    flat = np.abs(np.asarray(grad).reshape(-1))
    pool = np.flatnonzero(flat > min_abs)
    if pool.size == 0:
        pool = np.arange(flat.size)
    if pool.size <= n:
        return pool
    return np.sort(rng.choice(pool, size=n, replace=False))
