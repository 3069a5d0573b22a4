"""BFGS maximizer with a backtracking Armijo line search."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class OptimizeResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    converged: bool
    n_iter: int
    n_eval: int
    message: str
    trace: list[float] = field(default_factory=list)


def bfgs_maximize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    gtol: float = 1e-6,
    ftol: float = 1e-10,
    max_iter: int = 500,
    max_step: float = 10.0,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtrack: int = 60,
) -> OptimizeResult:
    """Maximize ``fun`` (returning value and gradient) from ``x0``.

    Stops when the gradient infinity-norm is at most ``gtol`` or the relative
    objective change of an accepted step is at most ``ftol``. Steps that fail
    the curvature condition skip the inverse-Hessian update. Non-finite trial
    points are treated as failing the Armijo test.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    n_eval = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective is not finite at the starting point")
    n = x.size
    H = np.eye(n)
    trace = [f]
    first = True
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            return OptimizeResult(x, f, g, True, it - 1, n_eval, "gradient below tolerance", trace)
        d = H @ g
        slope = g @ d
        if slope <= 0:  # lost ascent direction; restart from steepest ascent
            H = np.eye(n)
            d = g.copy()
            slope = g @ d
        norm = np.linalg.norm(d)
        if norm > max_step:
            d *= max_step / norm
            slope *= max_step / norm
        t = 1.0
        for _ in range(max_backtrack):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            n_eval += 1
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new >= f + c1 * t * slope:
                break
            t *= shrink
        else:
            return OptimizeResult(x, f, g, False, it, n_eval, "line search failed", trace)
        s = x_new - x
        yv = g - g_new  # gradient of -f
        sy = s @ yv
        f_old = f
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                H = np.eye(n) * (sy / (yv @ yv))
                first = False
            rho = 1.0 / sy
            Hy = H @ yv
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (yv @ Hy) + rho) * np.outer(s, s)
        if abs(f - f_old) <= ftol * max(1.0, abs(f)):
            return OptimizeResult(x, f, g, True, it, n_eval, "relative change below tolerance", trace)
    return OptimizeResult(x, f, g, False, max_iter, n_eval, "iteration limit reached", trace)
