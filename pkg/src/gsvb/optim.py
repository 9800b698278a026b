"""Limited-memory BFGS with a monotone backtracking line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GsvbError


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    line_search_failed: bool


def _safe_eval(fun_grad, x):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            f, g = fun_grad(x)
    except (FloatingPointError, OverflowError, GsvbError, np.linalg.LinAlgError):
        return np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=float)


def lbfgs(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    memory: int = 10,
    gtol: float = 1e-8,
    max_iter: int = 200,
    c1: float = 1e-4,
    max_backtracks: int = 40,
    noise: float = 1e-13,
) -> LbfgsResult:
    """Minimize a smooth function given ``fun_grad(x) -> (f, grad)``.

    Accepted steps satisfy the Armijo condition (up to the rounding allowance
    below), so the returned objective does not exceed ``f(x0)`` by more than
    ``noise * (1 + |f|)`` per iteration. Trial points where the objective is not
    finite (or raises an overflow) are treated as infeasible and trigger a
    backtrack. Iteration stops once ``||grad||_2 <= gtol``.

    Close to the optimum the achievable decrease falls below the rounding
    error of ``f``; a full step is then also accepted if it raises ``f`` by at
    most ``noise * (1 + |f|)`` while shrinking the gradient norm.
    """
    x = np.array(x0, dtype=float)
    f, g = _safe_eval(fun_grad, x)
    if g is None:
        raise FloatingPointError("objective is not finite at the starting point")
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)
    failed = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) <= gtol:
            return LbfgsResult(x, f, g, it - 1, True, False)
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv, rho in reversed(list(zip(s_hist, y_hist, rho_hist))):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * yv
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, yv, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (yv @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if slope >= 0:
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g / max(1.0, np.linalg.norm(g))
            slope = g @ d
        step = 1.0
        accepted = False
        gnorm = np.linalg.norm(g)
        for i in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = _safe_eval(fun_grad, x_new)
            if g_new is not None:
                if f_new <= f + c1 * step * slope:
                    accepted = True
                    break
                if i == 0 and f_new <= f + noise * (1.0 + abs(f)) \
                        and np.linalg.norm(g_new) < gnorm:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            failed = True
            break
        s = x_new - x
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
        x, f, g = x_new, f_new, g_new
    converged = bool(np.linalg.norm(g) <= gtol)
    return LbfgsResult(x, f, g, it, converged, failed)
