"""Damped least squares (Levenberg-Marquardt) with a numeric Jacobian.

Only accepted steps move the iterate, so the cost sequence in the history is
non-increasing.  Convergence: relative cost improvement over the last
``patience`` iterations below ``ftol``.  A run that improves by less than
``stall_frac`` over ``stall_window`` iterations without meeting ``ftol`` is
reported as stalled.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    merit: float
    damping: float
    max_violation: float = 0.0


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    stalled: bool
    message: str
    history: list = field(default_factory=list)


def numeric_jacobian(fun, x, steps, r0=None, method="central", threads=1):
    """Finite-difference Jacobian of the residual function ``fun`` at ``x``.

    Columns are computed independently and placed by index, so the result
    does not depend on ``threads``.
    """
    x = np.asarray(x, float)
    steps = np.broadcast_to(np.asarray(steps, float), x.shape)
    if method == "forward" and r0 is None:
        r0 = np.asarray(fun(x), float)

    def column(i):
        e = np.zeros_like(x)
        e[i] = steps[i]
        if method == "central":
            return (np.asarray(fun(x + e), float) - np.asarray(fun(x - e), float)) / (2.0 * steps[i])
        return (np.asarray(fun(x + e), float) - r0) / steps[i]

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(column, range(x.size)))
    else:
        cols = [column(i) for i in range(x.size)]
    return np.stack(cols, axis=1)


def _cost(r):
    r = np.asarray(r, float)
    return float(r @ r) if np.all(np.isfinite(r)) else math.inf


def levenberg_marquardt(
    fun,
    x0,
    steps,
    max_iter=500,
    ftol=1e-6,
    patience=5,
    stall_window=None,
    stall_frac=0.01,
    damping=1e-3,
    lower=None,
    upper=None,
    violation=None,
    callback=None,
    threads=1,
):
    """Minimise ``sum(fun(x)**2)``.

    Args:
        fun: residual function, returns a fixed-length vector.
        steps: per-parameter finite-difference steps (also the variable scale).
        lower, upper: optional box; trial points are clipped into it.
        violation: optional ``x -> float`` reported in the history.
        callback: called with each :class:`IterationRecord`.
    """
    x = np.asarray(x0, float).copy()
    steps = np.broadcast_to(np.asarray(steps, float), x.shape).copy()
    lo = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full_like(x, np.inf) if upper is None else np.asarray(upper, float)
    x = np.clip(x, lo, hi)
    r = np.asarray(fun(x), float)
    cost = _cost(r)
    lam = damping
    history = [IterationRecord(0, cost, lam, violation(x) if violation else 0.0)]
    if callback:
        callback(history[-1])
    converged = stalled = False
    message = "iteration limit reached"
    if x.size == 0:
        return LMResult(x, cost, 0, True, False, "no free parameters", history)

    for it in range(1, max_iter + 1):
        # work in scaled variables u = x / steps
        jac = numeric_jacobian(fun, x, steps, r, threads=threads) * steps
        bad = ~np.isfinite(jac)
        jac[bad] = 0.0
        g = jac.T @ r
        a = jac.T @ jac
        d = np.diag(a).copy()
        d[d <= 0] = max(float(np.max(d)), 1.0) * 1e-12 if np.any(d > 0) else 1.0
        accepted = False
        for _ in range(12):
            try:
                du = np.linalg.solve(a + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_try = np.clip(x + du * steps, lo, hi)
            r_try = np.asarray(fun(x_try), float)
            c_try = _cost(r_try)
            if c_try < cost:
                x, r, cost = x_try, r_try, c_try
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
        history.append(IterationRecord(it, cost, lam, violation(x) if violation else 0.0))
        if callback:
            callback(history[-1])
        if not accepted:
            converged = True
            message = "no descent step found (local minimum)"
            break
        if cost == 0.0:
            converged = True
            message = "zero residual"
            break
        if it >= patience:
            past = history[it - patience].merit
            if past - cost <= ftol * max(past, 1e-300):
                converged = True
                message = f"relative improvement below {ftol:g} over {patience} iterations"
                break
        if stall_window and it >= stall_window:
            past = history[it - stall_window].merit
            if past - cost < stall_frac * past:
                stalled = True
                message = f"merit reduced by less than {stall_frac:.0%} over {stall_window} iterations"
                break
    return LMResult(x, cost, len(history) - 1, converged, stalled, message, history)


def write_history_csv(history, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iteration", "merit", "damping", "max_constraint_violation"])
    for rec in history:
        w.writerow([rec.iteration, f"{rec.merit:.12e}", f"{rec.damping:.6e}", f"{rec.max_violation:.9e}"])
