"""Bracketed derivative-free 1-D searches used by the M-step."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def maximize_scalar(f: Callable[[float], float], lo: float, hi: float,
                    tol: float = 1e-6, max_eval: int = 200, n_grid: int = 9):
    """Maximize ``f`` on ``[lo, hi]``.

    A coarse grid picks the bracket around the best point, then golden-section
    search shrinks it until its width drops below ``tol * (1 + |x|)`` or the
    evaluation budget runs out. Returns ``(x, f(x), n_evals)`` for the best
    point seen.
    """
    if not hi >= lo:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if hi == lo:
        return lo, f(lo), 1
    n_grid = max(3, min(n_grid, max_eval))
    xs = np.linspace(lo, hi, n_grid)
    fs = [f(x) for x in xs]
    best = int(np.argmax(fs))
    x_best, f_best = float(xs[best]), fs[best]
    evals = n_grid
    a = float(xs[max(best - 1, 0)])
    b = float(xs[min(best + 1, n_grid - 1)])
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    evals += 2
    while evals < max_eval and (b - a) > tol * (1.0 + abs(x_best)):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
        evals += 1
    for x, fx in ((c, fc), (d, fd)):
        if fx > f_best:
            x_best, f_best = x, fx
    return x_best, f_best, evals


def bisect_root(g: Callable[[float], float], lo: float, hi: float,
                xtol: float = 1e-12, max_iter: int = 200):
    """Root of a decreasing-through-zero ``g`` on ``[lo, hi]``.

    Returns ``(x, status)`` with status ``"root"``, ``"lower"`` (``g(lo) <= 0``)
    or ``"upper"`` (``g(hi) >= 0``).
    """
    g_lo = g(lo)
    if g_lo <= 0:
        return lo, "lower"
    g_hi = g(hi)
    if g_hi >= 0:
        return hi, "upper"
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= xtol * (1.0 + abs(mid)):
            break
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), "root"
