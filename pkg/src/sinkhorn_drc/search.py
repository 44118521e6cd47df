"""Derivative-free 1-D minimization for convex (possibly extended-valued) functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SearchResult:
    x: float
    fx: float
    lo: float
    hi: float
    evaluations: int
    history: list = field(default_factory=list, repr=False)


def golden_section(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    xtol_rel: float = 1e-9,
    ftol_abs: float = 0.0,
    max_iter: int = 500,
) -> SearchResult:
    """Golden-section search on ``[lo, hi]``.

    ``f`` may return ``inf`` outside its domain.  Ties are resolved toward the
    smaller abscissa.  Stops when the bracket width falls below
    ``xtol_rel * |x|`` or both interior values agree to ``ftol_abs``.
    """
    history = []

    def ev(x):
        v = f(x)
        history.append((x, v))
        return v

    a, b = lo, hi
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = ev(c), ev(d)
    for _ in range(max_iter):
        if abs(b - a) <= xtol_rel * max(abs(c), abs(d), 1e-300):
            break
        if ftol_abs > 0 and math.isfinite(fc) and math.isfinite(fd) and abs(fc - fd) <= ftol_abs:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = ev(d)
    x, fx = min(history, key=lambda t: (t[1], t[0]))
    return SearchResult(x, fx, a, b, len(history), history)


def bracket_minimum(
    f: Callable[[float], float],
    start: float,
    factor: float = 2.0,
    cap: float = 1e12,
    floor: float = 0.0,
) -> tuple[float, float, float, float, list]:
    """Bracket the minimizer of a convex function on ``(floor, cap]`` by geometric steps.

    Returns ``(lo, mid, hi, f(mid), evaluated)`` with ``f(mid) <= f(lo), f(hi)``.
    ``hi`` equals the last point tried when the function is still decreasing at
    ``cap``; callers detect that case through ``mid >= cap / factor``.
    """
    evaluated = []

    def ev(x):
        v = f(x)
        evaluated.append((x, v))
        return v

    x0 = start
    f0 = ev(x0)
    x1 = x0 * factor
    f1 = ev(x1)
    if f1 < f0 or not math.isfinite(f0):
        # walk up
        prev, fprev = x0, f0
        cur, fcur = x1, f1
        while True:
            nxt = cur * factor
            if nxt > cap:
                return prev, cur, cur, fcur, evaluated
            fnxt = ev(nxt)
            if fnxt >= fcur and math.isfinite(fcur):
                return prev, cur, nxt, fcur, evaluated
            prev, fprev, cur, fcur = cur, fcur, nxt, fnxt
    # walk down toward the floor
    hi, fhi = x1, f1
    cur, fcur = x0, f0
    while True:
        nxt = floor + (cur - floor) / factor
        if nxt - floor <= 1e-12 * max(1.0, abs(floor)):
            return floor, cur, hi, fcur, evaluated
        fnxt = ev(nxt)
        if not (fnxt < fcur):
            return nxt, cur, hi, fcur, evaluated
        hi, fhi, cur, fcur = cur, fcur, nxt, fnxt
