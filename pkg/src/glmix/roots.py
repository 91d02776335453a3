"""Monotone root-finding kernels used for branch inversion.

Every inverse of a power-law branch in this package reduces to solving

    v + b*v**beta (+ c*v**gamma) = t        for v in [0, t],

where v is the distance to the fixed point.  The left-hand side has slope
>= 1 for every validated branch, so a Newton iteration clamped to the
bracket [0, t] converges fast and can never escape.  A generic bracketed
hybrid (bisection safeguarding Newton) backs up the rare payloads whose
correction term makes the residual non-convex.
"""

from __future__ import annotations

import numpy as np

__all__ = ["solve_power", "invert_monotone", "ConvergenceError"]

_RESID_TOL = 1e-15
_MAX_NEWTON = 60


class ConvergenceError(RuntimeError):
    """A root-finding iteration failed to reach its tolerance."""


def _power_resid(v, t, b, beta, c, gamma):
    g = v + b * v ** beta - t
    dg = 1.0 + b * beta * v ** (beta - 1.0)
    if c != 0.0:
        g = g + c * v ** gamma
        dg = dg + c * gamma * v ** (gamma - 1.0)
    return g, dg

def solve_power(t, b, beta, c=0.0, gamma=0.0):
    """Solve ``v + b v**beta (+ c v**gamma) = t`` elementwise, v in [0, t].

    Parameters
    ----------
    t : float or ndarray
        Right-hand side, must be >= 0 (tiny negatives are clipped).
    b, beta : float
        Leading coefficient (> 0) and exponent (> 1).
    c, gamma : float
        Optional correction term; gamma > 1.  The combined map must be
        strictly increasing on [0, t], which branch validation enforces.

    Returns
    -------
    float or ndarray with ``|v + b v**beta (+ c v**gamma) - t| <= 1e-15*(1+t)``.
    """
    scalar = np.isscalar(t) or np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < -1e-9):
        raise ValueError("solve_power needs a nonnegative right-hand side")
    t_arr = np.maximum(t_arr, 0.0)

    if c == 0.0 and beta == 2.0:
        # v + b v^2 = t, stable quadratic branch
        v = 2.0 * t_arr / (1.0 + np.sqrt(1.0 + 4.0 * b * t_arr))
    else:
        # One fixed-point sweep lands below the root; the first Newton step
        # from there brackets it from above, after which descent is monotone.
        v = t_arr / (1.0 + b * t_arr ** (beta - 1.0))
        tol = _RESID_TOL * (1.0 + t_arr)
        ok = False
        for _ in range(_MAX_NEWTON):
            g, dg = _power_resid(v, t_arr, b, beta, c, gamma)
            if np.all(np.abs(g) <= tol):
                ok = True
                break
            v = np.clip(v - g / dg, 0.0, t_arr)
        if not ok:
            g, _ = _power_resid(v, t_arr, b, beta, c, gamma)
            bad = np.abs(g) > tol
            if np.any(bad):
                v_bad = [
                    invert_monotone(
                        lambda x: _power_resid(x, 0.0, b, beta, c, gamma)[0],
                        ti, 0.0, ti,
                        df=lambda x: _power_resid(x, 0.0, b, beta, c, gamma)[1],
                    )
                    for ti in t_arr[bad]
                ]
                v = v.copy()
                v[bad] = v_bad
    return float(v[0]) if scalar else v


def invert_monotone(f, y, lo, hi, df=None, tol=1e-15, max_iter=200):
    """Solve f(x) = y for increasing f on the bracket [lo, hi].

    Newton steps (when ``df`` is given) are accepted only inside the current
    bracket; otherwise the step degrades to bisection, so the iterate never
    leaves [lo, hi].
    """
    flo, fhi = f(lo) - y, f(hi) - y
    if flo > 0 or fhi < 0:
        slack = 1e-12 * (1.0 + abs(y))
        if flo > slack or fhi < -slack:
            raise ValueError(f"no sign change on bracket for y={y!r}")
        return lo if flo > 0 else hi
    x = 0.5 * (lo + hi)
    scale = tol * (1.0 + abs(y))
    for _ in range(max_iter):
        fx = f(x) - y
        if abs(fx) <= scale:
            return x
        if fx > 0:
            hi = x
        else:
            lo = x
        x_new = None
        if df is not None:
            d = df(x)
            if d > 0:
                cand = x - fx / d
                if lo < cand < hi:
                    x_new = cand
        x = x_new if x_new is not None else 0.5 * (lo + hi)
        if hi - lo <= 4e-16 * (abs(x) + 1e-300):
            return x
    raise ConvergenceError(f"invert_monotone stalled at residual {f(x) - y:.3e}")
