"""Return-Jacobian of the tower cells and its windowed-limit checks.

For x in the cell X_{n,p}, the density of the j-step return mass relative
to mu on the cell is

    J_{j,n,p}(x) = sum_r h(y_j) |(f^j)'(y_j)|^-1
                   / sum_r sum_{l>=1} h(y_l) |(f^l)'(y_l)|^-1,

with y_l the preimage of x in Y_{n+l,r}.  Along the inverse tower orbit
the chain-rule products telescope, so evaluating J at the tail anchors
T[i] (cell endpoints) and at a second interior anchor orbit costs one
shared pass: with B[m] = sum_r h(f_r^-1(T[m])) |f_r'|^-1 / G[m] and
G[m] the cumulative tower derivative, J_{j,i}(T[i]) = B[i+j-1] / S[i]
where S is the suffix sum of B.  The truncated suffix is completed with a
Hurwitz-zeta model of the power tail.

The per-point ``jacobian`` operation below walks an explicit inverse chain
instead; it is the slow independent route the kernel is tested against.
"""

from __future__ import annotations

import numpy as np
from scipy.special import zeta as hurwitz_zeta

from .density import DensityEstimate
from .inducing import InducingScheme
from .maps import OutOfRangeError

__all__ = ["TailKernel", "jacobian", "derivative_profile", "jj_deviation",
           "window_target"]


def window_target(alpha: float, j, n):
    """Predicted Jacobian plateau value alpha * n**alpha * (j+n)**-(alpha+1)."""
    n = np.asarray(n, dtype=float)
    return alpha * n ** alpha * (j + n) ** (-(alpha + 1.0))


class TailKernel:
    """Shared-orbit evaluator of the return-Jacobian series on one stack."""

    def __init__(self, scheme: InducingScheme, dens: DensityEstimate,
                 sid: int, i_max: int, l_max: int):
        self.scheme = scheme
        self.dens = dens
        self.stack = scheme.stacks[sid]
        if self.stack.alpha is None:
            raise ValueError("kernel needs a neutral stack")
        self.alpha = self.stack.alpha
        self.i_max = int(i_max)
        self.l_max = int(l_max)
        self.depth = self.i_max + self.l_max + 1
        tower = scheme.map.branches[self.stack.branch_index]

        T = scheme.tail(sid, self.depth)
        llo, lhi = scheme.landing(sid)
        T2 = np.empty(self.depth + 1)
        T2[0] = 0.5 * (llo + lhi)
        for k in range(1, self.depth + 1):
            T2[k] = tower.law.invert(T2[k - 1])
        self.T, self.T2 = T, T2

        self.G = self._cumprod_deriv(tower, T)
        self.G2 = self._cumprod_deriv(tower, T2)
        self.B = self._b_array(T, self.G)
        self.B2 = self._b_array(T2, self.G2)
        self.S = self._suffix(self.B)
        self.S2 = self._suffix(self.B2)

    def _cumprod_deriv(self, tower, T):
        g = np.abs(np.asarray(tower.deriv(T), dtype=float))
        g[0] = 1.0
        return np.cumprod(g)

    def _b_array(self, T, G):
        out = np.zeros(self.depth + 1)
        for f in self.scheme.feeders_of(self.stack.sid):
            br = self.scheme.map.branches[f.branch_index]
            rlo, rhi = br.range()
            y = np.asarray(br.law.invert(np.clip(T[1:], rlo, rhi)), dtype=float)
            y = np.clip(y, br.lo, br.hi)
            out[1:] += self.dens.value_interp(y) / (np.abs(br.deriv(y)) * G[1:])
        return out

    def _suffix(self, B):
        """Suffix sums of B completed past the computed depth.

        The scaled sequence B[m] m**(alpha+1) still drifts like
        (a log m + b)/m at any affordable depth, so the remainder model
        fits that drift rather than a bare constant.
        """
        M = self.depth
        msh = np.arange(M // 2, M + 1, dtype=float)
        q = B[M // 2:M + 1] * msh ** (self.alpha + 1.0)
        basis = np.stack([np.ones_like(msh), np.log(msh) / msh, 1.0 / msh], 1)
        coef, *_ = np.linalg.lstsq(basis, q, rcond=None)
        s1 = self.alpha + 1.0
        tail_const = float(hurwitz_zeta(s1, M + 1.0))
        tail_inv = float(hurwitz_zeta(s1 + 1.0, M + 1.0))
        # integral approximation of sum m**-(s1+1) log m beyond M
        tail_log = M ** (-s1) * (np.log(M) / s1 + 1.0 / s1 ** 2)
        rem = float(coef[0] * tail_const + coef[1] * tail_log
                    + coef[2] * tail_inv)
        s = np.empty(M + 2)
        s[-1] = rem
        s[:-1] = np.cumsum(B[::-1])[::-1] + rem
        return s

    # -- Jacobian samples ----------------------------------------------------

    def j_outer(self, j: int, i):
        """J_{j,i} at the cell endpoint anchored at T[i]."""
        i = np.asarray(i, dtype=int)
        return self.B[i + j - 1] / self.S[i]

    def j_inner(self, j: int, i):
        """J_{j,i} at the opposite endpoint (= T[i+1])."""
        i = np.asarray(i, dtype=int)
        return self.B[i + j] / self.S[i + 1]

    def j_mid(self, j: int, i):
        """J_{j,i} at the interior anchor orbit."""
        i = np.asarray(i, dtype=int)
        return self.B2[i + j - 1] / self.S2[i]

    def density_at(self, i, mid: bool = False):
        """Extended-measure density d(mu)/dLeb at the anchors of depth i."""
        i = np.asarray(i, dtype=int)
        if mid:
            return self.G2[i] * self.S2[i]
        return self.G[i] * self.S[i]

    def window_indices(self, j: int, eps: float) -> np.ndarray:
        lo = int(np.floor(eps * j)) + 1
        hi = int(np.ceil(j / eps)) - 1
        lo = max(lo, self.scheme.n0, 1)
        if hi > self.i_max:
            raise ValueError("window exceeds the kernel depth")
        return np.arange(lo, hi + 1)

    def window_deviation(self, j: int, eps: float):
        """(indices, sup_i |J - c| over 3 samples, plateau ratios J_mid/c)."""
        idx = self.window_indices(j, eps)
        c = window_target(self.alpha, j, idx)
        dev = np.maximum.reduce([
            np.abs(self.j_outer(j, idx) - c),
            np.abs(self.j_inner(j, idx) - c),
            np.abs(self.j_mid(j, idx) - c),
        ])
        return idx, dev, self.j_mid(j, idx) / c

    def window_sum(self, j: int, eps: float) -> float:
        """S_j = sum over the window of the 3-point sup of |J - c|."""
        _, dev, _ = self.window_deviation(j, eps)
        return float(np.sum(dev))

    def sup_ratio(self, j: int, eps: float) -> float:
        """max over the window of |J/c - 1| (3-point sup per cell)."""
        idx, dev, _ = self.window_deviation(j, eps)
        c = window_target(self.alpha, j, idx)
        return float(np.max(dev / c))

    # -- derivative profiles ---------------------------------------------------

    def deriv_ratio(self, j: int, n: int, rid: int) -> float:
        """|(f^j)'(y)|^-1 |f_r'(zeta)| ((j+n)/n)**(alpha+1) at the interior anchor."""
        f = self.scheme.feeders[rid]
        br = self.scheme.map.branches[f.branch_index]
        y = float(br.invert(self.T2[n + j - 1]))
        dprod = abs(float(br.deriv(y))) * self.G2[n + j - 1] / self.G2[n]
        return (abs(float(br.deriv(f.zeta))) / dprod
                * ((j + n) / n) ** (self.alpha + 1.0))

    def jj_deviation(self, n: int, rid: int, K: float) -> float:
        """sup over l <= K n of |(n/(l+n))**(alpha+1) |(f^l)'| - omega_r|."""
        f = self.scheme.feeders[rid]
        br = self.scheme.map.branches[f.branch_index]
        lmax = min(int(K * n), self.depth - n)
        ls = np.arange(1, lmax + 1)
        y = np.asarray(br.invert(self.T2[n + ls - 1]), dtype=float)
        dprod = np.abs(br.deriv(y)) * self.G2[n + ls - 1] / self.G2[n]
        omega = abs(float(br.deriv(f.zeta)))
        vals = (n / (ls + n)) ** (self.alpha + 1.0) * dprod
        return float(np.max(np.abs(vals - omega)))


# ---------------------------------------------------------------------------
# slow per-point route (independent of the kernel's shared arrays)


def _chain(scheme: InducingScheme, sid: int, x: float, depth: int):
    """Inverse tower orbit w[0..depth] from an arbitrary x, with log f'."""
    tower = scheme.map.branches[scheme.stacks[sid].branch_index]
    w = np.empty(depth + 1)
    w[0] = x
    for k in range(1, depth + 1):
        w[k] = tower.law.invert(w[k - 1])
    logd = np.log(np.abs(np.asarray(tower.deriv(w), dtype=float)))
    logd[0] = 0.0
    return w, np.cumsum(logd)


def jacobian(scheme: InducingScheme, dens: DensityEstimate, j: int, n: int,
             p: int, x: float, l_max: int, side: int | None = None) -> float:
    """J_{j,n,p}(x) by an explicit inverse chain from x.

    The series over return depths is truncated at ``l_max`` and completed
    with the power-tail model; preimages are checked against the enumerated
    cells and a structural error is raised on mismatch.
    """
    s = scheme.stack_for(p, side)
    lo, hi = scheme.x_cell(n, s.sid)
    if not lo - 1e-12 <= x <= hi + 1e-12:
        raise OutOfRangeError(f"x={x} is not in cell X_{n} of stack p={p}")
    depth = l_max + 1
    w, cumlog = _chain(scheme, s.sid, x, depth)
    num = 0.0
    den_terms = np.zeros(l_max + 1)
    for f in scheme.feeders_of(s.sid):
        br = scheme.map.branches[f.branch_index]
        ls = np.arange(1, l_max + 1)
        y = np.asarray(br.invert(w[ls - 1]), dtype=float)
        cell = scheme.y_cell(n + 1, f.rid)
        if cell is not None:
            ylo, yhi = cell
            if not ylo - 1e-8 <= y[0] <= yhi + 1e-8:
                raise OutOfRangeError(
                    f"preimage {y[0]} escapes cell Y_{n + 1} of feeder {f.rid}")
        terms = dens.value_at(y) * np.exp(-cumlog[ls - 1]) / np.abs(br.deriv(y))
        den_terms[1:] += terms
        num += terms[j - 1]
    msh = np.arange(1, l_max + 1, dtype=float) + n
    Ctail = float(np.mean(den_terms[1:][-max(4, l_max // 10):]
                          * msh[-max(4, l_max // 10):] ** (s.alpha + 1.0)))
    rem = Ctail * float(hurwitz_zeta(s.alpha + 1.0, l_max + n + 1.0))
    den = float(np.sum(den_terms)) + rem
    return num / den


def derivative_profile(scheme: InducingScheme, j: int, n: int,
                       rid: int) -> float:
    """Ratio |(f^j)'(y_{j,n,r})|^-1 |f_r'(zeta_r)| ((j+n)/n)**(alpha+1).

    Evaluated on the inverse orbit of the landing midpoint, which threads
    the interiors of the cells X_n; the ratio tends to 1.
    """
    f = scheme.feeders[rid]
    s = scheme.stacks[f.sid]
    if s.alpha is None:
        raise ValueError("derivative profile needs a neutral stack")
    llo, lhi = scheme.landing(s.sid)
    w, cumlog = _chain(scheme, s.sid, 0.5 * (llo + lhi), n + j - 1)
    br = scheme.map.branches[f.branch_index]
    y = float(br.invert(w[n + j - 1]))
    logprod = np.log(abs(float(br.deriv(y)))) + cumlog[n + j - 1] - cumlog[n]
    return (abs(float(br.deriv(f.zeta))) * np.exp(-logprod)
            * ((j + n) / n) ** (s.alpha + 1.0))


def jj_deviation(scheme: InducingScheme, n: int, rid: int, K: float) -> float:
    """Windowed expansion profile sup_{l <= Kn} |(n/(l+n))**(a+1)|(f^l)'| - w_r|."""
    f = scheme.feeders[rid]
    s = scheme.stacks[f.sid]
    llo, lhi = scheme.landing(s.sid)
    lmax = int(K * n)
    w, cumlog = _chain(scheme, s.sid, 0.5 * (llo + lhi), n + lmax)
    br = scheme.map.branches[f.branch_index]
    ls = np.arange(1, lmax + 1)
    y = np.asarray(br.invert(w[n + ls - 1]), dtype=float)
    logprod = np.log(np.abs(br.deriv(y))) + cumlog[n + ls - 1] - cumlog[n]
    omega = abs(float(br.deriv(f.zeta)))
    vals = (n / (ls + n)) ** (s.alpha + 1.0) * np.exp(logprod)
    return float(np.max(np.abs(vals - omega)))
