"""Invariant density on the inducing set and its extension to the tower cells.

The first-return map F on Y is uniformly expanding, so a classical Ulam
discretization of F converges where a direct discretization of f would
stall at the neutral points.  The invariant cell masses of the Ulam matrix
give a piecewise-constant density h with the normalisation mu(Y) = 1; the
measure of the tower cells follows from the exact set identities

    mu(X_{n,p}) = sum_{r feeding p} sum_{j > n} mu(Y_{j,r}),

where the inner sums are integrals of h over intervals shrinking onto the
feeder accumulation points (sigma-additivity makes the depth truncation
exact up to quadrature).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .inducing import InducingScheme
from .roots import ConvergenceError

__all__ = [
    "YGrid", "DensityEstimate", "MeasureTable", "ulam_induced",
    "extend_measure", "one_sided_limit", "density_l1_distance",
]


class YGrid:
    """Uniform grid over the (possibly disconnected) inducing set."""

    def __init__(self, comps, counts):
        self.comps = tuple(comps)
        self.counts = tuple(int(c) for c in counts)
        self.edges = [np.linspace(lo, hi, c + 1)
                      for (lo, hi), c in zip(self.comps, self.counts)]
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.m = int(self.offsets[-1])
        self.cell_lo = np.concatenate([e[:-1] for e in self.edges])
        self.cell_hi = np.concatenate([e[1:] for e in self.edges])
        self.width = self.cell_hi - self.cell_lo

    @classmethod
    def build(cls, Y, m: int) -> "YGrid":
        total = sum(hi - lo for lo, hi in Y)
        counts = [max(4, int(round(m * (hi - lo) / total))) for lo, hi in Y]
        return cls(Y, counts)

    def comp_of(self, x: float) -> int:
        for ci, (lo, hi) in enumerate(self.comps):
            if lo - 1e-12 <= x <= hi + 1e-12:
                return ci
        raise KeyError(f"{x} is not in the inducing set")

    def locate(self, x):
        """Flat cell index of each point (points must lie in the set)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.full(x.shape, -1, dtype=np.int64)
        for ci, (lo, hi) in enumerate(self.comps):
            sel = (x >= lo - 1e-12) & (x <= hi + 1e-12)
            if np.any(sel):
                idx = np.searchsorted(self.edges[ci], x[sel], side="right") - 1
                idx = np.clip(idx, 0, self.counts[ci] - 1)
                out[sel] = idx + self.offsets[ci]
        if np.any(out < 0):
            raise KeyError("point outside the inducing set")
        return out


@dataclass
class DensityEstimate:
    """Piecewise-constant estimate of h = d(mu|Y)/dLeb with mu(Y) = 1."""

    scheme: InducingScheme
    grid: YGrid
    h: np.ndarray
    residual: float
    iterations: int
    tau_cap: int
    _cum: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._cum:
            for ci in range(len(self.grid.comps)):
                o = self.grid.offsets
                seg = self.h[o[ci]:o[ci + 1]] * self.grid.width[o[ci]:o[ci + 1]]
                self._cum.append(np.concatenate([[0.0], np.cumsum(seg)]))

    def value_at(self, x):
        return self.h[self.grid.locate(x)]

    def value_interp(self, x):
        """Piecewise-linear read of h through the cell midpoints.

        Same estimate, smoother evaluation: removes the cell-jump noise that
        a raw cell lookup injects into pointwise series.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(x.shape)
        done = np.zeros(x.shape, dtype=bool)
        for ci, (lo, hi) in enumerate(self.grid.comps):
            sel = (~done) & (x >= lo - 1e-12) & (x <= hi + 1e-12)
            if not np.any(sel):
                continue
            o = self.grid.offsets[ci]
            e = self.grid.edges[ci]
            mids = 0.5 * (e[:-1] + e[1:])
            out[sel] = np.interp(x[sel], mids, self.h[o:o + len(mids)])
            done[sel] = True
        if not np.all(done):
            raise KeyError("point outside the inducing set")
        return out

    def _H(self, x, ci: int):
        """Cumulative integral of h from the component's left end."""
        e = self.grid.edges[ci]
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(e, x, side="right") - 1, 0,
                      self.grid.counts[ci] - 1)
        base = self._cum[ci][idx]
        off = self.grid.offsets[ci]
        return base + self.h[off + idx] * (x - e[idx])

    def integral(self, a, b):
        """Integral of h over [a, b] (both endpoints in one component)."""
        a_arr = np.atleast_1d(np.asarray(a, dtype=float))
        b_arr = np.atleast_1d(np.asarray(b, dtype=float))
        out = np.empty_like(a_arr)
        done = np.zeros(a_arr.shape, dtype=bool)
        for ci, (lo, hi) in enumerate(self.grid.comps):
            sel = (~done) & (a_arr >= lo - 1e-9) & (a_arr <= hi + 1e-9)
            if np.any(sel):
                aa = np.clip(a_arr[sel], lo, hi)
                bb = np.clip(b_arr[sel], lo, hi)
                out[sel] = self._H(bb, ci) - self._H(aa, ci)
                done[sel] = True
        if not np.all(done):
            raise KeyError("integration endpoints outside the inducing set")
        return float(out[0]) if np.ndim(a) == 0 else out

    def one_sided_limit(self, zeta: float, side: int, k: int = 8) -> float:
        """Linear extrapolation of h to zeta along k cells on the given side."""
        ci = self.grid.comp_of(zeta)
        e = self.grid.edges[ci]
        o = self.grid.offsets[ci]
        if side > 0:
            i0 = int(np.clip(np.searchsorted(e, zeta, "right") - 1, 0,
                             self.grid.counts[ci] - 1))
            cells = np.arange(i0, min(i0 + k, self.grid.counts[ci]))
        else:
            i0 = int(np.clip(np.searchsorted(e, zeta, "left") - 1, 0,
                             self.grid.counts[ci] - 1))
            cells = np.arange(max(i0 - k + 1, 0), i0 + 1)
        if len(cells) < 2:
            raise KeyError("not enough cells adjacent to zeta")
        mids = 0.5 * (e[cells] + e[cells + 1])
        vals = self.h[o + cells]
        slope, icpt = np.polyfit(mids, vals, 1)
        return float(icpt + slope * zeta)


def one_sided_limit(dens: DensityEstimate, zeta: float, side: int,
                    k: int = 8) -> float:
    return dens.one_sided_limit(zeta, side, k)


def density_l1_distance(d1: DensityEstimate, d2: DensityEstimate) -> float:
    """L1 distance of two piecewise-constant densities on the same set."""
    out = 0.0
    for ci in range(len(d1.grid.comps)):
        e = np.union1d(d1.grid.edges[ci], d2.grid.edges[ci])
        mids = 0.5 * (e[:-1] + e[1:])
        v1 = d1.h[d1.grid.locate(mids)]
        v2 = d2.h[d2.grid.locate(mids)]
        out += float(np.sum(np.abs(v1 - v2) * np.diff(e)))
    return out


# ---------------------------------------------------------------------------
# Ulam matrix of the induced map


def _split_emit(pts, tgt_first, tgt_step, grid, rows, cols, vals):
    """Emit Leb masses of the intervals between consecutive preimage points.

    ``pts`` ascends and bounds the source subintervals; interval k targets
    cell ``tgt_first + tgt_step * k``.  Each subinterval is intersected with
    the source grid before emission.
    """
    ci = grid.comp_of(0.5 * (pts[0] + pts[-1]))
    inner = grid.edges[ci]
    lo_j = np.searchsorted(inner, pts[0], "right")
    hi_j = np.searchsorted(inner, pts[-1], "left")
    allpts = np.unique(np.concatenate([pts, inner[lo_j:hi_j]]))
    if allpts[0] > pts[0]:
        allpts = np.concatenate([[pts[0]], allpts])
    widths = np.diff(allpts)
    keep = widths > 0
    mids = 0.5 * (allpts[:-1] + allpts[1:])[keep]
    src = grid.locate(mids)
    kidx = np.clip(np.searchsorted(pts, mids) - 1, 0, len(pts) - 2)
    rows.append(tgt_first + tgt_step * kidx)
    cols.append(src)
    vals.append(widths[keep])


def _auto_tau_cap(scheme: InducingScheme, grid: YGrid) -> int:
    wmin = float(np.min(grid.width))
    cap = 64
    while cap < 100000:
        widest = 0.0
        for f in scheme.feeders:
            c = scheme.y_cell(cap, f.rid)
            if c is not None:
                widest = max(widest, c[1] - c[0])
        if widest < 0.5 * wmin:
            return cap
        cap *= 2
    return cap


def ulam_induced(scheme: InducingScheme, m: int = 4096,
                 tau_cap: int | None = None, tol: float = 1e-12,
                 max_iter: int = 100000) -> DensityEstimate:
    """Invariant density of the first-return map by Ulam's method.

    Builds the column-stochastic transition matrix of F on an m-cell grid
    over Y; return branches deeper than ``tau_cap`` are aggregated into the
    sliver at their accumulation point using the deepest resolved branch's
    target distribution, so columns remain stochastic.
    """
    if m < 100:
        raise ValueError("m must be at least 100")
    grid = YGrid.build(scheme.Y, m)
    if tau_cap is None:
        tau_cap = _auto_tau_cap(scheme, grid)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    for ib, plo, phi in scheme.tau1_pieces():
        br = scheme.map.branches[ib]
        u, v = sorted((float(br(plo)), float(br(phi))))
        ci = grid.comp_of(0.5 * (u + v))
        e = grid.edges[ci]
        u, v = max(u, e[0]), min(v, e[-1])
        lo_t = int(np.clip(np.searchsorted(e, u, "right"), 1, len(e) - 1))
        hi_t = int(np.searchsorted(e, v, "left"))
        inner = e[lo_t:hi_t]
        pre = np.asarray(br.invert(inner), dtype=float) if len(inner) else \
            np.empty(0)
        pre = np.sort(pre)
        pts = np.concatenate([[plo], pre[(pre > plo) & (pre < phi)], [phi]])
        if br.orientation > 0:
            tgt_first, tgt_step = grid.offsets[ci] + lo_t - 1, 1
        else:
            tgt_first, tgt_step = grid.offsets[ci] + lo_t - 1 + len(pts) - 2, -1
        _split_emit(pts, tgt_first, tgt_step, grid, rows, cols, vals)

    for s in scheme.stacks:
        llo, lhi = scheme.landing(s.sid)
        ci = grid.comp_of(0.5 * (llo + lhi))
        e = grid.edges[ci]
        lo_t = int(np.searchsorted(e, llo + 1e-13, "right"))
        hi_t = int(np.searchsorted(e, lhi - 1e-13, "left"))
        eland = e[lo_t:hi_t]
        tower_law = scheme.map.branches[s.branch_index].law
        # inverse tower orbit of every landing edge, shared by all levels
        W = np.empty((tau_cap, len(eland)))
        if len(eland):
            W[0] = eland
            for k_ in range(1, tau_cap):
                W[k_] = tower_law.invert(W[k_ - 1])
        feeders = scheme.feeders_of(s.sid)
        for f in feeders:
            br = scheme.map.branches[f.branch_index]
            scheme.y_edges(f.rid, tau_cap + 1)
            pattern = None
            for n in range(2, tau_cap + 1):
                cell = scheme.y_cell(n, f.rid)
                if cell is None:
                    continue
                a, b_ = cell
                clipped = n <= scheme.n0
                if clipped:
                    ia, ib2 = sorted(_forward_n(scheme, f, n, a, b_))
                    ia, ib2 = max(ia, e[0]), min(ib2, e[-1])
                    sel = (eland > ia) & (eland < ib2)
                    wrow = W[n - 1][sel]
                    first = lo_t + int(np.searchsorted(eland, ia, "right")) - 1
                    first = max(first, 0)
                else:
                    wrow = W[n - 1]
                    first = lo_t - 1
                pre = np.asarray(br.invert(wrow), dtype=float) if len(wrow) \
                    else np.empty(0)
                orient = br.orientation
                pre = np.sort(pre)
                pts = np.concatenate([[a], pre[(pre > a) & (pre < b_)], [b_]])
                if orient > 0:
                    tgt_first, tgt_step = grid.offsets[ci] + first, 1
                else:
                    last = first + len(pts) - 2
                    tgt_first, tgt_step = grid.offsets[ci] + last, -1
                _split_emit(pts, tgt_first, tgt_step, grid, rows, cols, vals)
            # aggregated sliver: everything deeper than tau_cap
            eN = scheme.y_edges(f.rid, tau_cap)
            sl_a, sl_b = sorted((float(eN[tau_cap]), f.zeta))
            if sl_b - sl_a > 0:
                pattern = _level_pattern(scheme, f, s, tau_cap, W, lo_t, ci,
                                         grid)
                _emit_sliver(sl_a, sl_b, pattern, grid, rows, cols, vals)

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    if r.min() < 0 or r.max() >= grid.m:
        raise ConvergenceError("Ulam assembly produced an out-of-grid target")
    P = sp.coo_matrix((v / grid.width[c], (r, c)), shape=(grid.m, grid.m))
    P = P.tocsr()
    colsum = np.asarray(P.sum(axis=0)).ravel()
    if np.any(np.abs(colsum - 1.0) > 1e-8):
        worst = float(np.max(np.abs(colsum - 1.0)))
        raise ConvergenceError(f"Ulam columns deviate from 1 by {worst:.2e}")
    P = P @ sp.diags(1.0 / colsum)

    nu = grid.width / float(np.sum(grid.width))
    res = np.inf
    for it in range(1, max_iter + 1):
        new = P @ nu
        res = float(np.sum(np.abs(new - nu)))
        nu = new / np.sum(new)
        if res <= tol:
            break
    else:
        raise ConvergenceError(
            f"power iteration residual {res:.3e} after {max_iter} steps")
    if np.any(nu <= 0):
        raise ConvergenceError("invariant density touches zero")
    h = nu / grid.width
    return DensityEstimate(scheme, grid, h, res, it, tau_cap)


def _forward_n(scheme, f, n, a, b_):
    """Endpoints of f^n over a clipped feeder cell, by forward iteration."""
    br = scheme.map.branches[f.branch_index]
    tower = scheme.map.branches[scheme.stacks[f.sid].branch_index]
    out = []
    for y in (a, b_):
        t = float(br(y))
        for _ in range(n - 1):
            t = float(tower(t))
        out.append(t)
    return out


def _level_pattern(scheme, f, s, n, W, lo_t, ci, grid):
    """Normalised target distribution of the level-n branch of one feeder."""
    br = scheme.map.branches[f.branch_index]
    cell = scheme.y_cell(n, f.rid)
    a, b_ = cell
    pre = np.sort(np.asarray(br.invert(W[n - 1]), dtype=float))
    pts = np.concatenate([[a], pre[(pre > a) & (pre < b_)], [b_]])
    orient = br.orientation * scheme.map.branches[s.branch_index].orientation ** (n - 1)
    k = len(pts) - 1
    if orient > 0:
        ids = grid.offsets[ci] + lo_t - 1 + np.arange(k)
    else:
        ids = grid.offsets[ci] + lo_t - 1 + (k - 1) - np.arange(k)
    w = np.diff(pts)
    return ids, w / np.sum(w)


def _emit_sliver(sl_a, sl_b, pattern, grid, rows, cols, vals):
    ids, w = pattern
    j = grid.locate(np.array([sl_a + 1e-300]))[0]
    jmax = grid.locate(np.array([sl_b - 1e-300]))[0]
    for jj in range(j, jmax + 1):
        olo = max(sl_a, grid.cell_lo[jj])
        ohi = min(sl_b, grid.cell_hi[jj])
        if ohi <= olo:
            continue
        rows.append(ids)
        cols.append(np.full(len(ids), jj, dtype=np.int64))
        vals.append(w * (ohi - olo))


# ---------------------------------------------------------------------------
# measure extension


@dataclass
class MeasureTable:
    """Cell measures mu(Y_{n,r}) and mu(X_{n,p}) up to depth N."""

    scheme: InducingScheme
    dens: DensityEstimate
    N: int
    muY: dict            # rid -> array[j], j = 2..N (index 0, 1 unused)
    tail_stack: dict     # sid -> array[n], n = 2..N+1: mu over levels >= n
    muY1: float          # quadrature over the tau = 1 region

    def tail_p(self, p: int) -> np.ndarray:
        """sum over the stacks of p of the level tails (index n = 2..N+1)."""
        out = None
        for s in self.scheme.stacks:
            if s.p != p:
                continue
            t = self.tail_stack[s.sid]
            out = t.copy() if out is None else out + t
        if out is None:
            raise KeyError(f"no stack for p={p}")
        return out

    def muX_p(self, p: int, n) -> np.ndarray | float:
        """mu(X_{n,p}) = tail over levels >= n+1."""
        t = self.tail_p(p)
        return t[np.asarray(n) + 1]

    def tau_tail(self, n) -> np.ndarray | float:
        """mu(y in Y : tau(y) >= n), n >= 2."""
        out = sum(self.tail_p(p) for p in range(1, self.scheme.q + 1))
        return out[np.asarray(n)]

    def identity_defect(self) -> float:
        """|mu(Y1) + mu(X1) - mu(Y)| with mu(Y) = 1."""
        mu_x1 = float(sum(self.muX_p(p, 1) for p in range(1, self.scheme.q + 1)))
        return abs(self.muY1 + mu_x1 - 1.0)

    def gamma_fit(self, p: int, window=(0.5, 1.0)) -> tuple[float, float]:
        """(gamma_hat, relative oscillation) of n**alpha * tail_p(n)."""
        alpha = next(s.alpha for s in self.scheme.stacks if s.p == p)
        if alpha is None:
            raise ValueError("control family has no polynomial tail")
        n = np.arange(2, self.N + 2)
        seq = n ** alpha * self.tail_p(p)[2:]
        lo = max(2, int(window[0] * self.N))
        sel = (n >= lo) & (n <= window[1] * self.N + 1)
        plateau = seq[sel]
        gamma = float(np.median(plateau))
        osc = float((plateau.max() - plateau.min()) / gamma)
        return gamma, osc


def extend_measure(scheme: InducingScheme, dens: DensityEstimate,
                   N: int) -> MeasureTable:
    """Integrate h over the feeder cells and accumulate the exact tails."""
    muY = {}
    tails = {s.sid: np.zeros(N + 2) for s in scheme.stacks}
    for f in scheme.feeders:
        e = scheme.y_edges(f.rid, N + 1)
        a = np.minimum(e[1:N], e[2:N + 1])
        b = np.maximum(e[1:N], e[2:N + 1])
        arr = np.zeros(N + 1)
        arr[2:] = dens.integral(a, b)          # mu(Y_{j,r}), j = 2..N
        muY[f.rid] = arr
        # sigma-additive tails: integral between the level edge and zeta
        n_idx = np.arange(2, N + 2)
        lo = np.minimum(e[n_idx - 1], f.zeta)
        hi = np.maximum(e[n_idx - 1], f.zeta)
        tails[f.sid][2:] += dens.integral(lo, hi)
    mu_y1 = 0.0
    for ib, plo, phi in scheme.tau1_pieces():
        mu_y1 += float(dens.integral(plo, phi))
    return MeasureTable(scheme, dens, N, muY, tails, mu_y1)
