"""Adapted-grid discretization of the full map's transfer operator.

The grid follows the natural cell geometry: uniform subcells of width <= w
on Y and on the first few tower levels, then one cell per tower level down
to depth N.  A uniform grid cannot resolve the n**-alpha accumulation at
the neutral points; the tower cells can, and on them the operator is a
pure shift (each deep cell maps onto the next level up with mass one).

Mass scheduled to land deeper than N goes to an absorbing bucket and is
never recycled: for horizons n_max <= N this is exact, because mass that
deep could not have returned to Y within n_max steps anyway.

Iteration is performed on the mass vector M (M_i = integral of the
evolved density over cell i), starting from the mass of Y, so that
c_n = sum_i g_i M_i realises the correlation integrals over Y.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .density import DensityEstimate, YGrid, extend_measure
from .inducing import InducingScheme
from .roots import ConvergenceError

__all__ = [
    "OperatorGrid", "KrickebergProfile", "build_operator",
    "krickeberg_profile", "correlation", "iterate_masses", "a_seq",
    "profile_to_csv", "correlation_to_csv", "LeakageError",
]

KIND_Y, KIND_XFINE, KIND_X, KIND_ABS = 0, 1, 2, 3


class LeakageError(RuntimeError):
    """Truncation depth N leaves more escaping mass than allowed."""


def a_seq(alpha: float | None, n) -> np.ndarray:
    """Return-sequence normaliser: n**(1-alpha), log n at alpha = 1, else 1."""
    n = np.asarray(n, dtype=float)
    if alpha is None:
        return np.ones_like(n)
    if alpha >= 1.0:
        out = np.where(n > 1, np.log(np.maximum(n, 2.0)), 1.0)
        return out
    out = np.where(n >= 1, n ** (1.0 - alpha), 1.0)
    return out


@dataclass
class OperatorGrid:
    """Sparse transfer-operator discretization on the adapted partition."""

    scheme: InducingScheme
    dens: DensityEstimate
    N: int
    w: float
    n_ref: int
    P: sp.csr_matrix
    cell_lo: np.ndarray
    cell_hi: np.ndarray
    mu: np.ndarray
    kind: np.ndarray
    cell_stack: np.ndarray      # stack id or -1
    cell_level: np.ndarray      # tower level or 0
    y_cells: np.ndarray         # indices of the Y subcells
    absorber: int
    leak_per_step: float        # mu-fraction of Y scheduled past depth N

    @property
    def alpha(self) -> float | None:
        alphas = [s.alpha for s in self.scheme.stacks if s.alpha is not None]
        return max(alphas) if alphas else None

    @property
    def m(self) -> int:
        return len(self.mu)

    def a(self, n):
        return a_seq(self.alpha, n)

    def observable_values(self, fn) -> np.ndarray:
        """Evaluate a pointwise function at the cell midpoints (absorber 0)."""
        g = fn(0.5 * (self.cell_lo + self.cell_hi))
        g = np.asarray(g, dtype=float)
        g[self.absorber] = 0.0
        return g


def build_operator(scheme: InducingScheme, dens: DensityEstimate, N: int,
                   w: float, n_ref: int | None = None,
                   eps_leak: float = 1e-3,
                   series_cap: int = 2000) -> OperatorGrid:
    """Assemble the column-stochastic operator matrix on the adapted grid."""
    meas = extend_measure(scheme, dens, N + 1)
    # one step sends Y_{j,r} to level j-1, so mass at levels >= N+2 escapes
    leak = float(sum(meas.tail_stack[s.sid][N + 2] for s in scheme.stacks))
    if leak > eps_leak:
        raise LeakageError(
            f"estimated leakage {leak:.2e} exceeds {eps_leak:.2e}; increase N")

    # refine every tower level whose cell is wider than w: the remaining
    # deep columns are then pure shifts with no uniformisation error
    n_refs: dict[int, int] = {}
    for s in scheme.stacks:
        if n_ref is not None:
            n_refs[s.sid] = max(1, min(n_ref, N - 1))
            continue
        n = max(1, scheme.n0)
        while n < N - 1:
            a, b = scheme.x_cell(n + 1, s.sid)
            if b - a <= w:
                break
            n += 1
        n_refs[s.sid] = n

    ygrid = YGrid.build(scheme.Y, max(16, int(round(scheme.leb_Y() / w))))
    lo = [ygrid.cell_lo]
    hi = [ygrid.cell_hi]
    kinds = [np.zeros(ygrid.m, dtype=np.int8)]
    stacks = [np.full(ygrid.m, -1, dtype=np.int64)]
    levels = [np.zeros(ygrid.m, dtype=np.int64)]
    fine_index: dict[tuple[int, int], tuple[int, np.ndarray]] = {}
    whole_index: dict[tuple[int, int], int] = {}
    pos = ygrid.m
    for s in scheme.stacks:
        n_ref_s = n_refs[s.sid]
        for n in range(1, n_ref_s + 1):
            a, b = scheme.x_cell(n, s.sid)
            k = max(1, int(np.ceil((b - a) / w)))
            e = np.linspace(a, b, k + 1)
            lo.append(e[:-1])
            hi.append(e[1:])
            kinds.append(np.full(k, KIND_XFINE, dtype=np.int8))
            stacks.append(np.full(k, s.sid, dtype=np.int64))
            levels.append(np.full(k, n, dtype=np.int64))
            fine_index[(s.sid, n)] = (pos, e)
            pos += k
        for n in range(n_ref_s + 1, N + 1):
            a, b = scheme.x_cell(n, s.sid)
            lo.append(np.array([a]))
            hi.append(np.array([b]))
            kinds.append(np.array([KIND_X], dtype=np.int8))
            stacks.append(np.array([s.sid]))
            levels.append(np.array([n]))
            whole_index[(s.sid, n)] = pos
            pos += 1
    absorber = pos
    lo.append(np.array([np.nan]))
    hi.append(np.array([np.nan]))
    kinds.append(np.array([KIND_ABS], dtype=np.int8))
    stacks.append(np.array([-1]))
    levels.append(np.array([0]))

    cell_lo = np.concatenate(lo)
    cell_hi = np.concatenate(hi)
    kind = np.concatenate(kinds)
    cell_stack = np.concatenate(stacks)
    cell_level = np.concatenate(levels)
    m = absorber + 1

    # global locator: the real cells plus one absorbing sliver per stack
    # tile [0, eta], so sorting left endpoints indexes the partition
    sliver_lo = []
    for s in scheme.stacks:
        t_edge = float(scheme.tail(s.sid, N + 1)[N + 1])
        sliver_lo.append(min(s.xi, t_edge))
    loc_lo = np.concatenate([cell_lo[:absorber], np.asarray(sliver_lo)])
    loc_id = np.concatenate([np.arange(absorber),
                             np.full(len(sliver_lo), absorber)])
    srt = np.argsort(loc_lo, kind="stable")
    loc_lo = loc_lo[srt]
    loc_id = loc_id[srt]

    def locate(x):
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(loc_lo, x, side="right") - 1, 0,
                    len(loc_lo) - 1)
        return loc_id[i]

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def emit_interval_column(j, a, b, br):
        """Column of a source interval [a, b] inside one branch domain."""
        u, v = sorted((float(br(a)), float(br(b))))
        klo = int(np.searchsorted(loc_lo, u, side="right"))
        khi = int(np.searchsorted(loc_lo, v, side="left"))
        inner = loc_lo[klo:khi]
        pre = np.asarray(br.invert(inner), dtype=float) if len(inner) else \
            np.empty(0)
        pre = np.sort(pre)
        pts = np.concatenate([[a], pre[(pre > a) & (pre < b)], [b]])
        mids = np.asarray(br(0.5 * (pts[:-1] + pts[1:])), dtype=float)
        tgt = locate(np.clip(mids, loc_lo[0], scheme.map.eta))
        rows.append(tgt.astype(np.int64))
        cols.append(np.full(len(tgt), j, dtype=np.int64))
        vals.append(np.diff(pts) / (b - a))

    # Y columns
    for j in range(ygrid.m):
        a, b = float(cell_lo[j]), float(cell_hi[j])
        for br in scheme.map.branches:
            pa, pb = max(a, br.lo), min(b, br.hi)
            if pb - pa > 1e-15:
                emit_interval_column(j, pa, pb, br)

    # refined tower columns
    for s in scheme.stacks:
        tower = scheme.map.branches[s.branch_index]
        for n in range(1, n_refs[s.sid] + 1):
            start, e = fine_index[(s.sid, n)]
            for k in range(len(e) - 1):
                emit_interval_column(start + k, float(e[k]), float(e[k + 1]),
                                     tower)

    # deep tower columns: pure shift, except onto the refined zone
    for s in scheme.stacks:
        tower = scheme.map.branches[s.branch_index]
        for n in range(n_refs[s.sid] + 1, N + 1):
            j = whole_index[(s.sid, n)]
            if n - 1 > n_refs[s.sid]:
                rows.append(np.array([whole_index[(s.sid, n - 1)]]))
                cols.append(np.array([j]))
                vals.append(np.array([1.0]))
            else:
                a, b = scheme.x_cell(n, s.sid)
                emit_interval_column(j, a, b, tower)

    rows.append(np.array([absorber]))
    cols.append(np.array([absorber]))
    vals.append(np.array([1.0]))

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    P = sp.coo_matrix((v, (r, c)), shape=(m, m)).tocsr()
    colsum = np.asarray(P.sum(axis=0)).ravel()
    if np.any(np.abs(colsum - 1.0) > 1e-8):
        worst = float(np.max(np.abs(colsum - 1.0)))
        raise ConvergenceError(f"operator columns deviate from 1 by {worst:.2e}")
    P = (P @ sp.diags(1.0 / colsum)).tocsr()

    mu = np.zeros(m)
    mu[:ygrid.m] = dens.integral(cell_lo[:ygrid.m], cell_hi[:ygrid.m])
    for s in scheme.stacks:
        for n in range(n_refs[s.sid] + 1, N + 1):
            mu[whole_index[(s.sid, n)]] = meas.tail_stack[s.sid][n + 1]
        # one pushforward-series pass over all refined edges of the stack
        edges = np.unique(np.concatenate(
            [fine_index[(s.sid, n)][1] for n in range(1, n_refs[s.sid] + 1)]))
        series = _fine_mu(scheme, dens, s, edges, series_cap)
        for n in range(1, n_refs[s.sid] + 1):
            start, e = fine_index[(s.sid, n)]
            i0 = np.searchsorted(edges, e[0])
            sub = series[i0:i0 + len(e) - 1].copy()
            total = meas.tail_stack[s.sid][n + 1]
            if np.sum(sub) > 0:
                sub *= total / np.sum(sub)
            mu[start:start + len(sub)] = sub
    mu[absorber] = 0.0

    return OperatorGrid(scheme, dens, N, w, max(n_refs.values()), P,
                        cell_lo, cell_hi, mu, kind, cell_stack, cell_level,
                        np.arange(ygrid.m), absorber, leak)


def _fine_mu(scheme, dens, s, edges, series_cap):
    """Pushforward-series mass of the refined subcells of one tower cell."""
    tower = scheme.map.branches[s.branch_index]
    E = np.asarray(edges, dtype=float)
    acc = np.zeros(len(E) - 1)
    W = E.copy()
    for _ in range(series_cap):
        for f in scheme.feeders_of(s.sid):
            br = scheme.map.branches[f.branch_index]
            rlo, rhi = br.range()
            y = np.asarray(br.law.invert(np.clip(W, rlo, rhi)), dtype=float)
            y = np.clip(y, br.lo, br.hi)
            seg = dens.integral(np.minimum(y[:-1], y[1:]),
                                np.maximum(y[:-1], y[1:]))
            acc += seg
        W = np.asarray(tower.law.invert(W), dtype=float)
    return acc


# ---------------------------------------------------------------------------
# iteration


@dataclass
class KrickebergProfile:
    """Per-step summaries of a_n * L^n 1_Y restricted to Y."""

    n: np.ndarray
    khat: np.ndarray          # a_n * mu-average over Y
    spread: np.ndarray        # (max - min) / mean of the Y profile
    alpha: float | None
    snapshots: dict = field(default_factory=dict)

    def cauchy_gap(self, n: int) -> float:
        """|khat_n / khat_{n/2} - 1|."""
        return abs(self.khat[n] / self.khat[n // 2] - 1.0)


def iterate_masses(op: OperatorGrid, n_max: int, observables=None,
                   snapshot_ns=(), want_profile=True):
    """Evolve the Y mass vector n_max steps, recording summaries on the fly.

    Returns (profile, correlations) where correlations maps each observable
    name to the array c_n = sum_i g_i M_n,i, n = 0..n_max.
    """
    observables = observables or {}
    M = np.zeros(op.m)
    M[op.y_cells] = op.mu[op.y_cells]
    a = op.a(np.arange(n_max + 1))
    khat = np.zeros(n_max + 1)
    spread = np.zeros(n_max + 1)
    corr = {k: np.zeros(n_max + 1) for k in observables}
    snaps = {}
    muY = op.mu[op.y_cells]
    snapshot_ns = set(int(x) for x in snapshot_ns)

    def record(n, M):
        my = M[op.y_cells]
        tot = float(np.sum(my))
        khat[n] = a[n] * tot
        v = my / muY
        spread[n] = float((v.max() - v.min()) / tot) if tot > 0 else np.inf
        for k, g in observables.items():
            corr[k][n] = float(np.dot(g, M))
        if n in snapshot_ns:
            snaps[n] = a[n] * v

    record(0, M)
    for n in range(1, n_max + 1):
        M = op.P @ M
        record(n, M)
    prof = None
    if want_profile:
        prof = KrickebergProfile(np.arange(n_max + 1), khat, spread,
                                 op.alpha, snaps)
    return prof, corr


def krickeberg_profile(op: OperatorGrid, n_max: int,
                       snapshot_ns=()) -> KrickebergProfile:
    prof, _ = iterate_masses(op, n_max, snapshot_ns=snapshot_ns)
    return prof


def correlation(op: OperatorGrid, g: np.ndarray, n_max: int) -> np.ndarray:
    """c_n = integral over Y of g o f^n dmu, n = 0..n_max."""
    _, corr = iterate_masses(op, n_max, observables={"g": np.asarray(g)},
                             want_profile=False)
    return corr["g"]


def profile_to_csv(prof: KrickebergProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "khat", "spread"])
        for n, k, s in zip(prof.n, prof.khat, prof.spread):
            w.writerow([int(n), repr(float(k)), repr(float(s))])


def correlation_to_csv(c: np.ndarray, alpha, path) -> None:
    a = a_seq(alpha, np.arange(len(c)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "c_n", "a_n_c_n"])
        for n, (cv, av) in enumerate(zip(c, a)):
            w.writerow([n, repr(float(cv)), repr(float(cv * av))])
