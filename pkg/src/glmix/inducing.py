"""First-hit structure of a map relative to its inducing set Y.

The set X minus Y decomposes into "stacks": one-sided towers of cells
X_{n,p} accumulating at a neutral fixed point (or at 0 for the all-linear
control family, where the tower drains geometrically).  Each stack is
driven by a single monotone tower branch, so the cell boundaries are the
inverse orbit x_0, x_1 = f^-1(x_0), ... of an anchor point on the boundary
of Y.  Uniformly expanding branches whose range covers the fixed point
feed the stack; their preimages of the cells X_{n-1,p} are the sets
Y_{n,r} inside Y.

Everything here is deterministic and cached; tails grow lazily under a
lock so concurrent readers see a consistent prefix.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .maps import Branch, MapModel, OutOfRangeError

__all__ = [
    "InducingScheme", "Stack", "Feeder", "TailTable", "build_scheme",
    "first_hit", "induced_map", "tail_sequence", "cell_measure_leb",
    "CapExceeded", "SchemeError",
]

_EDGE_TOL = 1e-9


class SchemeError(RuntimeError):
    """Construction of the inducing structure failed."""


class CapExceeded(RuntimeError):
    """The first-hit time exceeds the iteration cap."""

    def __init__(self, cap: int):
        super().__init__(f"no hit within {cap} iterations")
        self.cap = cap


@dataclass(frozen=True)
class Stack:
    """One-sided tower of cells accumulating at a (possibly pseudo) fixed point."""

    sid: int
    p: int                  # fixed-point index, 1-based
    xi: float
    side: int               # +1: cells to the right of xi, -1: mirrored
    alpha: float | None     # None for the geometric control family
    b: float | None
    branch_index: int       # tower branch
    t0: float               # Y boundary adjacent to the stack region
    x0: float               # tail anchor, x0 = f(t0)


@dataclass(frozen=True)
class Feeder:
    """An expanding branch whose range covers a stack's fixed point."""

    rid: int
    branch_index: int
    sid: int
    p: int
    zeta: float             # accumulation point of the cells Y_{n,r}


@dataclass
class TailTable:
    """Inverse-orbit tail of one stack with fitted asymptotic coefficients."""

    p: int
    side: int
    alpha: float | None
    b: float | None
    x: np.ndarray            # x[0..N], x[n] = f^-n(x0)
    dist: np.ndarray         # |x[n] - xi|
    bprime_est: float        # x_N * N**alpha
    bdprime_est: float       # (x_{N-1} - x_N) * N**(alpha+1)

    @property
    def bprime(self) -> float | None:
        """Analytic alpha**alpha * b**(-alpha) when the stack is neutral."""
        if self.alpha is None or self.b is None:
            return None
        return self.alpha ** self.alpha * self.b ** (-self.alpha)

    @property
    def bdprime(self) -> float | None:
        if self.alpha is None or self.b is None:
            return None
        return self.alpha ** (self.alpha + 1.0) * self.b ** (-self.alpha)


class InducingScheme:
    """Inducing set, stacks, feeders and lazily grown cell boundaries."""

    def __init__(self, model: MapModel, Y, stacks, feeders):
        self.map = model
        self.Y: tuple[tuple[float, float], ...] = tuple(Y)
        self.stacks: tuple[Stack, ...] = tuple(stacks)
        self.feeders: tuple[Feeder, ...] = tuple(feeders)
        self._lock = threading.RLock()
        self._tails: list[np.ndarray] = [
            np.array([s.x0], dtype=float) for s in self.stacks]
        self._yedges: list[np.ndarray] = [
            np.empty(0, dtype=float) for _ in self.feeders]
        self._clip_depth: list[int | None] = [None] * len(self.feeders)
        self.n0 = self._detect_n0()

    # -- basic geometry ----------------------------------------------------

    @property
    def q(self) -> int:
        return max((s.p for s in self.stacks), default=0)

    def leb_Y(self) -> float:
        return float(sum(hi - lo for lo, hi in self.Y))

    def in_Y(self, x: float, tol: float = 0.0) -> bool:
        return any(lo - tol <= x <= hi + tol for lo, hi in self.Y)

    def region(self, sid: int) -> tuple[float, float]:
        s = self.stacks[sid]
        a, b = s.xi, s.t0
        return (a, b) if a <= b else (b, a)

    def landing(self, sid: int) -> tuple[float, float]:
        """f(X_{1,p}) for this stack: the sub-interval of Y the tower exits into."""
        x = self.tail(sid, 1)
        a, b = float(x[1]), float(x[0])
        return (a, b) if a <= b else (b, a)

    def stack_for(self, p: int, side: int | None = None) -> Stack:
        cands = [s for s in self.stacks if s.p == p
                 and (side is None or s.side == side)]
        if not cands:
            raise KeyError(f"no stack for p={p}, side={side}")
        if len(cands) > 1:
            raise KeyError(f"fixed point p={p} is two-sided, pass side=+1 or -1")
        return cands[0]

    def feeders_of(self, sid: int) -> list[Feeder]:
        return [f for f in self.feeders if f.sid == sid]

    # -- tails and cells ----------------------------------------------------

    def tail(self, sid: int, N: int) -> np.ndarray:
        """Anchor orbit x[0..N] of the stack (read-only view)."""
        tl = self._tails[sid]
        if len(tl) <= N:
            with self._lock:
                tl = self._tails[sid]
                if len(tl) <= N:
                    tl = self._grow_tail(sid, N)
        return tl[:N + 1]

    def _grow_tail(self, sid: int, N: int) -> np.ndarray:
        s = self.stacks[sid]
        law = self.map.branches[s.branch_index].law
        old = self._tails[sid]
        target = max(N + 1, 2 * len(old))
        out = np.empty(target, dtype=float)
        out[:len(old)] = old
        x = float(old[-1])
        for k in range(len(old), target):
            x = float(law.invert(x))
            out[k] = x
        self._tails[sid] = out
        return out

    def tail_distance(self, sid: int, N: int) -> np.ndarray:
        s = self.stacks[sid]
        return np.abs(self.tail(sid, N) - s.xi)

    def x_cell(self, n: int, sid: int) -> tuple[float, float]:
        """Cell X_{n,p} of the stack, n >= 1."""
        if n < 1:
            raise KeyError("cells start at n = 1")
        x = self.tail(sid, n + 1)
        a, b = float(x[n + 1]), float(x[n])
        return (a, b) if a <= b else (b, a)

    def y_edges(self, rid: int, N: int) -> np.ndarray:
        """Preimages e[0..N] of the tail under the feeder branch.

        Y_{n,r} is the interval between e[n-1] and e[n] for n >= 2; tail
        values outside the branch range are clamped, which empties the
        shallow cells of a short branch.
        """
        e = self._yedges[rid]
        if len(e) <= N:
            with self._lock:
                e = self._yedges[rid]
                if len(e) <= N:
                    e = self._grow_yedges(rid, N)
        return e[:N + 1]

    def _grow_yedges(self, rid: int, N: int) -> np.ndarray:
        f = self.feeders[rid]
        br = self.map.branches[f.branch_index]
        rlo, rhi = br.range()
        x = self.tail(f.sid, max(N, 2 * max(len(self._yedges[rid]) - 1, 1)))
        clipped = np.clip(x, rlo, rhi)
        if self._clip_depth[rid] is None:
            inside = (x >= rlo - 1e-13) & (x <= rhi + 1e-13)
            run = np.nonzero(~inside)[0]
            self._clip_depth[rid] = int(run[-1]) + 1 if len(run) else 0
        e = np.asarray(br.invert(clipped), dtype=float)
        self._yedges[rid] = e
        return e

    def y_cell(self, n: int, rid: int) -> tuple[float, float] | None:
        """Cell Y_{n,r}, n >= 2; None when clipped away entirely."""
        if n < 2:
            raise KeyError("feeder cells start at n = 2")
        e = self.y_edges(rid, n)
        a, b = float(e[n - 1]), float(e[n])
        if a > b:
            a, b = b, a
        return None if b - a <= 0.0 else (a, b)

    def clip_depth(self, rid: int) -> int:
        """Deepest tail index clamped by the feeder branch range (0 if none)."""
        self.y_edges(rid, 8)
        return self._clip_depth[rid]

    def _detect_n0(self) -> int:
        n0 = 1
        for f in self.feeders:
            br = self.map.branches[f.branch_index]
            depth = 8
            while True:
                self.y_edges(f.rid, depth)
                k = self._clip_depth[f.rid]
                if k < depth:
                    break
                depth *= 2
                if depth > 100000:
                    raise SchemeError(
                        f"feeder {f.rid} never maps onto full cells")
            n0 = max(n0, k)
            # endpoint match at the first unclipped level
            j = max(k + 1, 2)
            e = self.y_edges(f.rid, j)
            x = self.tail(f.sid, j)
            for m in (j - 1, j):
                if abs(float(br(e[m])) - x[m]) > _EDGE_TOL:
                    raise SchemeError(
                        f"feeder {f.rid} misses cell endpoint at level {m}")
        return n0

    # -- tau = 1 pieces ------------------------------------------------------

    def tau1_pieces(self) -> list[tuple[int, float, float]]:
        """Monotone pieces (branch, lo, hi) of Y on which f returns to Y."""
        pieces = []
        for ib, br in enumerate(self.map.branches):
            for ylo, yhi in self.Y:
                lo, hi = max(br.lo, ylo), min(br.hi, yhi)
                if hi - lo <= 1e-14:
                    continue
                a, b = float(br(lo)), float(br(hi))
                ia, iz = (a, b) if a <= b else (b, a)
                for clo, chi in self.Y:
                    u, v = max(ia, clo), min(iz, chi)
                    if v - u <= 1e-14:
                        continue
                    pa, pb = sorted((float(br.invert(u)), float(br.invert(v))))
                    pa, pb = max(pa, lo), min(pb, hi)
                    if pb - pa > 1e-14:
                        pieces.append((ib, pa, pb))
        return pieces


# ---------------------------------------------------------------------------
# construction


def build_scheme(model: MapModel) -> InducingScheme:
    """Choose the inducing set for the family and assemble the structure."""
    nps = model.neutral_points()
    cuts = _discontinuities(model)
    if len(nps) <= 1:
        Y = _single_stack_Y(model)
    elif len(nps) == 2 and not cuts & {round(n[0].xi, 15) for n in nps} and \
            abs(nps[0][0].xi) < 1e-12 and abs(nps[1][0].xi - 1.0) < 1e-12:
        Y = _period2_Y(model)
    else:
        Y = _gap_Y(model)
    stacks = _make_stacks(model, Y)
    feeders = _make_feeders(model, stacks)
    return InducingScheme(model, Y, stacks, feeders)


def _discontinuities(model: MapModel) -> set[float]:
    out = set()
    for a, b in zip(model.branches, model.branches[1:]):
        if abs(float(a(a.hi)) - float(b(b.lo))) > 1e-9:
            out.add(round(b.lo, 15))
    return out


def _single_stack_Y(model: MapModel):
    eta1 = model.branches[0].hi
    nps = model.neutral_points()
    if nps:
        # the tower is the block of neutral branches at 0
        idx = [i for i, br in enumerate(model.branches) if br.fp is not None]
        eta1 = model.branches[max(idx)].hi
    return ((eta1, model.eta),)


def _period2_Y(model: MapModel):
    f0, f1 = model.branches[0], model.branches[-1]

    def g(x):
        return float(f1(float(f0(x)))) - x

    lo = float(f0.invert(f1.lo)) + 1e-13
    hi = f0.hi - 1e-13
    if g(lo) >= 0.0 or g(hi) <= 0.0:
        raise SchemeError("period-2 orbit bracket has no sign change")
    xstar = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16)
    fx = float(f0(xstar))
    if abs(float(f1(fx)) - xstar) > 1e-10:
        raise SchemeError("period-2 orbit verification failed")
    return ((xstar, fx),)


def _gap_Y(model: MapModel):
    comps = []
    for i, br in enumerate(model.branches[:-1]):
        nxt = model.branches[i + 1]
        c = br.hi
        if abs(float(br(c)) - float(nxt(c))) <= 1e-9:
            continue  # continuous glue inside a two-sided tangency
        la = float(br.invert(c))
        rb = float(nxt.invert(c))
        comps.append((la, rb))
    if not comps:
        raise SchemeError("no inducing gaps found")
    return tuple(comps)


def _make_stacks(model: MapModel, Y) -> list[Stack]:
    bounds = sorted({b for comp in Y for b in comp})
    stacks: list[Stack] = []
    nps = model.neutral_points()
    points = [(tag.xi, tag.alpha, tag.b) for tag, _ in nps]
    if not points:
        points = [(0.0, None, None)]  # geometric control tower
    for p, (xi, alpha, b) in enumerate(sorted(points), start=1):
        for side in (1, -1):
            t0 = _nearest_bound(bounds, xi, side)
            if t0 is None:
                continue
            mid = 0.5 * (xi + t0)
            if any(lo <= mid <= hi for lo, hi in Y):
                continue  # no stack region on this side
            ib = model.branch_index_at(mid)
            x0 = float(model.branches[ib](t0))
            sid = len(stacks)
            stacks.append(Stack(sid, p, xi, side, alpha, b, ib, t0, x0))
    if not stacks:
        raise SchemeError("inducing set leaves no stack region")
    return stacks


def _nearest_bound(bounds, xi, side):
    if side > 0:
        cands = [b for b in bounds if b > xi + 1e-13]
        return min(cands) if cands else None
    cands = [b for b in bounds if b < xi - 1e-13]
    return max(cands) if cands else None


def _make_feeders(model: MapModel, stacks) -> list[Feeder]:
    feeders: list[Feeder] = []
    for s in stacks:
        for ib, br in enumerate(model.branches):
            if br.lo - 1e-12 <= s.xi <= br.hi + 1e-12:
                continue  # fixed point in the domain: tower, not feeder
            rlo, rhi = br.range()
            if s.side > 0:
                ok = rlo <= s.xi + 1e-12 and rhi > s.xi + 1e-12
            else:
                ok = rhi >= s.xi - 1e-12 and rlo < s.xi - 1e-12
            if not ok:
                continue
            zeta = float(br.invert(min(max(s.xi, rlo), rhi)))
            feeders.append(Feeder(len(feeders), ib, s.sid, s.p, zeta))
    if not feeders:
        raise SchemeError("no expanding branch feeds the stacks")
    return feeders


# ---------------------------------------------------------------------------
# module-level operations


def first_hit(scheme: InducingScheme, x: float, cap: int = 10 ** 6) -> int:
    """Smallest n >= 1 with f^n(x) in Y; raises CapExceeded past the cap."""
    for n in range(1, cap + 1):
        x = scheme.map(x)
        if scheme.in_Y(x):
            return n
    raise CapExceeded(cap)


def induced_map(scheme: InducingScheme, y: float,
                cap: int = 10 ** 6) -> tuple[float, int]:
    """First-return value (f^tau(y), tau) for y in Y."""
    if not scheme.in_Y(y, tol=1e-12):
        raise OutOfRangeError(f"{y} is not in the inducing set")
    x = y
    for n in range(1, cap + 1):
        x = scheme.map(x)
        if scheme.in_Y(x):
            return x, n
    raise CapExceeded(cap)


def tail_sequence(scheme: InducingScheme, p: int, N: int,
                  side: int | None = None) -> TailTable:
    """Inverse-orbit tail x_n = f^-n(x_0) of a stack with fitted coefficients."""
    if N < 10:
        raise ValueError("N must be at least 10")
    s = scheme.stack_for(p, side)
    x = scheme.tail(s.sid, N)
    d = np.abs(x - s.xi)
    if s.alpha is not None:
        bp = float(d[N]) * N ** s.alpha
        bdp = float(d[N - 1] - d[N]) * N ** (s.alpha + 1.0)
    else:
        bp = bdp = float("nan")
    return TailTable(p=s.p, side=s.side, alpha=s.alpha, b=s.b,
                     x=x.copy(), dist=d, bprime_est=bp, bdprime_est=bdp)


def cell_measure_leb(scheme: InducingScheme, cell: tuple) -> float:
    """Lebesgue measure of an enumerated cell ("X", n, sid) or ("Y", n, rid)."""
    kind, n, idx = cell
    if kind == "X":
        lo, hi = scheme.x_cell(n, idx)
        return hi - lo
    if kind == "Y":
        c = scheme.y_cell(n, idx)
        if c is None:
            raise KeyError(f"cell {cell} is empty")
        return c[1] - c[0]
    raise KeyError(f"unknown cell kind {kind!r}")


def cells_to_csv(scheme: InducingScheme, N: int, path) -> None:
    """Dump enumerated cells as CSV rows (kind, n, index, left, right, leb)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "n", "index", "left", "right", "leb"])
        for s in scheme.stacks:
            for n in range(1, N + 1):
                lo, hi = scheme.x_cell(n, s.sid)
                w.writerow(["X", n, s.sid, repr(lo), repr(hi), repr(hi - lo)])
        for f in scheme.feeders:
            for n in range(2, N + 1):
                c = scheme.y_cell(n, f.rid)
                if c is not None:
                    w.writerow(["Y", n, f.rid, repr(c[0]), repr(c[1]),
                                repr(c[1] - c[0])])
