"""Parametric interval map families with exact derivatives and safe inverses.

A map is an ordered list of monotone branches tiling [0, 1].  Branch laws
are restricted to three closed-form payloads (power-law perturbations of
the identity, affine pieces, Moebius pieces) so that derivatives are exact
and inversion reduces to the bracketed kernels in :mod:`glmix.roots`.

Built-in families
-----------------
``lsv``        two full branches, neutral fixed point at 0, b = 2**(1/alpha)
``lsv2``       two-branch generalisation with a short second branch
``qbranch``    one neutral branch plus Q uniformly expanding branches
``pm_mod1``    x + b x**(1+1/alpha) mod 1, b >= 1
``farey``      x/(1-x) and (1-x)/x, orientation-reversing second branch
``two_sided``  two neutral fixed points at 0 and 1 (double tangency)
``thaler_d``   d >= 2 equally sticky neutral fixed points, full branches
``linear``     all-linear full-branch control family (finite measure)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .roots import solve_power, invert_monotone

__all__ = [
    "Branch", "MapModel", "NeutralTag", "make_family", "inverse_branch",
    "adler_constant", "family_table", "ConstructionError", "OutOfRangeError",
]

_INV_TOL = 1e-14


class ConstructionError(ValueError):
    """Family parameters violate a documented range or invariant."""


class OutOfRangeError(ValueError):
    """A value lies outside the range of the branch being inverted."""


# ---------------------------------------------------------------------------
# branch laws


@dataclass(frozen=True)
class PowerLaw:
    """x + side*b*u**(1+1/alpha) + side*c*u**(1+kappa) + shift, u = side*(x-xi).

    ``side=+1`` perturbs upward right of the anchor ``xi``, ``side=-1``
    mirrors the formula left of it.  ``shift`` realises mod-1 pieces.
    """

    xi: float
    b: float
    alpha: float
    side: int = 1
    shift: float = 0.0
    c: float = 0.0
    kappa: float = 0.0

    @property
    def beta(self) -> float:
        return 1.0 + 1.0 / self.alpha

    def __call__(self, x):
        u = self.side * (np.asarray(x, dtype=float) - self.xi)
        out = x + self.side * (self.b * u ** self.beta) + self.shift
        if self.c:
            out = out + self.side * self.c * u ** (1.0 + self.kappa)
        return out

    def deriv(self, x):
        u = self.side * (np.asarray(x, dtype=float) - self.xi)
        out = 1.0 + self.b * self.beta * u ** (self.beta - 1.0)
        if self.c:
            out = out + self.c * (1.0 + self.kappa) * u ** self.kappa
        return out

    def deriv2(self, x):
        u = self.side * (np.asarray(x, dtype=float) - self.xi)
        beta = self.beta
        out = self.b * beta * (beta - 1.0) * u ** (beta - 2.0)
        if self.c:
            k = self.kappa
            out = out + self.c * (1.0 + k) * k * u ** (k - 1.0)
        return self.side * out

    def invert(self, y):
        t = self.side * (np.asarray(y, dtype=float) - self.shift - self.xi)
        v = solve_power(t, self.b, self.beta, self.c,
                        1.0 + self.kappa if self.c else 0.0)
        return self.xi + self.side * v


@dataclass(frozen=True)
class Affine:
    a: float
    d: float

    def __call__(self, x):
        return self.a * np.asarray(x, dtype=float) + self.d

    def deriv(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.a)

    def deriv2(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def invert(self, y):
        return (np.asarray(y, dtype=float) - self.d) / self.a


@dataclass(frozen=True)
class Mobius:
    """(a x + b) / (c x + d); the pole must lie outside the branch domain."""

    a: float
    b: float
    c: float
    d: float

    def _det(self) -> float:
        return self.a * self.d - self.b * self.c

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return (self.a * x + self.b) / (self.c * x + self.d)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return self._det() / (self.c * x + self.d) ** 2

    def deriv2(self, x):
        x = np.asarray(x, dtype=float)
        return -2.0 * self.c * self._det() / (self.c * x + self.d) ** 3

    def invert(self, y):
        y = np.asarray(y, dtype=float)
        return (self.d * y - self.b) / (self.a - self.c * y)


@dataclass(frozen=True)
class NeutralTag:
    """Fixed-point data of a neutral branch: |f(x)-x| ~ b |x-xi|**(1+1/alpha)."""

    xi: float
    alpha: float
    b: float
    kappa: float | None = None

    @property
    def kappa_prime(self) -> float:
        """Reported second-order exponent alpha*kappa - 1, clipped to its
        admissible window (kappa in (1/alpha, 1 + 1/alpha])."""
        kap = self.kappa if self.kappa is not None else 1.0 + 1.0 / self.alpha
        kap = min(max(kap, 1.0 / self.alpha), 1.0 + 1.0 / self.alpha)
        return self.alpha * kap - 1.0


@dataclass(frozen=True)
class Branch:
    """One monotone branch of an interval map."""

    lo: float
    hi: float
    law: PowerLaw | Affine | Mobius
    fp: NeutralTag | None = None
    rho: float = 1.0

    @property
    def kind(self) -> str:
        return "neutral" if self.fp is not None else "uniform"

    @property
    def orientation(self) -> int:
        return 1 if self.law(self.hi) >= self.law(self.lo) else -1

    def __call__(self, x):
        return self.law(x)

    def deriv(self, x):
        return self.law.deriv(x)

    def deriv2(self, x):
        return self.law.deriv2(x)

    def range(self) -> tuple[float, float]:
        a, b = float(self.law(self.lo)), float(self.law(self.hi))
        return (a, b) if a <= b else (b, a)

    def invert(self, y):
        """Preimage of y under this branch; bracketed, never leaves the domain."""
        rlo, rhi = self.range()
        y_arr = np.asarray(y, dtype=float)
        slack = 1e-12 * max(1.0, abs(rlo), abs(rhi))
        if np.any(y_arr < rlo - slack) or np.any(y_arr > rhi + slack):
            raise OutOfRangeError(
                f"value outside branch range [{rlo:.17g}, {rhi:.17g}]")
        x = self.law.invert(np.clip(y_arr, rlo, rhi))
        x = np.clip(x, self.lo, self.hi)
        resid = np.max(np.abs(self.law(x) - y_arr))
        if resid > _INV_TOL * max(1.0, float(np.max(np.abs(y_arr)))):
            raise OutOfRangeError(f"branch inversion residual {resid:.3e}")
        return float(x) if np.ndim(y) == 0 else x

    def contains(self, x, tol=0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol


def inverse_branch(branch: Branch, y: float) -> float:
    """Preimage of ``y`` under one branch (bracketed root find)."""
    return branch.invert(y)


# ---------------------------------------------------------------------------
# map model


@dataclass(frozen=True)
class MapModel:
    """Piecewise-monotone self map of X = [0, eta] with tagged branches."""

    branches: tuple[Branch, ...]
    eta: float
    family: str
    params: dict = field(default_factory=dict)

    def branch_index_at(self, x: float) -> int:
        los = [br.lo for br in self.branches]
        i = int(np.searchsorted(los, x, side="right")) - 1
        return min(max(i, 0), len(self.branches) - 1)

    def __call__(self, x: float) -> float:
        return float(self.branches[self.branch_index_at(x)](x))

    def apply(self, x: float) -> tuple[float, int]:
        i = self.branch_index_at(x)
        return float(self.branches[i](x)), i

    def neutral_points(self) -> list[tuple[NeutralTag, list[int]]]:
        """Neutral fixed points with the indices of the branches tangent there."""
        seen: dict[float, tuple[NeutralTag, list[int]]] = {}
        for i, br in enumerate(self.branches):
            if br.fp is None:
                continue
            key = br.fp.xi
            if key in seen:
                seen[key][1].append(i)
            else:
                seen[key] = (br.fp, [i])
        return [seen[k] for k in sorted(seen)]


# ---------------------------------------------------------------------------
# validation


def _check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ConstructionError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


def _validate(model: MapModel, n_grid: int = 257) -> MapModel:
    brs = model.branches
    if abs(brs[0].lo) > 1e-12 or abs(brs[-1].hi - 1.0) > 1e-12:
        raise ConstructionError("branch domains must start at 0 and end at 1")
    for a, b in zip(brs, brs[1:]):
        if abs(a.hi - b.lo) > 1e-12:
            raise ConstructionError("branch domains must tile [0, 1]")
    for br in brs:
        if br.hi - br.lo <= 1e-12:
            raise ConstructionError("degenerate branch domain")
        xs = np.linspace(br.lo, br.hi, n_grid)
        vals = np.asarray(br(xs), dtype=float)
        if not np.all(br.orientation * np.diff(vals) > 0):
            raise ConstructionError("branch is not strictly monotone")
        if br.kind == "uniform":
            if br.rho < 1.0:
                raise ConstructionError("uniform branch needs rho >= 1")
            d = np.abs(br.deriv(xs))
            if np.min(d) < br.rho * (1.0 - 1e-9):
                raise ConstructionError(
                    f"uniform branch violates |f'| >= {br.rho}")
        else:
            _check_neutral_asymptotics(br)
    # invariance of X = [0, eta]
    xs = np.linspace(0.0, model.eta, 1001)[1:-1]
    fx = np.array([model(float(x)) for x in xs])
    if np.any(fx > model.eta + 1e-10) or np.any(fx < -1e-10):
        raise ConstructionError("map does not send [0, eta] into itself")
    return model


def _check_neutral_asymptotics(br: Branch) -> None:
    fp = br.fp
    span = br.hi - br.lo
    sign = 1 if abs(br.lo - fp.xi) < abs(br.hi - fp.xi) else -1
    beta = 1.0 + 1.0 / fp.alpha
    floor = 1e-11 * max(1.0, abs(fp.xi))
    for u in (1e-3 * span, 1e-5 * span):
        x = fp.xi + sign * u
        lead = fp.b * u ** beta
        if lead > floor:
            gap = abs(float(br(x)) - x) / lead
            if abs(gap - 1.0) > 0.05:
                raise ConstructionError(
                    f"neutral tangency mismatch at xi={fp.xi}: {gap:.4f}")
        dlead = fp.b * beta * u ** (1.0 / fp.alpha)
        if dlead > floor:
            dgap = (abs(float(br.deriv(x))) - 1.0) / dlead
            if abs(dgap - 1.0) > 0.05:
                raise ConstructionError(
                    f"neutral derivative mismatch at xi={fp.xi}: {dgap:.4f}")


# ---------------------------------------------------------------------------
# families


def _full_affine(lo: float, hi: float) -> Branch:
    a = 1.0 / (hi - lo)
    return Branch(lo, hi, Affine(a, -lo * a), rho=a)


def _lsv(alpha) -> MapModel:
    alpha = _check_alpha(alpha)
    b = 2.0 ** (1.0 / alpha)
    brs = (
        Branch(0.0, 0.5, PowerLaw(0.0, b, alpha),
               fp=NeutralTag(0.0, alpha, b)),
        Branch(0.5, 1.0, Affine(2.0, -1.0), rho=2.0),
    )
    return MapModel(brs, 1.0, "lsv", {"alpha": alpha, "b": b})


def _lsv2(alpha, b=None, eta1=0.5, eta=None) -> MapModel:
    alpha = _check_alpha(alpha)
    eta1 = float(eta1)
    if not 0.0 < eta1 < 1.0:
        raise ConstructionError("eta1 must lie in (0, 1)")
    beta = 1.0 + 1.0 / alpha
    if b is None:
        eta = 1.0 if eta is None else float(eta)
        b = (eta - eta1) / eta1 ** beta
    else:
        b = float(b)
        eta = eta1 + b * eta1 ** beta
    if b <= 0.0:
        raise ConstructionError("b must be positive")
    if eta > 1.0 + 1e-12:
        raise ConstructionError(f"f0(eta1) = {eta} exceeds 1")
    if eta <= eta1 * (2.0 - eta1) + 1e-12:
        raise ConstructionError("eta too small: second branch cannot return to Y")
    a = 1.0 / (1.0 - eta1)
    brs = (
        Branch(0.0, eta1, PowerLaw(0.0, b, alpha),
               fp=NeutralTag(0.0, alpha, b)),
        Branch(eta1, 1.0, Affine(a, -eta1 * a), rho=a),
    )
    return MapModel(brs, eta, "lsv2",
                    {"alpha": alpha, "b": b, "eta1": eta1, "eta": eta})


def _qbranch(alpha, cuts, slopes=None) -> MapModel:
    alpha = _check_alpha(alpha)
    cuts = [float(c) for c in cuts]
    if len(cuts) < 3 or abs(cuts[0]) > 1e-12 or abs(cuts[-1] - 1.0) > 1e-12:
        raise ConstructionError("cuts must run from 0 to 1 with Q >= 1 interior points")
    if any(b - a <= 1e-12 for a, b in zip(cuts, cuts[1:])):
        raise ConstructionError("cut points must be strictly increasing")
    beta = 1.0 + 1.0 / alpha
    eta1 = cuts[1]
    b = (1.0 - eta1) / eta1 ** beta
    brs = [Branch(0.0, eta1, PowerLaw(0.0, b, alpha),
                  fp=NeutralTag(0.0, alpha, b))]
    q = len(cuts) - 2
    for r in range(1, q + 1):
        lo, hi = cuts[r], cuts[r + 1]
        s = 1.0 / (hi - lo) if slopes is None else float(slopes[r - 1])
        if s <= 1.0:
            raise ConstructionError(f"slope of branch {r} must exceed 1")
        if s * (hi - lo) > 1.0 + 1e-12:
            raise ConstructionError(f"branch {r} overshoots [0, 1]")
        brs.append(Branch(lo, hi, Affine(s, -lo * s), rho=s))
    last = brs[-1]
    if last.lo + last.lo / last.rho >= 1.0:
        raise ConstructionError("last branch cannot reach back across Y")
    return MapModel(tuple(brs), 1.0, "qbranch",
                    {"alpha": alpha, "b": b, "cuts": tuple(cuts),
                     "slopes": None if slopes is None else tuple(slopes)})


def _pm_mod1(alpha, b) -> MapModel:
    alpha = _check_alpha(alpha)
    b = float(b)
    if b < 1.0:
        raise ConstructionError("pm_mod1 needs b >= 1")
    beta = 1.0 + 1.0 / alpha
    nb = math.ceil(b)
    cuts = [0.0]
    for r in range(1, nb + 1):
        cuts.append(solve_power(float(r), b, beta))
    if cuts[-1] < 1.0 - 1e-12:
        cuts.append(1.0)
    else:
        cuts[-1] = 1.0
    brs = []
    for r, (lo, hi) in enumerate(zip(cuts, cuts[1:])):
        law = PowerLaw(0.0, b, alpha, shift=-float(r))
        if r == 0:
            brs.append(Branch(lo, hi, law, fp=NeutralTag(0.0, alpha, b)))
        else:
            brs.append(Branch(lo, hi, law, rho=float(law.deriv(lo))))
    return MapModel(tuple(brs), 1.0, "pm_mod1",
                    {"alpha": alpha, "b": b, "cuts": tuple(cuts)})


def _farey() -> MapModel:
    brs = (
        Branch(0.0, 0.5, Mobius(1.0, 0.0, -1.0, 1.0),
               fp=NeutralTag(0.0, 1.0, 1.0)),
        Branch(0.5, 1.0, Mobius(-1.0, 1.0, 1.0, 0.0), rho=1.0),
    )
    return MapModel(brs, 1.0, "farey", {"alpha": 1.0, "b": 1.0})


def _two_sided(alpha=0.5) -> MapModel:
    alpha = _check_alpha(alpha)
    beta = 1.0 + 1.0 / alpha
    b = 2.0 ** (beta - 1.0)
    brs = (
        Branch(0.0, 0.5, PowerLaw(0.0, b, alpha, side=1),
               fp=NeutralTag(0.0, alpha, b)),
        Branch(0.5, 1.0, PowerLaw(1.0, b, alpha, side=-1),
               fp=NeutralTag(1.0, alpha, b)),
    )
    return MapModel(brs, 1.0, "two_sided", {"alpha": alpha, "b": b})


def _thaler_d(d, alpha, cuts=None) -> MapModel:
    d = int(d)
    alpha = _check_alpha(alpha)
    if d < 2:
        raise ConstructionError("thaler_d needs d >= 2")
    if d == 2 and cuts is None:
        m = _two_sided(alpha)
        return MapModel(m.branches, 1.0, "thaler_d",
                        {"d": 2, "alpha": alpha, "b": m.params["b"]})
    beta = 1.0 + 1.0 / alpha
    cuts = [k / d for k in range(d + 1)] if cuts is None else [float(c) for c in cuts]
    if len(cuts) != d + 1:
        raise ConstructionError("need d+1 cut points")
    brs: list[Branch] = []
    bvals = []
    for k in range(1, d + 1):
        lo, hi = cuts[k - 1], cuts[k]
        if k == 1:
            b = (1.0 - hi) / hi ** beta
            brs.append(Branch(lo, hi, PowerLaw(0.0, b, alpha),
                              fp=NeutralTag(0.0, alpha, b)))
        elif k == d:
            b = lo / (1.0 - lo) ** beta
            brs.append(Branch(lo, hi, PowerLaw(1.0, b, alpha, side=-1),
                              fp=NeutralTag(1.0, alpha, b)))
        else:
            # place xi so that both half branches share the tangency coefficient
            def balance(xi, lo=lo, hi=hi):
                return (math.log(lo) - beta * math.log(xi - lo)
                        - math.log(1.0 - hi) + beta * math.log(hi - xi))
            span = hi - lo
            xi = invert_monotone(lambda s: -balance(s), 0.0,
                                 lo + 1e-9 * span, hi - 1e-9 * span)
            b = lo / (xi - lo) ** beta
            tag = NeutralTag(xi, alpha, b)
            brs.append(Branch(lo, xi, PowerLaw(xi, b, alpha, side=-1), fp=tag))
            brs.append(Branch(xi, hi, PowerLaw(xi, b, alpha, side=1), fp=tag))
        bvals.append(b)
    return MapModel(tuple(brs), 1.0, "thaler_d",
                    {"d": d, "alpha": alpha, "cuts": tuple(cuts),
                     "b": tuple(bvals)})


def _linear(cuts=(0.0, 0.5, 1.0)) -> MapModel:
    cuts = [float(c) for c in cuts]
    if len(cuts) < 3 or abs(cuts[0]) > 1e-12 or abs(cuts[-1] - 1.0) > 1e-12:
        raise ConstructionError("cuts must run from 0 to 1 with >= 2 pieces")
    brs = tuple(_full_affine(lo, hi) for lo, hi in zip(cuts, cuts[1:]))
    return MapModel(brs, 1.0, "linear", {"cuts": tuple(cuts)})


def _custom(branch_specs, eta=1.0) -> MapModel:
    brs = []
    for spec in branch_specs:
        spec = dict(spec)
        lo, hi = float(spec.pop("lo")), float(spec.pop("hi"))
        kind = spec.pop("type")
        fp = None
        if kind == "power":
            law = PowerLaw(
                xi=float(spec.get("xi", 0.0)), b=float(spec["b"]),
                alpha=_check_alpha(spec["alpha"]), side=int(spec.get("side", 1)),
                shift=float(spec.get("shift", 0.0)), c=float(spec.get("c", 0.0)),
                kappa=float(spec.get("kappa", 0.0)))
            if spec.get("neutral", law.shift == 0.0 and
                        (abs(law.xi - lo) < 1e-12 or abs(law.xi - hi) < 1e-12)):
                fp = NeutralTag(law.xi, law.alpha, law.b,
                                law.kappa if law.c else None)
        elif kind == "affine":
            law = Affine(float(spec["a"]), float(spec["d"]))
        elif kind == "mobius":
            law = Mobius(*(float(spec[k]) for k in "abcd"))
        else:
            raise ConstructionError(f"unknown branch type {kind!r}")
        rho = float(spec.get("rho", 1.0))
        brs.append(Branch(lo, hi, law, fp=fp, rho=rho))
    return MapModel(tuple(brs), float(eta), "custom", {})


_FAMILIES = {
    "lsv": _lsv,
    "lsv2": _lsv2,
    "qbranch": _qbranch,
    "pm_mod1": _pm_mod1,
    "farey": lambda: _farey(),
    "two_sided": _two_sided,
    "thaler_d": _thaler_d,
    "linear": _linear,
    "custom": _custom,
}


def make_family(tag: str, **params) -> MapModel:
    """Construct and validate one of the built-in map families."""
    try:
        builder = _FAMILIES[tag]
    except KeyError:
        raise ConstructionError(f"unknown family {tag!r}") from None
    return _validate(builder(**params))


def family_table() -> list[tuple[str, str, str]]:
    """Rows (name, parameters, notes) for the CLI listing."""
    return [
        ("lsv", "alpha in (0,1]",
         "two full branches, b = 2**(1/alpha), Y = [1/2, 1]"),
        ("lsv2", "alpha, b or eta, eta1",
         "short second branch allowed; f0(eta1) = eta, X = [0, eta]"),
        ("qbranch", "alpha, cuts, slopes?",
         "Q uniformly expanding branches all anchored at 0"),
        ("pm_mod1", "alpha, b >= 1",
         "x + b x**(1+1/alpha) mod 1; number of branches ceil(b)"),
        ("farey", "(none)",
         "alpha = 1 fixed; orientation-reversing second branch"),
        ("two_sided", "alpha in (0,1]",
         "neutral fixed points at 0 and 1; Y from the period-2 orbit"),
        ("thaler_d", "d >= 2, alpha, cuts?",
         "d equally sticky fixed points; Y = union of I_k minus f^-1 I_k"),
        ("linear", "cuts",
         "all-linear full-branch control family, Lebesgue invariant"),
    ]


# ---------------------------------------------------------------------------
# distortion


def adler_constant(model: MapModel, delta: float = 0.0) -> float:
    """Supremum of |f''| / f'**2 over the branches, sampled densely.

    Endpoint neighbourhoods of radius ``delta`` are excluded only where the
    second derivative blows up there, so the estimate is monotone
    nonincreasing in ``delta``.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    best = 0.0
    for br in model.branches:
        span = br.hi - br.lo
        lo, hi = br.lo, br.hi
        for end in (br.lo, br.hi):
            if _second_deriv_unbounded(br, end):
                if end == br.lo:
                    lo = min(br.lo + delta, br.hi - 1e-12 * span)
                else:
                    hi = max(br.hi - delta, br.lo + 1e-12 * span)
        xs = np.linspace(lo, hi, 4001)
        # geometric refinement toward the endpoints catches boundary suprema
        offs = span * np.geomspace(1e-12, 0.25, 40)
        xs = np.concatenate([xs, np.clip(lo + offs, lo, hi),
                             np.clip(hi - offs, lo, hi)])
        g = np.abs(br.deriv2(xs)) / np.asarray(br.deriv(xs)) ** 2
        best = max(best, float(np.max(g)))
    return best


def _second_deriv_unbounded(br: Branch, end: float) -> bool:
    span = br.hi - br.lo
    sign = 1.0 if end == br.lo else -1.0
    vals = []
    for u in (1e-4, 1e-7, 1e-10):
        x = end + sign * u * span
        vals.append(abs(float(br.deriv2(x))))
    return vals[-1] > 100.0 * (vals[0] + 1e-12) and vals[-1] > 1e4
