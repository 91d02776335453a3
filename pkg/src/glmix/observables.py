"""Global observables on the tower cells.

A bounded observable is "global" when its averages over the exhausting
sets union(X_i, i <= n) converge; it is centred when that limit is zero.
For observables that are constant on the cells X_{n,p} the centring
criterion reduces to a weighted partial-sum condition on the cell values,
which is checked numerically at construction.  Piecewise mean-zero
observables are built directly against the operator grid's cell masses so
their per-cell integrals vanish identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import MeasureTable
from .inducing import InducingScheme
from .transfer import KIND_X, KIND_XFINE, KIND_Y, OperatorGrid, a_seq

__all__ = ["GlobalObservable", "make_global_pwc", "make_pw_meanzero",
           "make_pointwise", "centred_partial_sums"]


@dataclass
class GlobalObservable:
    kind: str                     # "piecewise_constant" | "piecewise_meanzero" | "general"
    rule: str
    bound: float
    gbar: float
    centred: bool
    scheme: InducingScheme
    table: object = None          # (n, p) -> value for the pwc kind
    fn: object = None             # pointwise callable for the general kind
    check: dict = field(default_factory=dict)

    def values_on(self, op: OperatorGrid) -> np.ndarray:
        """Materialise the observable as one value per operator cell."""
        if self.kind == "general":
            g = op.observable_values(self.fn)
        elif self.kind == "piecewise_constant":
            g = np.zeros(op.m)
            on_x = (op.kind == KIND_X) | (op.kind == KIND_XFINE)
            sid = op.cell_stack[on_x]
            lev = op.cell_level[on_x]
            pvals = np.array([s.p for s in self.scheme.stacks])
            g[on_x] = np.array([self.table(int(n), int(pvals[s]))
                                for n, s in zip(lev, sid)])
        else:
            g = _meanzero_values(self, op)
        if np.max(np.abs(g)) > self.bound + 1e-9:
            raise ValueError("observable exceeds its declared bound")
        return g


def _meanzero_values(obs: GlobalObservable, op: OperatorGrid) -> np.ndarray:
    """+1 on the left half, -c on the right half of every refined cell,
    with c matching the cell masses; unresolved cells project to zero."""
    g = np.zeros(op.m)
    if obs.rule == "constant":
        return g
    fine = np.nonzero(op.kind == KIND_XFINE)[0]
    for s in obs.scheme.stacks:
        levels = np.unique(op.cell_level[fine][op.cell_stack[fine] == s.sid])
        for n in levels:
            idx = fine[(op.cell_stack[fine] == s.sid)
                       & (op.cell_level[fine] == n)]
            if len(idx) < 2:
                continue
            order = np.argsort(op.cell_lo[idx])
            idx = idx[order]
            mid = 0.5 * (op.cell_lo[idx[0]] + op.cell_hi[idx[-1]])
            left = op.cell_hi[idx] <= mid + 1e-15
            if not left.any() or left.all():
                continue
            mu_l = float(np.sum(op.mu[idx[left]]))
            mu_r = float(np.sum(op.mu[idx[~left]]))
            if mu_r <= 0:
                continue
            g[idx[left]] = 1.0
            g[idx[~left]] = -mu_l / mu_r
    return g


def centred_partial_sums(scheme: InducingScheme, meas: MeasureTable,
                         table, N: int) -> dict:
    """Partial sums a_n^-1 sum_i i^-alpha gbar_i of a cell-constant table.

    gbar_i aggregates the per-point values with the fitted tail weights
    gamma_p; the observable is centred exactly when the normalised partial
    sums tend to zero.
    """
    alphas = [s.alpha for s in scheme.stacks if s.alpha is not None]
    if not alphas:
        raise ValueError("centring check needs a neutral family")
    alpha = max(alphas)
    n0 = scheme.n0
    gammas = {p: meas.gamma_fit(p)[0] for p in range(1, scheme.q + 1)}
    i = np.arange(n0, N + 1)
    gbar = np.zeros(len(i))
    for p, gp in gammas.items():
        gbar += gp * np.array([table(int(k), p) for k in i])
    psum = np.cumsum(i ** (-alpha) * gbar)
    ratio = psum / a_seq(alpha, i)
    scale = sum(gammas.values())
    window = ratio[len(ratio) // 2:]
    return {
        "n": i, "ratio": ratio, "scale": scale,
        "max_window": float(np.max(np.abs(window))) / scale,
        "gamma": gammas, "alpha": alpha,
    }


_PWC_RULES = {
    "alternating": lambda n, p: float((-1) ** n),
    "zero": lambda n, p: 0.0,
    "ones": lambda n, p: 1.0,
}


def make_global_pwc(scheme: InducingScheme, meas: MeasureTable, rule,
                    N: int | None = None, ctol: float = 0.05,
                    require_centred: bool | None = None) -> GlobalObservable:
    """Cell-constant observable from a named rule or a custom table.

    Rules: ``alternating`` ((-1)**n), ``zero``, ``ones``, ``block:L``
    (+1 / -1 on alternating blocks of length L), or any callable
    ``(n, p) -> value``.  The centred flag is set by the partial-sum check;
    requesting a centred observable whose table fails the check raises.
    """
    name = rule if isinstance(rule, str) else "custom"
    if callable(rule):
        table = rule
    elif rule in _PWC_RULES:
        table = _PWC_RULES[rule]
    elif isinstance(rule, str) and rule.startswith("block:"):
        L = int(rule.split(":", 1)[1])
        if L < 1:
            raise ValueError("block length must be positive")
        table = lambda n, p: float(1 if (n // L) % 2 == 0 else -1)
    else:
        raise ValueError(f"unknown piecewise-constant rule {rule!r}")
    Ncheck = N if N is not None else meas.N
    Ncheck = min(Ncheck, meas.N)
    chk = centred_partial_sums(scheme, meas, table, Ncheck)
    centred = chk["max_window"] <= ctol
    if require_centred and not centred:
        raise ValueError(
            f"table fails the centring check ({chk['max_window']:.3f} > {ctol})")
    bound = max(abs(table(n, p)) for n in range(scheme.n0, scheme.n0 + 64)
                for p in range(1, scheme.q + 1))
    bound = max(bound, 1e-12)
    gbar = 0.0 if centred else float(
        chk["ratio"][-1] * (1.0 - chk["alpha"]) / chk["scale"]) \
        if chk["alpha"] < 1 else float(chk["ratio"][-1] / chk["scale"])
    return GlobalObservable("piecewise_constant", name, bound, gbar, centred,
                            scheme, table=table, check=chk)


def make_pw_meanzero(scheme: InducingScheme,
                     profile: str = "default") -> GlobalObservable:
    """Observable with vanishing mass integral on every tower cell.

    The default profile is +1 on the left half and -c_n on the right half
    of each refined cell, with c_n balancing the cell masses; on cells the
    operator grid does not refine, the mass projection of such a profile
    is zero, which is what the correlation dynamics sees.
    """
    if profile not in ("default", "constant"):
        raise ValueError(f"unknown mean-zero profile {profile!r}")
    return GlobalObservable("piecewise_meanzero", profile, 1.5, 0.0, True,
                            scheme)


def make_pointwise(scheme: InducingScheme, fn, gbar: float,
                   bound: float | None = None,
                   rule: str = "pointwise") -> GlobalObservable:
    """Bounded pointwise observable with a declared global mean."""
    if bound is None:
        xs = np.linspace(0.0, scheme.map.eta, 4097)
        bound = float(np.max(np.abs(fn(xs)))) * (1.0 + 1e-9)
    return GlobalObservable("general", rule, bound, gbar, gbar == 0.0,
                            scheme, fn=fn)
