"""Key-value experiment configuration with exact round-tripping."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_DEF_CHECKS = ("tails", "measure", "jacobian", "krickeberg", "glocal")
_DEF_OBS = ("pwc:alternating", "pw0:default")
_DEF_TOLS = {
    "plateau": 0.03,
    "additivity": 0.01,
    "identity": 1e-4,
    "sup_ratio": 0.05,
    "spread": 0.05,
    "cauchy": 0.03,
    "glocal_c": 0.02,
    "classical": 0.02,
    "eps_leak": 1e-3,
}


@dataclass
class ExperimentConfig:
    family: str = "lsv"
    alpha: float | None = 0.5
    b: float | None = None
    eta1: float | None = None
    eta: float | None = None
    d: int | None = None
    cuts: tuple | None = None
    slopes: tuple | None = None
    # depths
    tail_n: int = 100000
    cells_n: int = 10000
    ulam_m: int = 4096
    op_depth: int = 20000
    op_w: float | None = None
    n_max: int = 2000
    j_list: tuple = (250, 500, 1000, 2000)
    l_mult: int = 50
    eps: float = 0.2
    eps_sweep: tuple = (0.1, 0.4)
    # runs
    observables: tuple = _DEF_OBS
    checks: tuple = _DEF_CHECKS
    tolerances: dict = field(default_factory=lambda: dict(_DEF_TOLS))
    out: str = "out"
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        from .maps import _FAMILIES
        if self.family not in _FAMILIES:
            raise ConfigError(f"family: unknown family {self.family!r}")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha: must lie in (0, 1], got {self.alpha}")
        for name in ("tail_n", "cells_n", "ulam_m", "op_depth", "n_max",
                     "l_mult", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"eps: must lie in (0, 1), got {self.eps}")
        for key, val in self.tolerances.items():
            if key not in _DEF_TOLS:
                raise ConfigError(f"tol_{key}: unknown tolerance")
            if not 0.0 < val < 1.0:
                raise ConfigError(f"tol_{key}: must lie in (0, 1), got {val}")
        for check in self.checks:
            if check not in _DEF_CHECKS:
                raise ConfigError(f"checks: unknown check {check!r}")
        return self

    def family_params(self) -> dict:
        out = {}
        if self.family in ("lsv", "lsv2", "qbranch", "pm_mod1", "two_sided",
                           "thaler_d"):
            out["alpha"] = self.alpha
        if self.family == "lsv2":
            if self.b is not None:
                out["b"] = self.b
            if self.eta1 is not None:
                out["eta1"] = self.eta1
            if self.eta is not None:
                out["eta"] = self.eta
        if self.family == "pm_mod1":
            out["b"] = self.b if self.b is not None else 1.0
        if self.family in ("qbranch", "linear") and self.cuts is not None:
            out["cuts"] = self.cuts
        if self.family == "qbranch" and self.slopes is not None:
            out["slopes"] = self.slopes
        if self.family == "thaler_d":
            out["d"] = self.d if self.d is not None else 3
            if self.cuts is not None:
                out["cuts"] = self.cuts
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "tolerances":
                for k in sorted(val):
                    lines.append(f"tol_{k} = {val[k]!r}")
                continue
            lines.append(f"{f.name} = {_fmt(val)}")
        return "\n".join(lines) + "\n"


def _fmt(val) -> str:
    if val is None:
        return "none"
    if isinstance(val, (tuple, list)):
        return ",".join(_fmt(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


_INT_FIELDS = {"tail_n", "cells_n", "ulam_m", "op_depth", "n_max", "l_mult",
               "threads", "d"}
_FLOAT_FIELDS = {"alpha", "b", "eta1", "eta", "op_w", "eps"}
_TUPLE_FLOAT = {"cuts", "slopes", "eps_sweep"}
_TUPLE_INT = {"j_list"}
_TUPLE_STR = {"observables", "checks"}


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.tolerances = dict(_DEF_TOLS)
    known = {f.name for f in fields(cfg)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("tol_"):
                cfg.tolerances[key[4:]] = float(val)
            elif key in _INT_FIELDS:
                setattr(cfg, key, None if val == "none" else int(val))
            elif key in _FLOAT_FIELDS:
                setattr(cfg, key, None if val == "none" else float(val))
            elif key in _TUPLE_FLOAT:
                setattr(cfg, key, None if val == "none"
                        else tuple(float(v) for v in val.split(",") if v))
            elif key in _TUPLE_INT:
                setattr(cfg, key, tuple(int(v) for v in val.split(",") if v))
            elif key in _TUPLE_STR:
                setattr(cfg, key, tuple(v.strip() for v in val.split(",")
                                        if v.strip()))
            elif key in known:
                setattr(cfg, key, val)
            else:
                raise ConfigError(f"{key}: unknown configuration key")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
