"""Verification reports with deterministic CSV / JSON serialisation."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

__all__ = ["VerificationReport", "write_outputs", "config_hash"]


@dataclass
class VerificationReport:
    """One condition check: a convergence table plus summary statistics."""

    name: str
    passed: bool
    columns: tuple[str, ...]
    rows: list[tuple]
    stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "columns": list(self.columns),
            "rows": [[_plain(v) for v in row] for row in self.rows],
            "stats": {k: _plain(v) for k, v in self.stats.items()},
            "meta": {k: _plain(v) for k, v in self.meta.items()},
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_cell(v) for v in row])

    def summary_line(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        extras = ", ".join(f"{k}={_cell(v)}" for k, v in
                           sorted(self.stats.items()) if not isinstance(v, dict))
        return f"[{verdict}] {self.name}: {extras}"


def _plain(v):
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _cell(v):
    v = _plain(v)
    if isinstance(v, float):
        return repr(v)
    return v


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_outputs(outdir, reports: list[VerificationReport],
                  provenance: dict) -> dict:
    """Write report.json, one CSV per check and a human summary."""
    import os

    os.makedirs(outdir, exist_ok=True)
    payload = {
        "provenance": {k: _plain(v) for k, v in provenance.items()},
        "passed": all(r.passed for r in reports),
        "checks": {r.name: r.to_dict() for r in reports},
    }
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    for r in reports:
        r.to_csv(os.path.join(outdir, f"{r.name}.csv"))
    lines = [f"{k} = {v}" for k, v in sorted(provenance.items())]
    lines.append("")
    lines.extend(r.summary_line() for r in reports)
    verdict = "ALL CHECKS PASS" if payload["passed"] else "CHECK FAILURES"
    lines.append("")
    lines.append(verdict)
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return payload
