"""Batch front-end: run configured experiments, emit reports.

Exit codes: 0 all enabled checks pass, 1 tolerance failure, 2 bad
configuration, 3 stage failure (the failing stage is named on stderr).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .maps import family_table, make_family
from .report import config_hash, write_outputs
from .verify import (Pipeline, StageError, check_jacobian_window,
                     check_krickeberg, check_measure_identity,
                     check_tail_law, glocal_experiment)


def run_experiment(cfg: ExperimentConfig):
    """Build the shared pipeline and execute every enabled check."""
    try:
        model = make_family(cfg.family, **cfg.family_params())
    except Exception as e:
        raise StageError("map", e) from e
    pipe = Pipeline(model, ulam_m=cfg.ulam_m, cells_n=cfg.cells_n,
                    op_depth=cfg.op_depth, op_w=cfg.op_w,
                    eps_leak=cfg.tolerances["eps_leak"])
    tol = cfg.tolerances
    jobs = {}
    if "tails" in cfg.checks:
        jobs["tails"] = lambda: check_tail_law(
            pipe.scheme, pipe.meas, tol_osc=tol["plateau"],
            tol_add=tol["additivity"])
    if "measure" in cfg.checks:
        jobs["measure"] = lambda: check_measure_identity(
            pipe.scheme, pipe.meas, tol=tol["identity"])
    neutral = any(s.alpha is not None for s in pipe.scheme.stacks)
    if "jacobian" in cfg.checks and neutral:
        jobs["jacobian"] = lambda: check_jacobian_window(
            pipe.scheme, pipe.dens, js=cfg.j_list, eps=cfg.eps,
            l_mult=cfg.l_mult, sup_tol=tol["sup_ratio"],
            eps_sweep=cfg.eps_sweep)
    if "krickeberg" in cfg.checks and neutral:
        jobs["krickeberg"] = lambda: check_krickeberg(
            pipe.op, n_max=cfg.n_max, spread_tol=tol["spread"],
            cauchy_tol=tol["cauchy"])
    if "glocal" in cfg.checks and cfg.observables:
        jobs["glocal"] = lambda: glocal_experiment(
            pipe, cfg.observables, n_max=cfg.n_max, tol_c=tol["glocal_c"],
            classical_tol=tol["classical"])

    names = list(jobs)
    if cfg.threads > 1 and len(names) > 1:
        # checkers are pure readers of the shared immutable pipeline
        pipe.op if ("krickeberg" in jobs or "glocal" in jobs) else None
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futs = {name: pool.submit(jobs[name]) for name in names}
            reports = [futs[name].result() for name in names]
    else:
        reports = [jobs[name]() for name in names]
    return pipe, reports


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="glmix",
        description="verification lab for intermittent interval maps")
    sub = ap.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run the checks of a config file")
    run_p.add_argument("config")
    run_p.add_argument("--out", help="output directory (overrides config)")
    run_p.add_argument("--threads", type=int, help="worker threads")
    run_p.add_argument("--check", help="comma-separated subset of checks")
    sub.add_parser("list-families", help="table of built-in map families")
    args = ap.parse_args(argv)

    if args.command == "list-families":
        rows = family_table()
        wid = max(len(r[0]) for r in rows)
        for name, params, notes in rows:
            print(f"{name:<{wid}}  {params:<24}  {notes}")
        return 0

    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.out = args.out
        if args.threads:
            cfg.threads = args.threads
        if args.check:
            cfg.checks = tuple(s.strip() for s in args.check.split(","))
        cfg.validate()
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        pipe, reports = run_experiment(cfg)
    except StageError as e:
        print(f"stage error [{e.stage}]: {e.cause}", file=sys.stderr)
        return 3

    provenance = {
        "version": __version__,
        "config_hash": config_hash(cfg.to_text()),
        "family": cfg.family,
        "alpha": "" if cfg.alpha is None else cfg.alpha,
        "depths": f"cells_n={cfg.cells_n} ulam_m={cfg.ulam_m} "
                  f"op_depth={cfg.op_depth} n_max={cfg.n_max}",
        "n0": pipe.scheme.n0,
    }
    payload = write_outputs(cfg.out, reports, provenance)
    for r in reports:
        print(r.summary_line())
    return 0 if payload["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
