"""Command-line entry point: ``sugarpolicy {simulate,sensitivity,optimize,compare}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from . import bo, config as cfgmod, runner
from .config import ExperimentConfig
from .metrics import ObjectiveKind
from .sensitivity import REPORT_COLUMNS
from .sim import TRACE_COLUMNS, ConfigError, PolicyVector, run_simulation

log = logging.getLogger("sugarpolicy")

SUMMARY_COLUMNS = ("run", "seed", "survival_rate", "mean_welfare", "median_welfare", "gini",
                   "n_trades")
POLICY_COLUMNS = ("row", "objective", "trade_tax", "cap", "consumption_tax", "welfare",
                  "survival_rate", "gini", "objective_value")
COMPARE_COLUMNS = ("iteration", "bo_best_so_far", "random_best_so_far")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


@contextmanager
def partial_csv(path: Path, header: Sequence[str]):
    """Write to ``path.partial``; rename to ``path`` only if the block succeeds."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        yield writer, fh
    os.replace(tmp, path)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with partial_csv(path, header) as (writer, _):
        writer.writerows(rows)


def _num(v):
    return float(v) if isinstance(v, (np.floating, float)) else v


def _row(values) -> list:
    return [_num(v) for v in values]


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if args.desk_scale:
        cfg = cfg.desk_scale()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if args.workers is not None:
        cfg.workers = args.workers
    elif cfg.workers is None:
        cfg.workers = runner.default_workers()
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.objective is not None:
        cfg.objectives = (ObjectiveKind.parse(args.objective),)
    if getattr(args, "ensemble", None) is not None:
        cfg.ensemble = args.ensemble
    if getattr(args, "iterations", None) is not None:
        cfg.bo.M = cfg.compare.M = args.iterations
    if getattr(args, "synthetic", False):
        cfg.compare = replace(cfg.compare, synthetic=True)
    return cfg.validate()


# ---------------------------------------------------------------- simulate

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    results = []
    for i in range(cfg.ensemble):
        seed = cfg.seed + i
        result = run_simulation(cfg.policy, cfg.state, cfg.simulation, seed)
        name = "trace.csv" if cfg.ensemble == 1 else f"trace_run{i:04d}.csv"
        write_csv(out / name, TRACE_COLUMNS, (_row(r) for r in result.trace_rows()))
        results.append((seed, result))
    if cfg.ensemble > 1:
        traces = np.array([r.trace_rows() for _, r in results], dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-nan steps stay nan
            agg = np.nanmedian(traces, axis=0)
        agg[:, 0] = traces[0, :, 0]
        write_csv(out / "trace_aggregate.csv", TRACE_COLUMNS, (_row(r) for r in agg))
    rows = [(i, seed, r.survival_rate, r.mean_welfare[-1], r.median_welfare[-1], r.gini[-1],
             r.n_trades) for i, (seed, r) in enumerate(results)]
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, (_row(r) for r in rows))
    sr = [r[2] for r in rows]
    print(f"simulated {len(rows)} run(s) of {cfg.simulation.n_steps} steps; "
          f"median survival rate {float(np.median(sr)):.4f}")
    return EXIT_OK


# ------------------------------------------------------------- sensitivity

def cmd_sensitivity(cfg: ExperimentConfig, out: Path) -> int:
    print(f"{'objective':<10} {'state':<16} {'n':>4} {'Lambda':>10} {'nu':>3} "
          f"{'p':>8} reject")
    for name in cfg.sensitivity.state_variables:
        exp = runner.sensitivity_experiment(
            cfg.objectives, name, n=cfg.sensitivity.n, replicates=cfg.replicates,
            master_seed=cfg.seed, params=cfg.simulation, base_state=cfg.state,
            policy_bounds=cfg.policy_bounds, state_bounds=cfgmod.state_bounds_for(cfg, name),
            alpha=cfg.sensitivity.alpha, reinvestment=cfg.policy.reinvestment,
            functional=cfg.functional, workers=cfg.workers)
        stem = f"sensitivity_{name}"
        write_csv(out / f"{stem}.csv", REPORT_COLUMNS,
                  ([r.row()[c] for c in REPORT_COLUMNS] for r in exp.reports))
        write_csv(out / f"{stem}_design.csv", exp.design_header(),
                  (_row(r) for r in exp.design_rows()))
        for rep in exp.reports:
            print(f"{rep.objective:<10} {name:<16} {rep.n:>4} {rep.statistic:>10.3f} "
                  f"{rep.dof:>3} {rep.p_value:>8.3f} {int(rep.reject)}")
    return EXIT_OK


# ---------------------------------------------------------------- optimize

def _policy_row(label: str, kind: ObjectiveKind, policy: PolicyVector, rec) -> list:
    vals = dict(rec.extra)
    vals[kind.value] = rec.psi
    return _row((label, kind.value, policy.trade_tax, policy.production_cap,
                 policy.consumption_tax, vals["welfare"], vals["survival"], vals["gini"],
                 rec.psi))


def _run_method(cfg, kind, method, out):
    """One optimisation run; iterations stream into ``<history>.partial`` as they finish."""
    path = out / f"{method}_history_{kind.value}.csv"
    header = ("iteration",) + tuple(cfg.policy_bounds.names) + bo.HISTORY_COLUMNS_TAIL
    with partial_csv(path, header) as (writer, fh):
        def callback(r):
            writer.writerow(_row((r.iteration, *r.x, kind.sign * r.value,
                                  kind.sign * r.best_so_far, r.wall_time)))
            fh.flush()
        return runner.optimize_policy(
            kind, cfg.state, m=cfg.bo.m, M=cfg.bo.M, replicates=cfg.replicates,
            master_seed=cfg.seed, params=cfg.simulation, policy_bounds=cfg.policy_bounds,
            reinvestment=cfg.policy.reinvestment, functional=cfg.functional,
            workers=cfg.workers, method=method, callback=callback)


def cmd_optimize(cfg: ExperimentConfig, out: Path, baseline: str = "none") -> int:
    rows = []
    for kind in cfg.objectives:
        no_policy = PolicyVector.no_policy(cfg.policy.reinvestment)
        ref = runner.evaluate_objective(no_policy, cfg.state, kind, cfg.replicates,
                                        runner.point_seed(cfg.seed, 0), cfg.simulation,
                                        cfg.functional, cfg.workers)
        rows.append(_policy_row("no_policy", kind, no_policy, ref))
        methods = ["bo"] + (["random"] if baseline == "random" else [])
        best = {}
        for method in methods:
            history, objective = _run_method(cfg, kind, method, out)
            rec = objective.records[history.best_index]
            rows.append(_policy_row(method, kind, rec.policy, rec))
            best[method] = history
            print(f"{kind.value}: {method} best {rec.psi:.6g} at "
                  f"trade_tax={rec.policy.trade_tax:.4f} "
                  f"consumption_tax={rec.policy.consumption_tax:.4f} "
                  f"cap={rec.policy.production_cap:.4f} (no policy {ref.psi:.6g})")
        if baseline == "random":
            _write_compare(out / f"compare_{kind.value}.csv", best["bo"], best["random"],
                           kind.sign)
    write_csv(out / "optimal_policy.csv", POLICY_COLUMNS, rows)
    return EXIT_OK


# ----------------------------------------------------------------- compare

def _write_compare(path: Path, h_bo: bo.BOHistory, h_rs: bo.BOHistory, sign: float) -> None:
    """Best-so-far columns in the objective's natural orientation."""
    a, b = sign * h_bo.best_so_far, sign * h_rs.best_so_far
    write_csv(path, COMPARE_COLUMNS, (_row((i, x, y)) for i, (x, y) in enumerate(zip(a, b))))


def cmd_compare(cfg: ExperimentConfig, out: Path) -> int:
    M = cfg.compare.M
    if cfg.compare.synthetic:
        rng_bo, rng_rs = (np.random.default_rng(cfg.seed) for _ in range(2))
        h_bo = bo.bo_loop(bo.branin, bo.BRANIN_BOUNDS, cfg.bo.m, M, rng_bo)
        h_rs = bo.random_search(bo.branin, bo.BRANIN_BOUNDS, cfg.bo.m, M, rng_rs)
        _write_compare(out / "compare_branin.csv", h_bo, h_rs, 1.0)
        print(f"branin: bo best {h_bo.best_value:.6g}, random best {h_rs.best_value:.6g}")
        return EXIT_OK
    cfg = replace(cfg, bo=replace(cfg.bo, M=M))
    for kind in cfg.objectives:
        h_bo, _ = _run_method(cfg, kind, "bo", out)
        h_rs, _ = _run_method(cfg, kind, "random", out)
        _write_compare(out / f"compare_{kind.value}.csv", h_bo, h_rs, kind.sign)
        print(f"{kind.value}: bo best {kind.sign * h_bo.best_value:.6g}, "
              f"random best {kind.sign * h_rs.best_value:.6g}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--replicates", type=int, help="replicate runs per evaluation")
    common.add_argument("--workers", type=int,
                        help=f"worker processes (default: ${runner.WORKERS_ENV} or 1)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--objective", choices=[k.value for k in ObjectiveKind])
    common.add_argument("--desk-scale", action="store_true",
                        help="25x25 grid, 100 agents, 200 steps, at most 20 replicates")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sugarpolicy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="run the model, write traces")
    p.add_argument("--ensemble", type=int, help="number of runs (seeds seed, seed+1, ...)")
    sub.add_parser("sensitivity", parents=[common], help="additivity test per objective")
    p = sub.add_parser("optimize", parents=[common], help="Bayesian optimisation of policy")
    p.add_argument("--baseline", choices=("none", "random"), default="none")
    p.add_argument("--iterations", type=int, help="sequential iterations M")
    p = sub.add_parser("compare", parents=[common], help="BO vs random search convergence")
    p.add_argument("--iterations", type=int, help="sequential iterations M")
    p.add_argument("--synthetic", action="store_true",
                   help="use the deterministic Branin function instead of the model")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "sensitivity":
            return cmd_sensitivity(cfg, out)
        if args.command == "optimize":
            return cmd_optimize(cfg, out, args.baseline)
        return cmd_compare(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; partial outputs left with a .partial suffix", file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:
        log.exception("experiment failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
