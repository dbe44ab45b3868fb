"""Replicate ensembles, objective evaluation and experiment wiring.

f(x, theta) is estimated by running the model ``R`` times with seeds
``base, base + 1, ...`` and applying a functional (mean by default) to the
per-run metric. Replicates share nothing, so they may run in a process pool;
results are always aggregated in replicate order, which keeps records
bitwise identical between serial and parallel execution.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import bo, gp, metrics
from .design import Bounds, latin_hypercube
from .metrics import ObjectiveKind
from .sensitivity import SensitivityReport, sensitivity_test, write_reports
from .sim import (STATE_VARIABLES, ConfigError, PolicyVector, SimParams, StateVector,
                  run_simulation)

log = logging.getLogger(__name__)

WORKERS_ENV = "SUGARPOLICY_WORKERS"
POINT_SEED_STRIDE = 10 ** 6
DEGENERATE_FRACTION = 0.5

POLICY_BOUNDS = Bounds([(0.0, 1.0), (0.0, 1.0), (6.0, 15.0)],
                       names=("trade_tax", "consumption_tax", "production_cap"))
STATE_BOUNDS = {
    "pollution_rate": (0.0, 0.4),
    "endowment_min": (1.0, 25.0),
    "metabolism_max": (1.0, 5.0),
}
FUNCTIONALS = ("mean", "q05")

ReplicateFn = Callable[[PolicyVector, StateVector, SimParams, int], dict]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def simulate_metrics(policy: PolicyVector, state: StateVector, params: SimParams,
                     seed: int) -> dict:
    """All three end-of-run metrics from one simulation."""
    result = run_simulation(policy, state, params, seed)
    return {kind: metrics.final_metric(result, kind) for kind in ObjectiveKind}


def noise_metrics(policy: PolicyVector, state: StateVector, params: SimParams,
                  seed: int) -> dict:
    """Negative control: seeded standard-normal noise in place of every metric."""
    rng = np.random.default_rng(seed)
    return {kind: float(rng.standard_normal()) for kind in ObjectiveKind}


def _call(args):
    fn, policy, state, params, seed = args
    return fn(policy, state, params, seed)


def run_replicates(policy: PolicyVector, state: StateVector, params: SimParams,
                   seeds: Sequence[int], workers: int = 1,
                   replicate_fn: ReplicateFn = simulate_metrics) -> list[dict]:
    """Metric dicts for each seed, in seed order."""
    jobs = [(replicate_fn, policy, state, params, s) for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, jobs))


def apply_functional(values: Sequence[float], functional: str = "mean") -> float:
    if len(values) == 0:
        return math.nan
    if functional == "mean":
        return math.fsum(values) / len(values)
    if functional == "q05":
        return float(np.quantile(np.asarray(values, dtype=float), 0.05))
    raise ConfigError(f"unknown functional {functional!r}; choose from {FUNCTIONALS}")


@dataclass
class ExperimentRecord:
    policy: PolicyVector
    state: StateVector
    kind: ObjectiveKind
    values: list[float]
    psi: float
    n_replicates: int
    n_dropped: int
    seed_base: int
    functional: str = "mean"
    extra: dict = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return not self.values or self.n_dropped > DEGENERATE_FRACTION * self.n_replicates

    @property
    def objective(self) -> float:
        """Psi in minimisation orientation (maximised metrics are negated)."""
        return self.kind.sign * self.psi


def records_from_runs(policy: PolicyVector, state: StateVector, runs: list[dict],
                      seed_base: int, functional: str = "mean") -> dict:
    """One ExperimentRecord per objective kind from shared replicate runs."""
    out = {}
    for kind in ObjectiveKind:
        raw = [r[kind] for r in runs]
        values = [v for v in raw if math.isfinite(v)]
        dropped = len(raw) - len(values)
        if dropped:
            log.info("%s: dropped %d of %d replicates with undefined value",
                     kind.value, dropped, len(raw))
        psi = apply_functional(values, functional)
        rec = ExperimentRecord(policy, state, kind, values, psi, len(raw), dropped,
                               seed_base, functional)
        if rec.degenerate and values:
            log.warning("%s: more than half of the replicates are undefined", kind.value)
        out[kind] = rec
    for kind, rec in out.items():
        rec.extra = {k.value: r.psi for k, r in out.items() if k is not kind}
    return out


def evaluate_all(policy: PolicyVector, state: StateVector, replicates: int, seed_base: int,
                 params: Optional[SimParams] = None, functional: str = "mean",
                 workers: int = 1, replicate_fn: ReplicateFn = simulate_metrics) -> dict:
    if replicates < 1:
        raise ConfigError(f"replicate count must be >= 1, got {replicates}")
    params = params or SimParams()
    seeds = range(seed_base, seed_base + replicates)
    runs = run_replicates(policy, state, params, seeds, workers, replicate_fn)
    return records_from_runs(policy, state, runs, seed_base, functional)


def evaluate_objective(policy: PolicyVector, state: StateVector, kind, replicates: int,
                       seed_base: int, params: Optional[SimParams] = None,
                       functional: str = "mean", workers: int = 1,
                       replicate_fn: ReplicateFn = simulate_metrics) -> ExperimentRecord:
    """Estimate Psi of one objective at (policy, state) from ``replicates`` runs."""
    kind = ObjectiveKind.parse(kind)
    return evaluate_all(policy, state, replicates, seed_base, params, functional, workers,
                        replicate_fn)[kind]


def point_seed(master_seed: int, index: int) -> int:
    return master_seed + index * POINT_SEED_STRIDE


class AbmObjective:
    """f(x) for the optimiser: sign-adjusted Psi at policy ``x`` and fixed state.

    Evaluation ``j`` uses seed base ``master_seed + j * 10**6``. Every record is
    kept in ``records``; an undefined Psi is returned as ``nan`` so that the
    optimiser applies its penalty.
    """

    def __init__(self, kind, state: StateVector, replicates: int, master_seed: int,
                 params: Optional[SimParams] = None, reinvestment: float = 0.5,
                 functional: str = "mean", workers: int = 1,
                 replicate_fn: ReplicateFn = simulate_metrics):
        self.kind = ObjectiveKind.parse(kind)
        self.state = state
        self.replicates = replicates
        self.master_seed = master_seed
        self.params = params or SimParams()
        self.reinvestment = reinvestment
        self.functional = functional
        self.workers = workers
        self.replicate_fn = replicate_fn
        self.records: list[ExperimentRecord] = []

    def __call__(self, x) -> float:
        policy = PolicyVector.from_array(x, self.reinvestment)
        rec = evaluate_objective(policy, self.state, self.kind, self.replicates,
                                 point_seed(self.master_seed, len(self.records)), self.params,
                                 self.functional, self.workers, self.replicate_fn)
        self.records.append(rec)
        if rec.degenerate:
            return math.nan
        return rec.objective


@dataclass
class SensitivityExperiment:
    state_variable: str
    design: np.ndarray                     # (n, 4): policy columns then the state value
    records: list[dict]                    # per design point, ObjectiveKind -> record
    reports: list[SensitivityReport]

    def design_header(self) -> list[str]:
        kinds = list(ObjectiveKind)
        return (list(POLICY_BOUNDS.names) + [self.state_variable]
                + [k.value for k in kinds] + ["n_dropped_" + k.value for k in kinds])

    def design_rows(self) -> list[list]:
        kinds = list(ObjectiveKind)
        return [z.tolist() + [recs[k].psi for k in kinds] + [recs[k].n_dropped for k in kinds]
                for z, recs in zip(self.design, self.records)]

    def write(self, out_dir: "str | Path") -> None:
        out_dir = Path(out_dir)
        write_reports(self.reports, out_dir / f"sensitivity_{self.state_variable}.csv")
        with open(out_dir / f"sensitivity_{self.state_variable}_design.csv", "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.design_header())
            writer.writerows(self.design_rows())


def sensitivity_experiment(kinds: Sequence, state_variable: str, n: int = 40,
                           replicates: int = 150, master_seed: int = 0,
                           params: Optional[SimParams] = None,
                           base_state: Optional[StateVector] = None,
                           policy_bounds: Bounds = POLICY_BOUNDS,
                           state_bounds: Optional[tuple[float, float]] = None,
                           alpha: float = 0.05, reinvestment: float = 0.5,
                           functional: str = "mean", workers: int = 1,
                           fit_config: Optional[gp.FitConfig] = None,
                           replicate_fn: ReplicateFn = simulate_metrics,
                           ) -> SensitivityExperiment:
    """Latin hypercube over (policy, one state variable), then one test per objective."""
    if state_variable not in STATE_VARIABLES:
        raise ConfigError(f"unknown state variable {state_variable!r}")
    kinds = [ObjectiveKind.parse(k) for k in kinds]
    d = policy_bounds.dim
    if n < 10 * (d + 1):
        log.warning("n=%d is below the 10*(d+p)=%d rule of thumb", n, 10 * (d + 1))
    params = params or SimParams()
    base_state = base_state or StateVector()
    lo, hi = state_bounds or STATE_BOUNDS[state_variable]
    box = policy_bounds + Bounds([(lo, hi)], names=(state_variable,))
    rng = np.random.default_rng(master_seed)
    raw = latin_hypercube(n, box, rng)
    design = []
    records = []
    for j, z in enumerate(raw):
        policy = PolicyVector.from_array(z[:d], reinvestment)
        state = base_state.with_value(state_variable, z[d])
        value = getattr(state, state_variable)
        design.append(np.concatenate([z[:d], [value]]))
        records.append(evaluate_all(policy, state, replicates, point_seed(master_seed, j),
                                    params, functional, workers, replicate_fn))
    design = np.array(design)
    reports = []
    for kind in kinds:
        y = np.array([r[kind].objective for r in records])
        keep = np.isfinite(y) & np.array([not r[kind].degenerate for r in records])
        if keep.sum() < n:
            log.warning("%s: %d of %d design points undefined and left out",
                        kind.value, n - keep.sum(), n)
        report = sensitivity_test(design[keep], y[keep], d, 1, alpha=alpha, bounds=box,
                                  config=fit_config, rng=rng)
        report.objective = kind.value
        report.state_variable = state_variable
        reports.append(report)
    return SensitivityExperiment(state_variable, design, records, reports)


def optimize_policy(kind, state: StateVector, m: int = 5, M: int = 100,
                    replicates: int = 150, master_seed: int = 0,
                    params: Optional[SimParams] = None,
                    policy_bounds: Bounds = POLICY_BOUNDS, reinvestment: float = 0.5,
                    functional: str = "mean", workers: int = 1, method: str = "bo",
                    fit_config: Optional[gp.FitConfig] = None,
                    callback=None) -> tuple[bo.BOHistory, AbmObjective]:
    """Run BO (or the random baseline) on the model objective at fixed ``state``."""
    objective = AbmObjective(kind, state, replicates, master_seed, params, reinvestment,
                             functional, workers)
    rng = np.random.default_rng(master_seed)
    if method == "bo":
        history = bo.bo_loop(objective, policy_bounds, m, M, rng, fit_config=fit_config,
                             callback=callback)
    elif method == "random":
        history = bo.random_search(objective, policy_bounds, m, M, rng, callback=callback)
    else:
        raise ConfigError(f"unknown optimisation method {method!r}")
    return history, objective
