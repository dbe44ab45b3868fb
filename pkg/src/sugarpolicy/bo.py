"""Expected-improvement Bayesian optimisation and a random-search baseline.

Everything here minimises. Callers that want to maximise negate first.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from scipy.special import ndtr

from . import gp
from .design import Bounds, latin_hypercube
from .optim import Adam

log = logging.getLogger(__name__)

SD_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def ei_from_moments(mean, sd, f_min: float) -> np.ndarray:
    """Closed-form expected improvement below ``f_min`` for N(mean, sd^2)."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    gap = f_min - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sd > SD_FLOOR, gap / sd, 0.0)
        ei = np.where(sd > SD_FLOOR, gap * ndtr(u) + sd * _pdf(u), np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: gp.FittedGP, x, f_min: float):
    """EI of the fitted surrogate at ``x`` (natural units); scalar for one point."""
    x = np.asarray(x, dtype=float)
    mean, sd = model.predict(x)
    ei = ei_from_moments(mean, sd, f_min)
    return float(ei) if x.ndim == 1 else ei


def _ei_and_grad(model: gp.FittedGP, bounds: Bounds, V: np.ndarray, f_min: float):
    """EI and its gradient w.r.t. points ``V`` in the unit cube of ``bounds``."""
    Z = bounds.from_unit(V)
    mean, sd, dmean, dsd = model.predict_unit(model.to_unit(Z), grad=True)
    chain = bounds.width / model.width
    dmean = dmean * chain
    dsd = dsd * chain
    gap = f_min - mean
    pos = sd > SD_FLOOR
    u = np.where(pos, gap / np.where(pos, sd, 1.0), 0.0)
    cdf, pdf = ndtr(u), _pdf(u)
    ei = np.where(pos, gap * cdf + sd * pdf, np.maximum(gap, 0.0))
    grad = np.where(pos[:, None], -cdf[:, None] * dmean + pdf[:, None] * dsd,
                    np.where((gap > 0)[:, None], -dmean, 0.0))
    return np.maximum(ei, 0.0), grad


@dataclass
class ProposeConfig:
    n_uniform: int = 10
    n_local: int = 10
    local_scale: float = 0.1
    n_iter: int = 200
    lr: float = 0.05


def propose_next(model: gp.FittedGP, bounds: Bounds, f_min: float,
                 rng: np.random.Generator, config: Optional[ProposeConfig] = None,
                 incumbent=None) -> np.ndarray:
    """Multi-start Adam ascent on EI inside ``bounds``.

    Starts are uniform draws plus Gaussian perturbations of the incumbent (the
    best training point unless given). Returns the end point with the highest
    EI, or a uniform draw when EI is zero everywhere it looked.
    """
    config = config or ProposeConfig()
    d = bounds.dim
    if incumbent is None:
        incumbent = model.Z[int(np.argmin(model.y))]
    inc = bounds.to_unit(np.asarray(incumbent, dtype=float))
    starts = [rng.random((config.n_uniform, d)),
              np.clip(inc + config.local_scale * rng.standard_normal((config.n_local, d)), 0.0, 1.0)]
    V = np.vstack(starts)
    ei, grad = _ei_and_grad(model, bounds, V, f_min)
    best_V, best_ei = V.copy(), ei.copy()
    opt = Adam(lr=config.lr, maximize=True)
    for _ in range(config.n_iter):
        V = np.clip(opt.step(V, grad), 0.0, 1.0)
        ei, grad = _ei_and_grad(model, bounds, V, f_min)
        better = ei > best_ei
        best_V[better] = V[better]
        best_ei[better] = ei[better]
    k = int(np.argmax(best_ei))
    if not best_ei[k] > 0:
        log.info("expected improvement vanished at every start; sampling uniformly")
        return bounds.from_unit(rng.random(d))
    return bounds.clip(bounds.from_unit(best_V[k]))


HISTORY_COLUMNS_TAIL = ("observed", "best_so_far", "wall_time_seconds")


@dataclass
class BORecord:
    iteration: int
    x: np.ndarray
    value: float
    best_so_far: float
    wall_time: float
    failed: bool = False


@dataclass
class BOHistory:
    bounds: Bounds
    records: list[BORecord] = field(default_factory=list)
    method: str = "bo"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def X(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])

    @property
    def best_so_far(self) -> np.ndarray:
        return np.array([r.best_so_far for r in self.records])

    @property
    def best_index(self) -> int:
        vals = np.array([math.inf if r.failed else r.value for r in self.records])
        return int(np.argmin(vals))

    @property
    def best_x(self) -> np.ndarray:
        return self.records[self.best_index].x

    @property
    def best_value(self) -> float:
        return self.records[self.best_index].value

    def append(self, x, value: float, wall_time: float, failed: bool = False) -> BORecord:
        prev = self.records[-1].best_so_far if self.records else math.inf
        best = prev if failed else min(prev, value)
        rec = BORecord(len(self.records), np.asarray(x, dtype=float), float(value), best,
                       wall_time, failed)
        self.records.append(rec)
        return rec

    def columns(self) -> tuple[str, ...]:
        return ("iteration",) + tuple(self.bounds.names) + HISTORY_COLUMNS_TAIL

    def rows(self) -> list[tuple]:
        return [(r.iteration, *r.x.tolist(), r.value, r.best_so_far, r.wall_time)
                for r in self.records]

    def write_csv(self, path: "str | Path") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            writer.writerows(self.rows())


Objective = Callable[..., float]


class _Evaluator:
    """Calls the objective and substitutes a penalty when it fails."""

    def __init__(self, objective: Objective, theta: Any):
        self.objective = objective
        self.theta = theta
        self.good: list[float] = []

    def __call__(self, x: np.ndarray) -> tuple[float, bool]:
        try:
            value = self.objective(x) if self.theta is None else self.objective(x, self.theta)
            value = float(value)
        except Exception as exc:  # objective is a black box
            log.warning("objective failed at %s: %s", np.round(x, 6).tolist(), exc)
            value = math.nan
        if math.isfinite(value):
            self.good.append(value)
            return value, False
        penalty = self.penalty()
        log.warning("objective undefined at %s; assigning penalty %.6g",
                    np.round(x, 6).tolist(), penalty)
        return penalty, True

    def penalty(self) -> float:
        if not self.good:
            return 1.0
        spread = float(np.std(self.good)) if len(self.good) > 1 else 1.0
        return max(self.good) + (spread if spread > 0 else 1.0)


def _initial_design(history: BOHistory, evaluate: _Evaluator, bounds: Bounds, m: int,
                    rng: np.random.Generator, start: float) -> None:
    for x in latin_hypercube(m, bounds, rng):
        value, failed = evaluate(x)
        history.append(x, value, time.perf_counter() - start, failed)


def bo_loop(objective: Objective, bounds: Bounds, m: int, M: int,
            rng: np.random.Generator, theta: Any = None,
            fit_config: Optional[gp.FitConfig] = None,
            propose_config: Optional[ProposeConfig] = None,
            callback: Optional[Callable[[BORecord], None]] = None,
            refit_restarts: int = 2) -> BOHistory:
    """Latin-hypercube start of size ``m`` followed by ``M`` EI-guided evaluations.

    ``objective(x)`` (or ``objective(x, theta)`` when ``theta`` is given) is
    minimised. Each iteration refits the surrogate by maximum likelihood. The
    first fit uses the full restart budget of ``fit_config``; later fits start
    from the previous optimum plus ``refit_restarts`` random restarts.
    """
    if m < 2:
        raise ValueError(f"need at least 2 initial points, got {m}")
    if M < 0:
        raise ValueError("M must be non-negative")
    history = BOHistory(bounds, method="bo")
    evaluate = _Evaluator(objective, theta)
    start = time.perf_counter()
    _initial_design(history, evaluate, bounds, m, rng, start)
    if callback:
        for rec in history.records:
            callback(rec)
    blocks = (tuple(range(bounds.dim)),)
    fit_config = fit_config or gp.FitConfig()
    refit_config = replace(fit_config, n_restarts=min(refit_restarts, fit_config.n_restarts))
    warm: list[np.ndarray] = []
    for _ in range(M):
        model = gp.fit_ml(blocks, history.X, history.values, bounds=bounds,
                          config=refit_config if warm else fit_config, rng=rng, init=warm)
        warm = [model.hyper.pack()]
        f_min = float(np.min(history.values))
        x = propose_next(model, bounds, f_min, rng, propose_config,
                         incumbent=history.X[int(np.argmin(history.values))])
        value, failed = evaluate(x)
        rec = history.append(x, value, time.perf_counter() - start, failed)
        if callback:
            callback(rec)
    return history


def random_search(objective: Objective, bounds: Bounds, m: int, M: int,
                  rng: np.random.Generator, theta: Any = None,
                  callback: Optional[Callable[[BORecord], None]] = None) -> BOHistory:
    """Same bookkeeping as :func:`bo_loop` with uniform proposals after the design."""
    if m < 2:
        raise ValueError(f"need at least 2 initial points, got {m}")
    history = BOHistory(bounds, method="random")
    evaluate = _Evaluator(objective, theta)
    start = time.perf_counter()
    _initial_design(history, evaluate, bounds, m, rng, start)
    if callback:
        for rec in history.records:
            callback(rec)
    for _ in range(M):
        x = bounds.from_unit(rng.random(bounds.dim))
        value, failed = evaluate(x)
        rec = history.append(x, value, time.perf_counter() - start, failed)
        if callback:
            callback(rec)
    return history


def branin(x) -> float:
    """Branin-Hoo function on [-5, 10] x [0, 15]; three global minima of 0.397887."""
    x1, x2 = float(x[0]), float(x[1])
    a, b, c = 1.0, 5.1 / (4 * math.pi ** 2), 5.0 / math.pi
    r, s, t = 6.0, 10.0, 1.0 / (8 * math.pi)
    return a * (x2 - b * x1 ** 2 + c * x1 - r) ** 2 + s * (1 - t) * math.cos(x1) + s


BRANIN_BOUNDS = Bounds([(-5.0, 10.0), (0.0, 15.0)], names=("x1", "x2"))
