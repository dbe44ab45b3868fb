"""Experiment configuration files (YAML, versioned, strict keys)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .design import Bounds
from .metrics import ObjectiveKind
from .runner import FUNCTIONALS, POLICY_BOUNDS, STATE_BOUNDS
from .sim import STATE_VARIABLES, ConfigError, PolicyVector, SimParams, StateVector

SCHEMA_VERSION = 1

DESK_SIM = dict(n_agents=100, n_steps=200, width=25, height=25)
DESK_REPLICATES = 20


@dataclass
class BOSettings:
    m: int = 5
    M: int = 100


@dataclass
class SensitivitySettings:
    n: int = 40
    alpha: float = 0.05
    state_variables: tuple[str, ...] = ("pollution_rate",)
    state_bounds: Optional[tuple[float, float]] = None


@dataclass
class CompareSettings:
    M: int = 50
    synthetic: bool = False


@dataclass
class ExperimentConfig:
    simulation: SimParams = field(default_factory=SimParams)
    state: StateVector = field(default_factory=StateVector)
    policy: PolicyVector = field(default_factory=PolicyVector.no_policy)
    policy_bounds: Bounds = POLICY_BOUNDS
    objectives: tuple[ObjectiveKind, ...] = (ObjectiveKind.GINI,)
    replicates: int = 150
    functional: str = "mean"
    bo: BOSettings = field(default_factory=BOSettings)
    sensitivity: SensitivitySettings = field(default_factory=SensitivitySettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    ensemble: int = 1
    seed: int = 0
    workers: Optional[int] = None            # None: take the environment default
    out: Path = Path("results")

    @property
    def objective(self) -> ObjectiveKind:
        return self.objectives[0]

    def validate(self) -> "ExperimentConfig":
        if self.replicates < 1:
            raise ConfigError("replicates: must be >= 1")
        if self.functional not in FUNCTIONALS:
            raise ConfigError(f"functional: must be one of {FUNCTIONALS}")
        if self.bo.m < 2:
            raise ConfigError("bo.m: must be >= 2")
        if self.bo.M < 0:
            raise ConfigError("bo.M: must be >= 0")
        if self.compare.M < 0:
            raise ConfigError("compare.M: must be >= 0")
        if self.sensitivity.n < 2:
            raise ConfigError("sensitivity.n: must be >= 2")
        if not 0 < self.sensitivity.alpha < 1:
            raise ConfigError("sensitivity.alpha: must lie in (0, 1)")
        for v in self.sensitivity.state_variables:
            if v not in STATE_VARIABLES:
                raise ConfigError(f"sensitivity.state_variable: unknown {v!r}")
        if self.sensitivity.state_bounds is not None:
            lo, hi = self.sensitivity.state_bounds
            if not lo < hi:
                raise ConfigError("sensitivity.state_bounds: lower must be below upper")
        if self.state.endowment_min > self.simulation.endowment_max:
            raise ConfigError("state.endowment_min: exceeds simulation.endowment_max")
        if self.ensemble < 1:
            raise ConfigError("ensemble: must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        return self

    def desk_scale(self) -> "ExperimentConfig":
        """Shrink grid, horizon and replicate count to the desk preset."""
        return replace(self, simulation=replace(self.simulation, **DESK_SIM),
                       replicates=min(self.replicates, DESK_REPLICATES))


_TOP_KEYS = {"schema_version", "simulation", "state", "policy", "policy_bounds", "objective",
             "objectives", "replicates", "functional", "bo", "sensitivity", "compare",
             "ensemble", "seed", "workers", "out"}


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _build(section: str, cls, data: dict, **convert):
    _check_keys(section, data, [f.name for f in fields(cls)])
    kwargs = {k: convert.get(k, lambda v: v)(v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _cap(value: Any) -> float:
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "none", "unbounded")):
        return math.inf
    return float(value)


def from_dict(data: dict) -> ExperimentConfig:
    _check_keys("config", data, _TOP_KEYS)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    cfg = ExperimentConfig()
    if "simulation" in data:
        cfg.simulation = _build("simulation", SimParams, data["simulation"])
    if "state" in data:
        cfg.state = _build("state", StateVector, data["state"],
                           endowment_min=int, metabolism_max=int, pollution_rate=float)
    if "policy" in data:
        cfg.policy = _build("policy", PolicyVector, data["policy"], production_cap=_cap)
    if "policy_bounds" in data:
        pb = data["policy_bounds"]
        _check_keys("policy_bounds", pb, POLICY_BOUNDS.names)
        pairs = [pb.get(name, (lo, hi)) for name, lo, hi in
                 zip(POLICY_BOUNDS.names, POLICY_BOUNDS.lower, POLICY_BOUNDS.upper)]
        cfg.policy_bounds = Bounds(pairs, POLICY_BOUNDS.names)
    if "objective" in data and "objectives" in data:
        raise ConfigError("config: give either objective or objectives, not both")
    if "objective" in data:
        cfg.objectives = (ObjectiveKind.parse(data["objective"]),)
    if "objectives" in data:
        cfg.objectives = tuple(ObjectiveKind.parse(k) for k in data["objectives"])
    for key in ("replicates", "ensemble", "seed", "workers"):
        if key in data:
            setattr(cfg, key, int(data[key]))
    if "functional" in data:
        cfg.functional = str(data["functional"])
    if "out" in data:
        cfg.out = Path(data["out"])
    if "bo" in data:
        cfg.bo = _build("bo", BOSettings, data["bo"], m=int, M=int)
    if "sensitivity" in data:
        sens = dict(data["sensitivity"])
        _check_keys("sensitivity", sens, ("n", "alpha", "state_variable", "state_bounds"))
        names = sens.pop("state_variable", "pollution_rate")
        names = (names,) if isinstance(names, str) else tuple(names)
        bounds = sens.pop("state_bounds", None)
        cfg.sensitivity = SensitivitySettings(
            n=int(sens.get("n", 40)), alpha=float(sens.get("alpha", 0.05)),
            state_variables=names,
            state_bounds=tuple(float(b) for b in bounds) if bounds is not None else None)
    if "compare" in data:
        cfg.compare = _build("compare", CompareSettings, data["compare"], M=int, synthetic=bool)
    return cfg.validate()


def load(path: "str | Path") -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(data)


def state_bounds_for(cfg: ExperimentConfig, name: str) -> tuple[float, float]:
    return cfg.sensitivity.state_bounds or STATE_BOUNDS[name]
