"""Objective functionals over simulation outcomes.

Welfare-based metrics are computed over the surviving population. An empty
population (or one with no positive welfare, for the Gini coefficient) has
no defined value; those cases return ``nan`` so that callers can drop the
replicate instead of inventing a number.
"""

from __future__ import annotations

import enum
import math
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .sim import Agent, SimResult


class ObjectiveKind(enum.Enum):
    SURVIVAL_RATE = "survival"
    MEAN_WELFARE = "welfare"
    GINI = "gini"

    @property
    def maximize(self) -> bool:
        return self is not ObjectiveKind.GINI

    @property
    def sign(self) -> float:
        """Multiplier that turns the raw metric into a quantity to minimize."""
        return -1.0 if self.maximize else 1.0

    @classmethod
    def parse(cls, value: "str | ObjectiveKind") -> "ObjectiveKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "survival": cls.SURVIVAL_RATE,
            "survival_rate": cls.SURVIVAL_RATE,
            "sr": cls.SURVIVAL_RATE,
            "welfare": cls.MEAN_WELFARE,
            "mean_welfare": cls.MEAN_WELFARE,
            "w": cls.MEAN_WELFARE,
            "gini": cls.GINI,
            "g": cls.GINI,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown objective {value!r}") from None


def gini(welfares: Sequence[float]) -> float:
    """Gini coefficient sum_ij |w_i - w_j| / (2 n^2 mean(w)).

    Uses the sorted-rank identity, O(n log n). Returns ``nan`` for an empty
    list or when every value is zero.
    """
    w = np.sort(np.asarray(welfares, dtype=float))
    n = w.size
    if n == 0:
        return math.nan
    if np.any(w < 0):
        raise ValueError("gini requires non-negative values")
    total = w.sum()
    if total <= 0:
        return math.nan
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.dot(ranks, w) / (n * total) - (n + 1.0) / n)


def survival_rate(result: "SimResult") -> float:
    if result.n_agents == 0:
        return math.nan
    return result.n_alive[-1] / result.n_agents


def mean_welfare(welfares: Sequence[float]) -> float:
    if len(welfares) == 0:
        return math.nan
    return float(np.mean(welfares))


def median_welfare(welfares: Sequence[float]) -> float:
    if len(welfares) == 0:
        return math.nan
    return float(np.median(welfares))


def welfare_decomposition(agent: "Agent") -> tuple[float, float]:
    """Split log of pollution-free Cobb-Douglas welfare into sugar and spice parts.

    A non-positive holding gives ``-inf`` for that component.
    """
    total = agent.sugar_metabolism + agent.spice_metabolism
    a = agent.sugar_metabolism / total
    b = agent.spice_metabolism / total
    sugar_part = a * math.log(agent.sugar) if agent.sugar > 0 else -math.inf
    spice_part = b * math.log(agent.spice) if agent.spice > 0 else -math.inf
    return sugar_part, spice_part


def mean_decomposition(agents: Sequence["Agent"]) -> tuple[float, float]:
    """Population means of the two log-welfare components, skipping -inf entries."""
    sugar_parts = []
    spice_parts = []
    for agent in agents:
        s, p = welfare_decomposition(agent)
        if math.isfinite(s):
            sugar_parts.append(s)
        if math.isfinite(p):
            spice_parts.append(p)
    return (
        float(np.mean(sugar_parts)) if sugar_parts else math.nan,
        float(np.mean(spice_parts)) if spice_parts else math.nan,
    )


def final_metric(result: "SimResult", kind: ObjectiveKind) -> float:
    """End-of-run value of one objective (raw, not sign-adjusted)."""
    if kind is ObjectiveKind.SURVIVAL_RATE:
        return survival_rate(result)
    if kind is ObjectiveKind.MEAN_WELFARE:
        return mean_welfare(result.final_welfares)
    return gini(result.final_welfares)
