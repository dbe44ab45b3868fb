"""Latin hypercube designs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .sim import ConfigError


class Bounds:
    """Axis-aligned box given as per-dimension (lower, upper) pairs."""

    def __init__(self, pairs: Sequence[Sequence[float]], names: Sequence[str] | None = None):
        arr = np.asarray(pairs, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ConfigError("bounds must be a sequence of (lower, upper) pairs")
        if np.any(arr[:, 0] >= arr[:, 1]):
            raise ConfigError(f"every lower bound must be below its upper bound: {arr.tolist()}")
        self.lower = arr[:, 0].copy()
        self.upper = arr[:, 1].copy()
        self.names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(len(arr)))
        if len(self.names) != len(arr):
            raise ConfigError("bounds names do not match dimensionality")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_unit(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.lower) / self.width

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * self.width

    def clip(self, z) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    def contains(self, z) -> bool:
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))

    def __add__(self, other: "Bounds") -> "Bounds":
        pairs = np.column_stack([np.concatenate([self.lower, other.lower]),
                                 np.concatenate([self.upper, other.upper])])
        return Bounds(pairs, self.names + other.names)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}=[{lo:g}, {hi:g}]" for n, lo, hi in zip(self.names, self.lower, self.upper))
        return f"Bounds({body})"


def latin_hypercube(n: int, bounds: Bounds, rng: np.random.Generator) -> np.ndarray:
    """``n`` points with exactly one point per stratum in every 1-D projection.

    Each axis is cut into ``n`` equal strata; a point is drawn uniformly inside
    each stratum and the strata are permuted independently per axis.
    """
    if n < 2:
        raise ConfigError(f"a Latin hypercube needs n >= 2, got {n}")
    d = bounds.dim
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return bounds.from_unit(u)


def strata_counts(points, bounds: Bounds) -> np.ndarray:
    """Per-dimension histogram over ``len(points)`` equal strata, shape (dim, n)."""
    points = np.atleast_2d(points)
    n = points.shape[0]
    u = bounds.to_unit(points)
    idx = np.minimum((u * n).astype(int), n - 1)
    return np.stack([np.bincount(idx[:, j], minlength=n) for j in range(bounds.dim)])
