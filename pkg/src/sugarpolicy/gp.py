"""Gaussian-process regression with additive squared-exponential kernels.

A kernel is a sum of blocks. Each block is a unit-variance squared-exponential
correlation over a subset of input dimensions with its own length-scales; one
shared variance multiplies the sum::

    K(z, z') = var * sum_b exp(-sum_{l in b} ((z_l - z'_l) / ls_bl)^2)

Hyperparameters are trained by maximising the log marginal likelihood with
batched Adam over several random restarts. Positive quantities are optimised
on the log scale; the packed ("unconstrained") vector is::

    [mean, log var, log ls (block 0) ..., log ls (block B-1) ..., log noise]

Inputs are mapped to the unit cube and outputs standardised before fitting.
The reported log-likelihood is converted back to the original output scale so
that likelihoods of different models on the same data can be compared.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .design import Bounds
from .optim import Adam

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_JITTER = 1e-8
JITTER_LADDER = (1e-8, 1e-7, 1e-6)

# box for the packed vector; keeps Adam away from overflow
_MEAN_RANGE = (-10.0, 10.0)
_LOG_VAR_RANGE = (-12.0, 8.0)
_LOG_LS_RANGE = (math.log(1e-3), math.log(1e3))
_LOG_NOISE_RANGE = (-28.0, 3.0)

Blocks = tuple[tuple[int, ...], ...]


class GPFitError(RuntimeError):
    """Raised when no restart produces a usable factorisation."""


def _as_blocks(blocks: Sequence[Sequence[int]]) -> Blocks:
    out = tuple(tuple(int(i) for i in b) for b in blocks)
    if not out or any(len(b) == 0 for b in out):
        raise ValueError("kernel needs at least one non-empty block")
    return out


@dataclass(frozen=True)
class KernelSpec:
    """Block structure with per-block length-scales and the shared variance."""

    blocks: Blocks
    lengthscales: tuple[np.ndarray, ...]
    variance: float = 1.0

    def __post_init__(self) -> None:
        if len(self.blocks) != len(self.lengthscales):
            raise ValueError("one length-scale vector per block is required")
        for dims, ls in zip(self.blocks, self.lengthscales):
            if len(dims) != len(ls):
                raise ValueError("length-scale vector does not match block dimensions")
            if np.any(np.asarray(ls) <= 0):
                raise ValueError("length-scales must be positive")
        if self.variance <= 0:
            raise ValueError("variance must be positive")

    @property
    def n_dims(self) -> int:
        return 1 + max(max(b) for b in self.blocks)

    def correlation(self, Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
        """Sum of unit-variance block correlations, shape (len(Z1), len(Z2))."""
        Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
        Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
        if Z1.shape[1] < self.n_dims or Z2.shape[1] < self.n_dims:
            raise ValueError("points have fewer dimensions than the kernel uses")
        total = np.zeros((Z1.shape[0], Z2.shape[0]))
        for dims, ls in zip(self.blocks, self.lengthscales):
            idx = list(dims)
            a = Z1[:, idx] / ls
            b = Z2[:, idx] / ls
            sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
            total += np.exp(-np.maximum(sq, 0.0))
        return total

    def matrix(self, Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
        return self.variance * self.correlation(Z1, Z2)


def kernel_eval(spec: KernelSpec, z, z2) -> float:
    z = np.asarray(z, dtype=float).ravel()
    z2 = np.asarray(z2, dtype=float).ravel()
    if z.shape != z2.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {z2.shape}")
    total = 0.0
    for dims, ls in zip(spec.blocks, spec.lengthscales):
        idx = list(dims)
        total += math.exp(-float(np.sum(((z[idx] - z2[idx]) / ls) ** 2)))
    return spec.variance * total


@dataclass(frozen=True)
class GPHyper:
    mean: float
    kernel: KernelSpec
    noise: float = 0.0

    @property
    def blocks(self) -> Blocks:
        return self.kernel.blocks

    def pack(self) -> np.ndarray:
        parts = [np.array([self.mean, math.log(self.kernel.variance)])]
        parts += [np.log(np.asarray(ls, dtype=float)) for ls in self.kernel.lengthscales]
        parts.append(np.array([math.log(max(self.noise, 1e-300))]))
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, theta: np.ndarray, blocks: Sequence[Sequence[int]]) -> "GPHyper":
        blocks = _as_blocks(blocks)
        theta = np.asarray(theta, dtype=float)
        pos = 2
        ls = []
        for b in blocks:
            ls.append(np.exp(theta[pos:pos + len(b)]))
            pos += len(b)
        return cls(float(theta[0]), KernelSpec(blocks, tuple(ls), float(math.exp(theta[1]))),
                   float(math.exp(theta[pos])))


def n_packed(blocks: Blocks) -> int:
    return 3 + sum(len(b) for b in blocks)


class _Layout:
    """Precomputed pairwise squared differences for a training set."""

    def __init__(self, blocks: Blocks, Z: np.ndarray):
        self.blocks = blocks
        self.Z = Z
        self.n = Z.shape[0]
        diff = Z[:, None, :] - Z[None, :, :]
        self.D2 = diff * diff
        self.block_D2 = [np.ascontiguousarray(self.D2[:, :, list(b)]) for b in blocks]
        offsets = []
        pos = 2
        for b in blocks:
            offsets.append(slice(pos, pos + len(b)))
            pos += len(b)
        self.ls_slices = offsets
        self.noise_index = pos
        self.n_params = pos + 1


def _factor(K: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    """Cholesky of K + jitter*I, escalating jitter along the ladder."""
    n = K.shape[0]
    eye = np.eye(n)
    for j in (jitter,) + tuple(x for x in JITTER_LADDER if x > jitter):
        try:
            return np.linalg.cholesky(K + j * eye), j
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("covariance not positive definite after jitter escalation")


def _batched_lml(theta: np.ndarray, layout: _Layout, y: np.ndarray,
                 jitter: float = MIN_JITTER) -> tuple[np.ndarray, np.ndarray]:
    """Log marginal likelihood and gradient for each row of ``theta`` (R, P)."""
    R = theta.shape[0]
    n = layout.n
    var = np.exp(theta[:, 1])
    noise = np.exp(theta[:, layout.noise_index])
    corr = []
    inv_ls2 = []
    csum = np.zeros((R, n, n))
    for sl, bD2 in zip(layout.ls_slices, layout.block_D2):
        il2 = np.exp(-2.0 * theta[:, sl])
        C = np.exp(-np.einsum("ijd,rd->rij", bD2, il2))
        corr.append(C)
        inv_ls2.append(il2)
        csum += C
    eye = np.eye(n)
    K = var[:, None, None] * csum + (noise + jitter)[:, None, None] * eye
    values = np.full(R, -np.inf)
    grads = np.zeros_like(theta)
    try:
        L = np.linalg.cholesky(K)
        ok = np.ones(R, dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(K)
        ok = np.zeros(R, dtype=bool)
        for r in range(R):
            try:
                L[r], _ = _factor(K[r] - jitter * eye, jitter)
                ok[r] = True
            except np.linalg.LinAlgError:
                pass
    if not ok.any():
        return values, grads
    idx = np.flatnonzero(ok)
    L = L[idx]
    Linv = np.linalg.inv(L)
    Kinv = np.swapaxes(Linv, 1, 2) @ Linv
    resid = y[None, :] - theta[idx, 0][:, None]
    alpha = np.einsum("rij,rj->ri", Kinv, resid)
    logdet_half = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
    values[idx] = -0.5 * np.einsum("ri,ri->r", resid, alpha) - logdet_half - 0.5 * n * LOG_2PI
    W = alpha[:, :, None] * alpha[:, None, :] - Kinv
    v = var[idx]
    g = np.zeros((idx.size, theta.shape[1]))
    g[:, 0] = alpha.sum(1)
    g[:, 1] = 0.5 * v * np.einsum("rij,rij->r", W, csum[idx])
    for sl, C, il2, bD2 in zip(layout.ls_slices, corr, inv_ls2, layout.block_D2):
        g[:, sl] = v[:, None] * il2[idx] * np.einsum("rij,ijd->rd", W * C[idx], bD2)
    g[:, layout.noise_index] = 0.5 * noise[idx] * np.trace(W, axis1=1, axis2=2)
    grads[idx] = g
    return values, grads


def log_marginal_likelihood(hyper: GPHyper, Z, y, jitter: float = MIN_JITTER,
                            ) -> tuple[float, np.ndarray]:
    """Gaussian log density of ``y`` under mean ``hyper.mean`` and covariance K + noise*I.

    Returns the value and its gradient with respect to ``hyper.pack()``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if Z.shape[0] != y.size:
        raise ValueError("Z and y disagree on the number of points")
    layout = _Layout(hyper.blocks, Z)
    values, grads = _batched_lml(hyper.pack()[None, :], layout, y, jitter)
    if not np.isfinite(values[0]):
        raise GPFitError("covariance factorisation failed")
    return float(values[0]), grads[0]


@dataclass
class FitConfig:
    n_iter: int = 500
    lr: float = 0.05
    n_restarts: int = 5
    lengthscale_init: tuple[float, float] = (0.05, 2.0)
    noise_init: float = 1e-2
    patience: int = 50
    tol: float = 1e-4
    jitter: float = MIN_JITTER


def _clip(theta: np.ndarray, layout: _Layout) -> np.ndarray:
    theta[:, 0] = np.clip(theta[:, 0], *_MEAN_RANGE)
    theta[:, 1] = np.clip(theta[:, 1], *_LOG_VAR_RANGE)
    for sl in layout.ls_slices:
        theta[:, sl] = np.clip(theta[:, sl], *_LOG_LS_RANGE)
    theta[:, layout.noise_index] = np.clip(theta[:, layout.noise_index], *_LOG_NOISE_RANGE)
    return theta


def random_init(blocks: Blocks, rng: np.random.Generator, config: FitConfig) -> np.ndarray:
    lo, hi = np.log(config.lengthscale_init[0]), np.log(config.lengthscale_init[1])
    parts = [np.array([0.0, 0.0])]
    parts += [rng.uniform(lo, hi, size=len(b)) for b in blocks]
    parts.append(np.array([math.log(config.noise_init)]))
    return np.concatenate(parts)


def maximize_lml(layout: _Layout, y: np.ndarray, starts: np.ndarray,
                 config: FitConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched Adam ascent from each row of ``starts``.

    Returns the best parameters seen per restart, their log-likelihoods, and
    the log-likelihoods at the starting points.
    """
    theta = _clip(np.array(starts, dtype=float), layout)
    values, grads = _batched_lml(theta, layout, y, config.jitter)
    initial = values.copy()
    best_theta = theta.copy()
    best_val = values.copy()
    stale = np.zeros(theta.shape[0], dtype=int)
    active = np.isfinite(values)
    opt = Adam(lr=config.lr, maximize=True)
    for _ in range(config.n_iter):
        if not active.any():
            break
        # restarts freeze once stale; only the active rows are re-evaluated
        theta[active] = _clip(opt.step(theta, grads), layout)[active]
        v, g = _batched_lml(theta[active], layout, y, config.jitter)
        values[active], grads[active] = v, g
        improved = values > best_val + config.tol
        better = values > best_val
        best_theta[better] = theta[better]
        best_val[better] = values[better]
        stale = np.where(improved, 0, stale + 1)
        active &= stale < config.patience
    return best_theta, best_val, initial


@dataclass
class FittedGP:
    """A trained surrogate. Hyperparameters live in normalised units."""

    hyper: GPHyper
    Z: np.ndarray              # training inputs, natural units
    y: np.ndarray              # training outputs, natural units
    lower: np.ndarray
    width: np.ndarray
    y_mean: float
    y_scale: float
    jitter: float = MIN_JITTER
    log_likelihood_std: float = math.nan
    initial_log_likelihood_std: float = math.nan
    _U: np.ndarray = field(init=False, repr=False)
    _ys: np.ndarray = field(init=False, repr=False)
    _K: np.ndarray = field(init=False, repr=False)
    _L: np.ndarray = field(init=False, repr=False)
    _alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._U = (self.Z - self.lower) / self.width
        self._ys = (self.y - self.y_mean) / self.y_scale
        n = self._U.shape[0]
        self._K = self.hyper.kernel.matrix(self._U, self._U) + self.hyper.noise * np.eye(n)
        self._L, self.jitter = _factor(self._K, self.jitter)
        self._alpha = self._solve(self._ys - self.hyper.mean)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def blocks(self) -> Blocks:
        return self.hyper.blocks

    @property
    def log_likelihood(self) -> float:
        """Log marginal likelihood on the original output scale."""
        return self.log_likelihood_std - self.n * math.log(self.y_scale)

    @property
    def prior_sd_std(self) -> float:
        return math.sqrt(self.hyper.kernel.variance * len(self.blocks))

    def _solve(self, B: np.ndarray) -> np.ndarray:
        """Solve (K + noise*I) X = B; refinement removes most of the jitter bias."""
        X = cho_solve((self._L, True), B)
        for _ in range(2):
            X = X + cho_solve((self._L, True), B - self._K @ X)
        return X

    def to_unit(self, Z) -> np.ndarray:
        return (np.asarray(Z, dtype=float) - self.lower) / self.width

    def predict_unit(self, U, grad: bool = False):
        """Mean and sd (original output units) at unit-cube points ``U`` (q, D).

        With ``grad`` also returns d mean/dU and d sd/dU, each (q, D).
        """
        U = np.atleast_2d(np.asarray(U, dtype=float))
        kern = self.hyper.kernel
        q = U.shape[0]
        kstar = np.zeros((q, self.n))
        dk = np.zeros((q, self.n, U.shape[1])) if grad else None
        for dims, ls in zip(kern.blocks, kern.lengthscales):
            idx = list(dims)
            diff = (U[:, None, idx] - self._U[None, :, idx]) / ls
            C = kern.variance * np.exp(-(diff * diff).sum(-1))
            kstar += C
            if grad:
                dk[:, :, idx] += C[:, :, None] * (-2.0 * diff / ls)
        mean_std = self.hyper.mean + kstar @ self._alpha
        V = self._solve(kstar.T)
        prior = kern.variance * len(kern.blocks)
        var_std = prior - np.einsum("qn,nq->q", kstar, V)
        # below n*eps*prior the difference is cancellation noise, not variance
        var_std[var_std <= self.n * np.finfo(float).eps * prior] = 0.0
        sd_std = np.sqrt(var_std)
        mean = self.y_mean + self.y_scale * mean_std
        sd = self.y_scale * sd_std
        if not grad:
            return mean, sd
        dmean = self.y_scale * np.einsum("qnd,n->qd", dk, self._alpha)
        dvar = -2.0 * np.einsum("qnd,nq->qd", dk, V)
        with np.errstate(divide="ignore", invalid="ignore"):
            dsd = np.where(sd_std[:, None] > 1e-12, dvar / (2.0 * sd_std[:, None]), 0.0)
        return mean, sd, dmean, self.y_scale * dsd

    def predict(self, Z):
        """Predictive mean and standard deviation of the latent function.

        A single point returns floats, a 2-D array returns arrays.
        """
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        mean, sd = self.predict_unit(self.to_unit(np.atleast_2d(Z)))
        if single:
            return float(mean[0]), float(sd[0])
        return mean, sd

    def to_json(self) -> str:
        record = {
            "format": "sugarpolicy.FittedGP/1",
            "blocks": [list(b) for b in self.blocks],
            "mean": self.hyper.mean,
            "variance": self.hyper.kernel.variance,
            "lengthscales": [np.asarray(ls).tolist() for ls in self.hyper.kernel.lengthscales],
            "noise": self.hyper.noise,
            "lower": self.lower.tolist(),
            "width": self.width.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "jitter": self.jitter,
            "log_likelihood_std": self.log_likelihood_std,
            "Z": self.Z.tolist(),
            "y": self.y.tolist(),
        }
        return json.dumps(record, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FittedGP":
        rec = json.loads(text)
        blocks = _as_blocks(rec["blocks"])
        kernel = KernelSpec(blocks, tuple(np.asarray(ls, dtype=float) for ls in rec["lengthscales"]),
                            rec["variance"])
        return cls(
            hyper=GPHyper(rec["mean"], kernel, rec["noise"]),
            Z=np.asarray(rec["Z"], dtype=float),
            y=np.asarray(rec["y"], dtype=float),
            lower=np.asarray(rec["lower"], dtype=float),
            width=np.asarray(rec["width"], dtype=float),
            y_mean=rec["y_mean"],
            y_scale=rec["y_scale"],
            jitter=rec["jitter"],
            log_likelihood_std=rec["log_likelihood_std"],
        )


def normalisation(Z: np.ndarray, y: np.ndarray, bounds: Optional[Bounds]):
    if bounds is not None:
        lower, width = bounds.lower.copy(), bounds.width.copy()
    else:
        lower = Z.min(0)
        width = Z.max(0) - lower
        width[width <= 0] = 1.0
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    if not np.isfinite(y_scale) or y_scale <= 0:
        y_scale = 1.0
    return lower, width, y_mean, y_scale


def fit_ml(blocks: Sequence[Sequence[int]], Z, y, bounds: Optional[Bounds] = None,
           config: Optional[FitConfig] = None, rng: Optional[np.random.Generator] = None,
           init: Sequence[np.ndarray] = ()) -> FittedGP:
    """Maximum-likelihood fit with ``config.n_restarts`` random restarts.

    ``init`` supplies extra starting points (packed, normalised units) that are
    tried in addition to the random ones, e.g. a previous optimum.
    """
    blocks = _as_blocks(blocks)
    config = config or FitConfig()
    rng = rng if rng is not None else np.random.default_rng()
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if Z.shape[0] != y.size:
        raise ValueError("Z and y disagree on the number of points")
    if y.size < 1:
        raise ValueError("need at least one training point")
    lower, width, y_mean, y_scale = normalisation(Z, y, bounds)
    U = (Z - lower) / width
    ys = (y - y_mean) / y_scale
    layout = _Layout(blocks, U)
    starts = [np.asarray(s, dtype=float) for s in init]
    starts += [random_init(blocks, rng, config) for _ in range(config.n_restarts)]
    starts = np.array(starts)
    if starts.shape[1] != layout.n_params:
        raise ValueError("initial parameter vector has the wrong length")
    best_theta, best_val, initial = maximize_lml(layout, ys, starts, config)
    if not np.any(np.isfinite(best_val)):
        raise GPFitError(
            f"all {len(starts)} restarts failed to factorise the covariance "
            f"(n={y.size}, blocks={blocks}, y range=[{y.min():.4g}, {y.max():.4g}])")
    k = int(np.nanargmax(np.where(np.isfinite(best_val), best_val, -np.inf)))
    hyper = GPHyper.unpack(best_theta[k], blocks)
    return FittedGP(
        hyper=hyper, Z=Z, y=y, lower=lower, width=width, y_mean=y_mean, y_scale=y_scale,
        jitter=config.jitter, log_likelihood_std=float(best_val[k]),
        initial_log_likelihood_std=float(initial[k]),
    )


def fitted_from_hyper(hyper: GPHyper, Z, y, bounds: Optional[Bounds] = None,
                      jitter: float = MIN_JITTER) -> FittedGP:
    """Wrap fixed hyperparameters (normalised units) as a FittedGP, no training."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    lower, width, y_mean, y_scale = normalisation(Z, y, bounds)
    U = (Z - lower) / width
    value, _ = log_marginal_likelihood(hyper, U, (y - y_mean) / y_scale, jitter)
    return FittedGP(hyper=hyper, Z=Z, y=y, lower=lower, width=width, y_mean=y_mean,
                    y_scale=y_scale, jitter=jitter, log_likelihood_std=value)
