"""Convex loss models, SGD gradient estimates and estimators of the
smoothness, noise and heterogeneity constants used by the convergence bounds.

Two losses are supported, both with an ``reg/2 |w|^2`` term folded into the
per-point loss so that local, cluster and global losses are plain averages:

``least_squares``
    ``1/2 (x.w - y)^2``; parameter vector has length m.
``squared_svm``
    one-vs-rest ``1/2 sum_k max(0, 1 - t_k x.w_k)^2`` with ``t_k = +1`` for the
    true class and ``-1`` otherwise; parameters are an ``(m, K)`` matrix
    stored flattened row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import FederatedDataset, Shard
from .errors import BatchTooLarge, EmptyShard

LEAST_SQUARES = "least_squares"
SQUARED_SVM = "squared_svm"


def as_model_vector(w) -> np.ndarray:
    """Validate and return ``w`` as a finite 1-D float64 array."""
    v = np.array(w, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("model vector contains NaN or Inf")
    return v


@dataclass(frozen=True)
class LossModel:
    kind: str = LEAST_SQUARES
    reg: float = 1.0
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in (LEAST_SQUARES, SQUARED_SVM):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.reg > 0:
            raise ValueError("regularisation must be positive")
        if self.kind == SQUARED_SVM and (self.num_classes is None or self.num_classes < 2):
            raise ValueError("squared SVM needs num_classes >= 2")

    @property
    def mu(self) -> float:
        """Certified strong-convexity constant."""
        return self.reg

    def param_dim(self, feature_dim: int) -> int:
        return feature_dim if self.kind == LEAST_SQUARES else feature_dim * self.num_classes

    def zeros(self, feature_dim: int) -> np.ndarray:
        return np.zeros(self.param_dim(feature_dim))

    # Vectorised kernels.  ``x`` is (..., n, m), ``y`` (..., n), ``w`` (..., M).

    def point_losses(self, x, y, w) -> np.ndarray:
        """Data term of every point's loss (regulariser excluded)."""
        if self.kind == LEAST_SQUARES:
            r = np.einsum("...nm,...m->...n", x, w) - y
            return 0.5 * r * r
        h = self._hinge(x, y, w)
        return 0.5 * np.einsum("...nk,...nk->...n", h, h)

    def mean_gradient(self, x, y, w) -> np.ndarray:
        """Gradient of the mean point loss over axis -2 of ``x``, plus ``reg*w``."""
        n = x.shape[-2]
        if self.kind == LEAST_SQUARES:
            r = np.einsum("...nm,...m->...n", x, w) - y
            g = np.einsum("...nm,...n->...m", x, r) / n
        else:
            t = self._targets(y)
            h = self._hinge(x, y, w, t)
            g = -np.einsum("...nm,...nk->...mk", x, h * t) / n
            g = g.reshape(*g.shape[:-2], -1)
        return g + self.reg * w

    def point_gradients(self, x, y, w) -> np.ndarray:
        """Per-point gradients ``(n, M)`` of the full per-point loss."""
        if self.kind == LEAST_SQUARES:
            r = x @ w - y
            return x * r[:, None] + self.reg * w
        t = self._targets(y)
        h = self._hinge(x, y, w, t)
        g = -(x[:, :, None] * (h * t)[:, None, :]).reshape(x.shape[0], -1)
        return g + self.reg * w

    def predict(self, x, w) -> np.ndarray:
        if self.kind == LEAST_SQUARES:
            return x @ w
        return np.argmax(x @ w.reshape(x.shape[-1], self.num_classes), axis=-1)

    def _targets(self, y):
        y = np.asarray(y).astype(np.intp)
        return np.where(y[..., None] == np.arange(self.num_classes), 1.0, -1.0)

    def _hinge(self, x, y, w, t=None):
        if t is None:
            t = self._targets(y)
        W = w.reshape(*w.shape[:-1], x.shape[-1], self.num_classes)
        margins = np.einsum("...nm,...mk->...nk", x, W)
        return np.maximum(0.0, 1.0 - t * margins)


@dataclass
class SgdContext:
    batch_size: int = 16
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def _check_shard(shard: Shard):
    if len(shard) == 0:
        raise EmptyShard("shard holds no data points")


def local_loss(model: LossModel, shard: Shard, w) -> float:
    _check_shard(shard)
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean(model.point_losses(shard.x, shard.y, w)) + 0.5 * model.reg * (w @ w))


def full_gradient(model: LossModel, shard: Shard, w) -> np.ndarray:
    _check_shard(shard)
    return model.mean_gradient(shard.x, shard.y, np.asarray(w, dtype=np.float64))


def minibatch_indices(rng: np.random.Generator, size: int, batch_size: int) -> np.ndarray:
    """Uniform sample of ``batch_size`` distinct indices out of ``size``."""
    if batch_size > size:
        raise BatchTooLarge(f"batch of {batch_size} from a shard of {size}")
    if batch_size == size:
        return np.arange(size)
    return rng.permutation(size)[:batch_size]


def sgd_gradient(model: LossModel, shard: Shard, w, ctx: SgdContext) -> np.ndarray:
    """Mini-batch gradient, sampled without replacement from ``ctx.rng``."""
    _check_shard(shard)
    idx = minibatch_indices(ctx.rng, len(shard), ctx.batch_size)
    return model.mean_gradient(shard.x[idx], shard.y[idx], np.asarray(w, dtype=np.float64))


def cluster_loss(model: LossModel, ds: FederatedDataset, c: int, w) -> float:
    members = ds.clusters[c]
    return float(np.mean([local_loss(model, ds.shards[i], w) for i in members]))


def cluster_gradient(model: LossModel, ds: FederatedDataset, c: int, w) -> np.ndarray:
    members = ds.clusters[c]
    return np.mean([full_gradient(model, ds.shards[i], w) for i in members], axis=0)


def global_loss(model: LossModel, ds: FederatedDataset, w) -> float:
    return float(sum(rho * cluster_loss(model, ds, c, w) for c, rho in enumerate(ds.cluster_weights)))


def global_gradient(model: LossModel, ds: FederatedDataset, w) -> np.ndarray:
    return sum(rho * cluster_gradient(model, ds, c, w) for c, rho in enumerate(ds.cluster_weights))


def estimate_beta(model: LossModel, ds: FederatedDataset) -> float:
    """Largest curvature over devices: ``max_i lambda_max(X_i^T X_i / D_i) + reg``.

    For the squared SVM this is the curvature with every hinge active, which
    bounds the Hessian for any active set.
    """
    top = 0.0
    for sh in ds.shards:
        G = sh.x.T @ sh.x / len(sh)
        top = max(top, float(np.linalg.eigvalsh(G)[-1]))
    return top + model.reg


def estimate_sigma2(
    model: LossModel,
    ds: FederatedDataset,
    ctx: SgdContext,
    probe_points: Sequence,
    draws: int = 1000,
) -> float:
    """Worst empirical mini-batch gradient variance over devices and probes."""
    if len(probe_points) == 0:
        raise ValueError("need at least one probe point")
    worst = 0.0
    for sh in ds.shards:
        D = len(sh)
        if ctx.batch_size > D:
            raise BatchTooLarge(f"batch of {ctx.batch_size} from a shard of {D}")
        if ctx.batch_size == D:
            continue
        idx = np.argsort(ctx.rng.random((draws, D)), axis=1)[:, : ctx.batch_size]
        for w in probe_points:
            w = np.asarray(w, dtype=np.float64)
            P = model.point_gradients(sh.x, sh.y, w)
            est = P[idx].mean(axis=1)
            dev = est - P.mean(axis=0)
            worst = max(worst, float(np.mean(np.einsum("dm,dm->d", dev, dev))))
    return worst


def minibatch_variance(model: LossModel, shard: Shard, w, batch_size: int) -> float:
    """Exact variance of the without-replacement mini-batch gradient."""
    P = model.point_gradients(shard.x, shard.y, np.asarray(w, dtype=np.float64))
    D = P.shape[0]
    if batch_size >= D:
        return 0.0
    dev = P - P.mean(axis=0)
    s2 = float(np.einsum("dm,dm->", dev, dev)) / D
    return s2 * (D - batch_size) / (batch_size * (D - 1))


def measure_gradient_diversity(model: LossModel, ds: FederatedDataset, probe_points: Iterable) -> float:
    """Largest ``|grad F_c(w) - grad F(w)|`` over clusters and probe points."""
    worst = 0.0
    any_probe = False
    rho = ds.cluster_weights
    for w in probe_points:
        any_probe = True
        gc = np.array([cluster_gradient(model, ds, c, w) for c in range(ds.num_clusters)])
        g = rho @ gc
        worst = max(worst, float(np.max(np.linalg.norm(gc - g, axis=1))))
    if not any_probe:
        raise ValueError("need at least one probe point")
    return worst


def accuracy(model: LossModel, x, y, w) -> float:
    return float(np.mean(model.predict(x, np.asarray(w)) == np.asarray(y)))


def default_probe_points(w0, w_star, rng: np.random.Generator, extra: int = 3, spread: float = 1.0) -> list[np.ndarray]:
    """Start, optimum, their midpoint and a few random points around the segment."""
    w0 = np.asarray(w0, dtype=np.float64)
    w_star = np.asarray(w_star, dtype=np.float64)
    pts = [w0, w_star, 0.5 * (w0 + w_star)]
    scale = spread * max(np.linalg.norm(w0 - w_star), 1.0) / np.sqrt(w0.size)
    for _ in range(extra):
        lam = rng.random()
        pts.append(lam * w0 + (1 - lam) * w_star + scale * rng.standard_normal(w0.size))
    return pts
