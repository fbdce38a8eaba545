"""Two-timescale hybrid federated training loop and FedAvg baselines.

Time ``t`` counts local SGD iterations.  Within each interval of ``tau``
iterations every device takes an SGD step to an intermediate model, then
each cluster optionally runs some rounds of neighbour averaging.  At the end
of the interval the server averages one sampled device per cluster (or every
device, for the full-participation baseline) and broadcasts the result.

Between aggregations the trace reports the global model the server *would*
form from the devices already sampled for the coming aggregation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FederatedDataset, LabeledPool
from .errors import ConfigError, InvalidLambda
from .model import LossModel, estimate_beta, minibatch_indices
from .topology import ClusterTopology, run_consensus

NO_CONSENSUS = "none"
FIXED = "fixed"
ADAPTIVE = "adaptive"

FULL = "full"
SAMPLED = "one-per-cluster"


@dataclass
class Hyperparameters:
    """Step size ``gamma/(t+alpha)``, interval length ``tau`` and the D2D policy.

    ``consensus`` is ``"none"``, ``"fixed"`` (``rounds`` rounds every
    ``period`` iterations) or ``"adaptive"`` (round count chosen each step so
    that every device's consensus error is at most ``eta_t * phi``).
    ``batch_size=None`` means full-batch gradients.
    """

    gamma: float
    alpha: float
    tau: int
    total_steps: int
    consensus: str = NO_CONSENSUS
    rounds: int = 0
    period: int = 5
    phi: float = 0.0
    batch_size: int | None = 16
    master_seed: int = 0
    theorem_mode: bool = False

    def eta(self, t) -> float:
        return self.gamma / (t + self.alpha)

    def validate(self, mu: float | None = None, beta: float | None = None) -> None:
        if self.tau < 1:
            raise ConfigError("tau must be at least 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        if self.consensus not in (NO_CONSENSUS, FIXED, ADAPTIVE):
            raise ConfigError(f"unknown consensus policy {self.consensus!r}")
        if self.rounds < 0 or self.period < 1:
            raise ConfigError("rounds must be >= 0 and period >= 1")
        if self.phi < 0:
            raise ConfigError("phi must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.alpha > 0 or not self.gamma >= 0:
            raise ConfigError("alpha must be positive and gamma nonnegative")
        if not self.theorem_mode:
            return
        if mu is None or beta is None:
            raise ConfigError("theorem mode needs mu and beta")
        if not self.gamma > 1.0 / mu:
            raise ConfigError(f"gamma={self.gamma} must exceed 1/mu={1.0 / mu}")
        if self.alpha < self.gamma * beta**2 / mu:
            raise ConfigError(f"alpha={self.alpha} must be at least gamma*beta^2/mu={self.gamma * beta**2 / mu}")
        if self.eta(0) > 1.0 / beta:
            raise ConfigError("eta_0 exceeds 1/beta")
        if self.consensus != ADAPTIVE or not self.phi > 0:
            raise ConfigError("theorem mode needs the adaptive consensus policy with phi > 0")


@dataclass
class TraceRecord:
    t: int
    global_loss: float
    global_loss_gap: float
    accuracy: float
    dispersion_A: float
    consensus_eps2: np.ndarray
    max_consensus_err: np.ndarray
    gamma_rounds: np.ndarray
    upsilon: np.ndarray
    aggregated: bool = False
    transmitting: int = 0
    cum_energy: float = 0.0
    cum_delay: float = 0.0
    cluster_means_pre: np.ndarray | None = None
    cluster_means_post: np.ndarray | None = None


class GlobalObjective:
    """Pooled evaluation of the weighted global loss ``F``."""

    def __init__(self, model: LossModel, ds: FederatedDataset):
        self.model = model
        xs, ys, ws = [], [], []
        for c, members in enumerate(ds.clusters):
            rho = ds.cluster_weights[c]
            for i in members:
                sh = ds.shards[i]
                xs.append(sh.x)
                ys.append(sh.y)
                ws.append(np.full(len(sh), rho / (len(members) * len(sh))))
        self.x = np.vstack(xs)
        self.y = np.concatenate(ys)
        self.weights = np.concatenate(ws)

    def __call__(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        return float(self.weights @ self.model.point_losses(self.x, self.y, w) + 0.5 * self.model.reg * (w @ w))

    def gradient(self, w) -> np.ndarray:
        # weights sum to one, so the per-point reg terms add up to reg*w
        return self.weights @ self.model.point_gradients(self.x, self.y, np.asarray(w, dtype=np.float64))

    def minimize(self, w0=None, gtol: float = 1e-10) -> np.ndarray:
        """Numerical minimiser (L-BFGS); the objective is strongly convex."""
        from scipy.optimize import minimize

        dim = self.x.shape[1]
        start = self.model.zeros(dim) if w0 is None else np.asarray(w0, dtype=np.float64)
        res = minimize(self, start, jac=self.gradient, method="L-BFGS-B",
                       options={"gtol": gtol, "ftol": 1e-15, "maxiter": 10000})
        return res.x


class _ShardStack:
    """Devices grouped by shard size so gradients can be batched."""

    def __init__(self, ds: FederatedDataset):
        sizes = np.array([len(s) for s in ds.shards])
        self.sizes = sizes
        self.groups = []
        for D in np.unique(sizes):
            dev = np.flatnonzero(sizes == D)
            X = np.stack([ds.shards[i].x for i in dev])
            Y = np.stack([ds.shards[i].y for i in dev])
            self.groups.append((int(D), dev, X, Y))


def device_streams(master_seed: int, num_devices: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    """Independent mini-batch streams per device plus one sampling stream."""
    children = np.random.SeedSequence(master_seed).spawn(num_devices + 1)
    return [np.random.default_rng(c) for c in children[:num_devices]], np.random.default_rng(children[-1])


def replicate_seeds(seed: int, count: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, r]).generate_state(1)[0]) for r in range(count)]


def local_sgd_step(
    models: np.ndarray,
    ds: FederatedDataset,
    model: LossModel,
    eta: float,
    batch_size: int | None,
    rngs: Sequence[np.random.Generator],
    _stack: _ShardStack | None = None,
) -> np.ndarray:
    """One SGD step on every device; returns the intermediate models."""
    stack = _stack or _ShardStack(ds)
    out = np.empty_like(models)
    for D, dev, X, Y in stack.groups:
        b = D if batch_size is None else batch_size
        idx = np.stack([minibatch_indices(rngs[i], D, b) for i in dev])
        rows = np.arange(len(dev))[:, None]
        g = model.mean_gradient(X[rows, idx], Y[rows, idx], models[dev])
        out[dev] = models[dev] - eta * g
    return out


def max_pairwise_distance(Z: np.ndarray) -> float:
    if Z.shape[0] < 2:
        return 0.0
    diff = Z[:, None, :] - Z[None, :, :]
    return float(np.sqrt(np.max(np.einsum("ijm,ijm->ij", diff, diff))))


def schedule_gamma_remark1(eta_t: float, phi: float, s_c: int, upsilon: float, lambda_c: float) -> int:
    """Fewest D2D rounds with ``lambda_c**G * sqrt(s_c) * upsilon <= eta_t * phi``."""
    if not 0.0 < lambda_c < 1.0:
        raise InvalidLambda(f"lambda_c={lambda_c} is outside (0, 1)")
    if phi < 0 or upsilon < 0:
        raise ValueError("phi and upsilon must be nonnegative")
    start = math.sqrt(s_c) * upsilon
    target = eta_t * phi
    if upsilon == 0.0 or target >= start:
        return 0
    if target == 0.0:
        raise ValueError("a zero error target needs infinitely many rounds")
    g = max(0, math.ceil(math.log(target / start) / math.log(lambda_c) - 1e-12))
    while lambda_c**g * start > target:
        g += 1
    while g > 0 and lambda_c ** (g - 1) * start <= target:
        g -= 1
    return g


def _adaptive_rounds(eta_t, phi, topo: ClusterTopology, upsilon) -> int:
    if topo.lam <= 0.0:
        # one round averages exactly
        return 0 if upsilon == 0.0 or eta_t * phi >= math.sqrt(topo.s_c) * upsilon else 1
    return schedule_gamma_remark1(eta_t, phi, topo.s_c, upsilon, topo.lam)


def consensus_phase(
    intermediates: np.ndarray,
    topologies: Sequence[ClusterTopology],
    hp: Hyperparameters,
    t: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run each cluster's D2D rounds for step ``t``.

    Returns the updated models and per-cluster round counts and max pairwise
    distances of the intermediates.
    """
    W = intermediates.copy()
    N = len(topologies)
    rounds = np.zeros(N, dtype=np.int64)
    ups = np.zeros(N)
    eta_t = hp.eta(t)
    for c, topo in enumerate(topologies):
        Z = intermediates[topo.members]
        ups[c] = max_pairwise_distance(Z)
        if hp.consensus == FIXED:
            rounds[c] = hp.rounds if t % hp.period == 0 else 0
        elif hp.consensus == ADAPTIVE:
            rounds[c] = _adaptive_rounds(eta_t, hp.phi, topo, ups[c])
        if rounds[c]:
            W[topo.members] = run_consensus(Z, topo.matrix, int(rounds[c]))
    return W, rounds, ups


def sample_devices(clusters: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    return np.array([members[rng.integers(len(members))] for members in clusters], dtype=np.intp)


def _members(groups) -> list[np.ndarray]:
    return [g.members if isinstance(g, ClusterTopology) else np.asarray(g) for g in groups]


def global_aggregate(
    models: np.ndarray,
    clusters,
    rng: np.random.Generator | None = None,
    sampled: np.ndarray | None = None,
    participation: str = SAMPLED,
) -> np.ndarray:
    """Server model from the device models.

    ``one-per-cluster``: weighted sum of one uniformly drawn device per
    cluster, weights ``s_c / I``.  ``full``: plain mean over all devices.
    """
    if participation == FULL:
        # same arithmetic as the sampled path, so singleton clusters agree bitwise
        return np.full(len(models), 1.0 / len(models)) @ models
    groups = _members(clusters)
    if sampled is None:
        sampled = sample_devices(groups, rng if rng is not None else np.random.default_rng())
    sizes = np.array([len(m) for m in groups], dtype=np.float64)
    return (sizes / sizes.sum()) @ models[sampled]


def broadcast(models: np.ndarray, w_hat: np.ndarray) -> None:
    models[...] = w_hat


def _dispersion(intermediates, groups, rho) -> tuple[float, np.ndarray]:
    means = np.array([intermediates[m].mean(axis=0) for m in groups])
    wbar = rho @ means
    d = means - wbar
    return float(rho @ np.einsum("cm,cm->c", d, d)), means


def _simulate(
    ds: FederatedDataset,
    topologies: Sequence[ClusterTopology] | None,
    model: LossModel,
    hp: Hyperparameters,
    participation: str,
    w0=None,
    w_star=None,
    eval_set: LabeledPool | None = None,
    keep_cluster_means: bool = False,
) -> list[TraceRecord]:
    groups = _members(topologies) if topologies is not None else [np.asarray(m) for m in ds.clusters]
    N = len(groups)
    I = ds.num_devices
    rho = np.array([len(m) for m in groups], dtype=np.float64) / I
    if hp.batch_size is not None:
        small = min(len(s) for s in ds.shards)
        if hp.batch_size > small:
            raise ConfigError(f"batch_size {hp.batch_size} exceeds the smallest shard ({small})")
    objective = GlobalObjective(model, ds)
    f_star = objective(w_star) if w_star is not None else math.nan
    stack = _ShardStack(ds)
    rngs, sample_rng = device_streams(hp.master_seed, I)
    w0 = model.zeros(ds.feature_dim) if w0 is None else np.asarray(w0, dtype=np.float64)
    W = np.tile(w0, (I, 1))
    sampled = sample_devices(groups, sample_rng) if participation == SAMPLED else None

    def evaluate(w_hat):
        f = objective(w_hat)
        acc = math.nan
        if eval_set is not None:
            acc = float(np.mean(model.predict(eval_set.x, w_hat) == eval_set.y))
        return f, f - f_star, acc

    zeros_f = np.zeros(N)
    f, gap, acc = evaluate(w0)
    trace = [TraceRecord(0, f, gap, acc, 0.0, zeros_f, zeros_f, np.zeros(N, dtype=np.int64), zeros_f)]
    for t in range(1, hp.total_steps + 1):
        Wt = local_sgd_step(W, ds, model, hp.eta(t - 1), hp.batch_size, rngs, stack)
        if topologies is not None and hp.consensus != NO_CONSENSUS:
            W, rounds, ups = consensus_phase(Wt, topologies, hp, t)
        else:
            W = Wt
            rounds = np.zeros(N, dtype=np.int64)
            ups = np.array([max_pairwise_distance(Wt[m]) for m in groups])
        A, means_pre = _dispersion(Wt, groups, rho)
        eps2 = np.empty(N)
        emax = np.empty(N)
        for c, m in enumerate(groups):
            e = W[m] - means_pre[c]
            n2 = np.einsum("im,im->i", e, e)
            eps2[c] = n2.mean()
            emax[c] = math.sqrt(n2.max())
        means_post = np.array([W[m].mean(axis=0) for m in groups]) if keep_cluster_means else None
        aggregated = t % hp.tau == 0
        w_hat = global_aggregate(W, groups, sampled=sampled, participation=participation)
        transmitting = 0
        if aggregated:
            broadcast(W, w_hat)
            transmitting = I if participation == FULL else N
            if participation == SAMPLED:
                sampled = sample_devices(groups, sample_rng)
        f, gap, acc = evaluate(w_hat)
        trace.append(
            TraceRecord(
                t, f, gap, acc, A, eps2, emax, rounds, ups, aggregated, transmitting,
                cluster_means_pre=means_pre if keep_cluster_means else None,
                cluster_means_post=means_post,
            )
        )
    return trace


def run_tthf(
    ds: FederatedDataset,
    topologies: Sequence[ClusterTopology],
    model: LossModel,
    hp: Hyperparameters,
    w0=None,
    w_star=None,
    eval_set: LabeledPool | None = None,
    keep_cluster_means: bool = False,
) -> list[TraceRecord]:
    """Two-timescale hybrid training with one sampled device per cluster."""
    if len(topologies) != ds.num_clusters:
        raise ConfigError("need one topology per cluster")
    for topo, members in zip(topologies, ds.clusters):
        if not np.array_equal(np.sort(topo.members), np.sort(members)):
            raise ConfigError("topology members do not match the dataset clusters")
    hp.validate(model.mu, estimate_beta(model, ds) if hp.theorem_mode else None)
    return _simulate(ds, topologies, model, hp, SAMPLED, w0, w_star, eval_set, keep_cluster_means)


def run_fedavg_baseline(
    ds: FederatedDataset,
    model: LossModel,
    hp: Hyperparameters,
    participation: str = FULL,
    tau: int | None = None,
    w0=None,
    w_star=None,
    eval_set: LabeledPool | None = None,
) -> list[TraceRecord]:
    """Local SGD with periodic server averaging and no D2D rounds."""
    if participation not in (FULL, SAMPLED):
        raise ConfigError(f"unknown participation {participation!r}")
    if tau is not None:
        hp = Hyperparameters(**{**hp.__dict__, "tau": tau})
    hp = Hyperparameters(**{**hp.__dict__, "consensus": NO_CONSENSUS, "theorem_mode": False})
    hp.validate()
    return _simulate(ds, None, model, hp, participation, w0, w_star, eval_set)


def trace_array(trace: Sequence[TraceRecord], name: str) -> np.ndarray:
    return np.array([getattr(r, name) for r in trace])
