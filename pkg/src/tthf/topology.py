"""Cluster D2D graphs, consensus weights and their contraction factors.

Every cluster is an undirected, connected graph over its member devices.  A
consensus matrix ``V`` on that graph is symmetric, row-stochastic and
supported on the edges; its deflated spectral radius
``rho(V - 11^T/s)`` is the factor by which one round of neighbour averaging
shrinks the disagreement between devices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatch,
    DisconnectedGraph,
    NoConvergence,
    ToleranceNotMet,
)

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class ClusterGraph:
    """Undirected D2D graph of one cluster.

    ``adjacency`` is indexed by local position (0..s_c-1); ``node_ids`` maps
    local positions to global device indices.
    """

    node_ids: tuple[int, ...]
    adjacency: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        s = len(self.node_ids)
        if adj.shape != (s, s):
            raise DimensionMismatch(f"adjacency shape {adj.shape} does not match {s} nodes")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric (undirected graph)")
        if np.any(np.diag(adj)):
            raise ValueError("self-loops are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def s_c(self) -> int:
        return len(self.node_ids)

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        """Symmetric edge set in local indices: both (i, j) and (j, i)."""
        i, j = np.nonzero(self.adjacency)
        return frozenset(zip(i.tolist(), j.tolist()))

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        return np.flatnonzero(self.adjacency[i]).tolist()

    def is_connected(self) -> bool:
        if self.s_c <= 1:
            return True
        n, _ = connected_components(self.adjacency, directed=False)
        return n == 1

    @classmethod
    def from_edges(cls, s_c: int, edges, node_ids: Sequence[int] | None = None):
        adj = np.zeros((s_c, s_c), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        ids = tuple(range(s_c)) if node_ids is None else tuple(node_ids)
        return cls(ids, adj)


@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    weights: np.ndarray
    lam: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def s_c(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class ClusterTopology:
    """A cluster's members together with its graph and consensus matrix."""

    graph: ClusterGraph
    matrix: ConsensusMatrix
    members: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.array(self.graph.node_ids, dtype=np.intp)
        m.setflags(write=False)
        object.__setattr__(self, "members", m)

    @property
    def s_c(self) -> int:
        return self.graph.s_c

    @property
    def lam(self) -> float:
        return self.matrix.lam


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _bridge_components(adj: np.ndarray, dist: np.ndarray) -> np.ndarray:
    # Join components greedily with the shortest available cross edge.
    adj = adj.copy()
    while True:
        n, labels = connected_components(adj, directed=False)
        if n == 1:
            return adj
        cross = labels[:, None] != labels[None, :]
        masked = np.where(cross, dist, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        adj[i, j] = adj[j, i] = True


def generate_random_geometric_cluster(
    s_c: int,
    radius: float,
    seed=None,
    node_ids: Sequence[int] | None = None,
    max_attempts: int = 10,
) -> ClusterGraph:
    """Random geometric graph on the unit square.

    Nodes are placed uniformly at random; ``(i, j)`` is an edge iff the
    Euclidean distance is at most ``radius``.  Disconnected draws are redrawn
    up to ``max_attempts`` times, after which the last draw is patched with
    minimum-distance bridging edges.
    """
    if s_c < 1:
        raise ValueError("s_c must be positive")
    ids = tuple(range(s_c)) if node_ids is None else tuple(int(i) for i in node_ids)
    if len(ids) != s_c:
        raise DimensionMismatch("node_ids length differs from s_c")
    rng = np.random.default_rng(seed)
    for _ in range(max(1, max_attempts)):
        pos = rng.random((s_c, 2))
        dist = _pairwise_distances(pos)
        adj = dist <= radius
        np.fill_diagonal(adj, False)
        if s_c == 1 or connected_components(adj, directed=False)[0] == 1:
            return ClusterGraph(ids, adj, pos)
    return ClusterGraph(ids, _bridge_components(adj, dist), pos)


def spectral_radius(V, s_c: int | None = None, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Largest absolute eigenvalue of ``V - 11^T/s_c`` by power iteration.

    Iterates on the square of the deflated matrix, which is positive
    semidefinite, so a ``+-rho`` pair does not stall the iteration.  A block
    of three vectors with Rayleigh-Ritz extraction keeps near-equal leading
    eigenvalues from slowing convergence.  Stops when the eigen-residual of
    the leading Ritz pair drops below ``tol``.
    """
    V = np.asarray(V, dtype=np.float64)
    s = V.shape[0] if s_c is None else int(s_c)
    if V.shape != (s, s):
        raise DimensionMismatch(f"matrix shape {V.shape} does not match s_c={s}")
    D = V - 1.0 / s
    if not np.any(np.abs(D) > 1e-15):
        return 0.0
    X = np.linalg.qr(np.random.default_rng(0x5EED).standard_normal((s, min(3, s))))[0]
    for _ in range(max_iter):
        Q = np.linalg.qr(D @ (D @ X))[0]
        DQ = D @ Q
        theta, vecs = np.linalg.eigh(DQ.T @ DQ)
        X = Q @ vecs[:, ::-1]
        x = X[:, 0]
        top = float(theta[-1])
        if top <= 0.0:
            return 0.0
        if np.linalg.norm(D @ (D @ x) - top * x) <= tol:
            return math.sqrt(top)
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def deflated_spectral_radius(V, s_c: int | None = None) -> float:
    """``spectral_radius`` with a dense symmetric eigensolver as fallback."""
    try:
        return spectral_radius(V, s_c)
    except NoConvergence:
        V = np.asarray(V, dtype=np.float64)
        s = V.shape[0] if s_c is None else s_c
        return float(np.max(np.abs(np.linalg.eigvalsh(V - 1.0 / s))))


def metropolis_weights(g: ClusterGraph) -> ConsensusMatrix:
    """Metropolis-Hastings consensus weights on a connected graph."""
    if not g.is_connected():
        raise DisconnectedGraph(f"cluster graph over nodes {g.node_ids} is not connected")
    deg = g.degrees
    s = g.s_c
    W = np.zeros((s, s))
    i, j = np.nonzero(g.adjacency)
    W[i, j] = 1.0 / (1.0 + np.maximum(deg[i], deg[j]))
    W[np.arange(s), np.arange(s)] = 1.0 - W.sum(axis=1)
    return ConsensusMatrix(W, deflated_spectral_radius(W, s))


def mixing_violations(V: ConsensusMatrix | np.ndarray, g: ClusterGraph, atol: float = 1e-12) -> list[str]:
    """Names of the consensus-matrix conditions that fail (empty if none)."""
    W = V.weights if isinstance(V, ConsensusMatrix) else np.asarray(V, dtype=np.float64)
    s = g.s_c
    bad = []
    off_graph = ~g.adjacency & ~np.eye(s, dtype=bool)
    if np.any(W[off_graph] != 0.0):
        bad.append("sparsity")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > atol:
        bad.append("row-stochastic")
    if np.max(np.abs(W - W.T)) > atol:
        bad.append("symmetric")
    rho = float(np.max(np.abs(np.linalg.eigvalsh((W + W.T) / 2 - 1.0 / s))))
    if not rho < 1.0:
        bad.append("spectral-radius")
    if isinstance(V, ConsensusMatrix) and not (rho - 1e-9 <= V.lam < 1.0 or (s == 1 and V.lam == 0.0)):
        bad.append("lambda")
    return bad


def tune_radius_for_spectral_target(
    s_c: int,
    target_rho: float,
    seed=None,
    tol: float = 0.05,
    max_iter: int = 50,
    node_ids: Sequence[int] | None = None,
    accept_closest: bool = False,
) -> tuple[ClusterGraph, ConsensusMatrix]:
    """Bisect the connection radius until the deflated spectral radius of the
    Metropolis matrix lands within ``tol`` of ``target_rho``.

    Node positions stay fixed during a bisection so edge sets grow
    monotonically with the radius.  When the achievable spectra of one
    placement straddle the target without hitting it, a fresh placement is
    drawn.  ``max_iter`` bounds the total number of graphs evaluated.
    """
    if not 0.0 < target_rho < 1.0:
        raise ValueError("target_rho must lie in (0, 1)")
    best = None
    best_err = np.inf
    evals = 0
    placement = 0
    while evals < max_iter:
        pseed = np.random.SeedSequence([*_seed_words(seed), placement])
        lo, hi = 0.0, SQRT2
        while evals < max_iter and hi - lo > 1e-6:
            mid = 0.5 * (lo + hi)
            g = generate_random_geometric_cluster(s_c, mid, pseed, node_ids=node_ids)
            V = metropolis_weights(g)
            evals += 1
            err = abs(V.lam - target_rho)
            if err < best_err:
                best, best_err = (g, V), err
            if err <= tol:
                return g, V
            if V.lam > target_rho:
                lo = mid
            else:
                hi = mid
            if s_c <= 2:
                break
        placement += 1
        if s_c <= 2:
            break
    if accept_closest:
        return best
    raise ToleranceNotMet(
        f"closest deflated spectral radius {best[1].lam:.4f} misses target {target_rho} by more than {tol}",
        best=best,
    )


def _seed_words(seed) -> list[int]:
    if seed is None:
        return [0]
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def run_consensus(initial, V: ConsensusMatrix | np.ndarray, rounds: int) -> np.ndarray:
    """Apply ``rounds`` steps of ``z <- V z`` to the stacked device vectors.

    ``initial`` is a sequence of s_c equal-length vectors (or an ``(s_c, M)``
    array); the result is a new ``(s_c, M)`` array.
    """
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    try:
        Z = np.array(initial, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("device vectors differ in length") from exc
    if Z.dtype == object or Z.ndim not in (1, 2):
        raise DimensionMismatch("device vectors differ in length")
    W = V.weights if isinstance(V, ConsensusMatrix) else np.asarray(V, dtype=np.float64)
    if W.shape[0] != Z.shape[0]:
        raise DimensionMismatch(f"{Z.shape[0]} vectors for a {W.shape[0]}-node cluster")
    for _ in range(rounds):
        Z = W @ Z
    return Z


def build_network(
    num_devices: int,
    num_clusters: int,
    target_rho: float = 0.7,
    seed=None,
    radius: float | None = None,
    tol: float = 0.05,
) -> list[ClusterTopology]:
    """Equal-size clusters of consecutive device indices.

    With ``radius`` set every cluster is a plain random geometric graph;
    otherwise each cluster is tuned towards ``target_rho`` and the closest
    achievable graph is kept when the target cannot be met.
    """
    if num_clusters < 1 or num_devices % num_clusters:
        raise ValueError("num_devices must be a positive multiple of num_clusters")
    s = num_devices // num_clusters
    ss = np.random.SeedSequence(_seed_words(seed))
    out = []
    for c, child in enumerate(ss.spawn(num_clusters)):
        ids = range(c * s, (c + 1) * s)
        if radius is not None:
            g = generate_random_geometric_cluster(s, radius, child, node_ids=ids)
            V = metropolis_weights(g)
        else:
            words = [int(w) for w in child.generate_state(2)]
            g, V = tune_radius_for_spectral_target(
                s, target_rho, words, tol=tol, node_ids=ids, accept_closest=True
            )
        out.append(ClusterTopology(g, V))
    return out
