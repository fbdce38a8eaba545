"""Federated datasets: synthetic tasks, label-skew partitions and IDX files."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BadMagic, CountMismatch, InsufficientData, InvalidShape, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class LabeledPoint(NamedTuple):
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class Shard:
    """One device's local data: features ``(D_i, m)`` and targets ``(D_i,)``."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class LabeledPool:
    """A pooled dataset stored column-wise; iterating yields ``LabeledPoint``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise InvalidShape(f"features {self.x.shape} and labels {self.y.shape} disagree")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        return LabeledPoint(self.x[i], self.y[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint]):
        x = np.array([p.x for p in points], dtype=np.float64)
        y = np.array([p.y for p in points])
        return cls(x, y)


@dataclass
class FederatedDataset:
    shards: list[Shard]
    clusters: list[np.ndarray]
    num_classes: int | None = None
    labels_per_device: list[tuple[int, ...]] | None = None
    source_indices: list[np.ndarray] | None = None
    cluster_of: np.ndarray = field(init=False)

    def __post_init__(self):
        I = len(self.shards)
        owner = np.full(I, -1, dtype=np.intp)
        for c, members in enumerate(self.clusters):
            if len(members) == 0:
                raise InvalidShape(f"cluster {c} is empty")
            if np.any(owner[members] >= 0):
                raise InvalidShape("clusters overlap")
            owner[members] = c
        if np.any(owner < 0):
            raise InvalidShape("some devices belong to no cluster")
        for i, sh in enumerate(self.shards):
            if len(sh) == 0:
                raise InsufficientData(f"device {i} holds no data")
        self.cluster_of = owner

    @property
    def num_devices(self) -> int:
        return len(self.shards)

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def feature_dim(self) -> int:
        return self.shards[0].x.shape[1]

    @property
    def cluster_weights(self) -> np.ndarray:
        """Cluster weights s_c / I."""
        return np.array([len(m) for m in self.clusters], dtype=np.float64) / self.num_devices

    def pooled(self) -> LabeledPool:
        return LabeledPool(np.vstack([s.x for s in self.shards]), np.concatenate([s.y for s in self.shards]))


def contiguous_clusters(num_devices: int, num_clusters: int) -> list[np.ndarray]:
    if num_clusters < 1 or num_devices % num_clusters:
        raise InvalidShape(f"I={num_devices} is not divisible by N={num_clusters}")
    s = num_devices // num_clusters
    return [np.arange(c * s, (c + 1) * s) for c in range(num_clusters)]


def synth_quadratic(
    dim: int,
    I: int,
    N: int,
    points_per_device: int,
    heterogeneity: float,
    seed=None,
    reg: float = 1.0,
    noise: float = 0.1,
) -> tuple[FederatedDataset, np.ndarray]:
    """Least-squares task with a closed-form optimum and tunable cluster skew.

    One cluster's worth of device feature matrices is drawn and reused by
    every cluster, so all clusters share the same curvature.  Cluster ``c``
    generates targets from ``w_true + heterogeneity * u_c``; the gradient
    diversity is then exactly proportional to ``heterogeneity``.

    Returns the dataset and the minimiser of the pooled objective
    ``sum_c (s_c/I) mean_{i in c} F_i`` with ``F_i`` the device's mean
    squared error (halved) plus ``reg/2 |w|^2``.
    """
    clusters = contiguous_clusters(I, N)
    s = I // N
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(dim)
    base_x = rng.standard_normal((s, points_per_device, dim)) / np.sqrt(dim)
    base_noise = noise * rng.standard_normal((s, points_per_device))
    shifts = rng.standard_normal((N, dim))
    shards = [None] * I
    for c, members in enumerate(clusters):
        w_c = w_true + heterogeneity * shifts[c]
        for k, i in enumerate(members):
            x = base_x[k].copy()
            shards[i] = Shard(x, x @ w_c + base_noise[k])
    ds = FederatedDataset(shards, clusters)
    return ds, least_squares_optimum(ds, reg)


def least_squares_optimum(ds: FederatedDataset, reg: float) -> np.ndarray:
    """Closed-form minimiser of the weighted regularised least-squares loss."""
    dim = ds.feature_dim
    G = np.zeros((dim, dim))
    b = np.zeros(dim)
    for w_c, members in zip(ds.cluster_weights, ds.clusters):
        for i in members:
            sh = ds.shards[i]
            D = len(sh)
            G += w_c / len(members) * (sh.x.T @ sh.x) / D
            b += w_c / len(members) * (sh.x.T @ sh.y) / D
    return np.linalg.solve(G + reg * np.eye(dim), b)


def synth_classification(
    n: int,
    num_classes: int = 10,
    dim: int = 20,
    separation: float = 1.5,
    seed=None,
    bias: bool = True,
) -> LabeledPool:
    """Gaussian class clusters, balanced labels.

    Class means are drawn on a sphere of radius ``separation``; points scatter
    around them with per-coordinate standard deviation ``2/sqrt(dim)``.  A constant feature is appended when
    ``bias`` is set.
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = means[y] + rng.standard_normal((n, dim)) / np.sqrt(dim) * 2.0
    if bias:
        x = np.hstack([x, np.ones((n, 1))])
    return LabeledPool(x, y.astype(np.int64))


def split_pool(pool: LabeledPool, n_test: int, seed=None) -> tuple[LabeledPool, LabeledPool]:
    """Seeded random train/test split."""
    if not 0 <= n_test <= len(pool):
        raise ValueError("n_test out of range")
    perm = np.random.default_rng(seed).permutation(len(pool))
    tr, te = np.sort(perm[n_test:]), np.sort(perm[:n_test])
    return LabeledPool(pool.x[tr], pool.y[tr]), LabeledPool(pool.x[te], pool.y[te])


def device_label_sets(I: int, labels_per_device: int, num_classes: int, seed=None) -> list[tuple[int, ...]]:
    """Round-robin label assignment over a seeded class ordering.

    Device ``i`` takes ``labels_per_device`` consecutive classes of the
    ordering starting at ``offset + i * labels_per_device``.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    offset = int(rng.integers(num_classes))
    sets = []
    for i in range(I):
        start = offset + i * labels_per_device
        sets.append(tuple(sorted(int(order[(start + j) % num_classes]) for j in range(labels_per_device))))
    return sets


def partition_label_skew(
    pool: LabeledPool | Sequence[LabeledPoint],
    I: int,
    N: int,
    labels_per_device: int,
    num_classes: int,
    seed=None,
) -> FederatedDataset:
    """Split a labelled pool so each device sees only a few classes.

    Points of each class are shuffled (seeded) and split as evenly as
    possible among the devices holding that class; the first devices in index
    order absorb the remainder.
    """
    if not isinstance(pool, LabeledPool):
        pool = LabeledPool.from_points(pool)
    if not 1 <= labels_per_device <= num_classes:
        raise ValueError("labels_per_device must lie in [1, num_classes]")
    clusters = contiguous_clusters(I, N)
    sets = device_label_sets(I, labels_per_device, num_classes, seed)
    rng = np.random.default_rng(np.random.SeedSequence(_words(seed)).spawn(1)[0])
    labels = np.asarray(pool.y).astype(np.int64)
    parts: list[list[np.ndarray]] = [[] for _ in range(I)]
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        holders = [i for i in range(I) if k in sets[i]]
        if len(idx) == 0:
            continue
        if not holders:
            raise InsufficientData(f"class {k} is assigned to no device; its points would be dropped")
        idx = rng.permutation(idx)
        for i, chunk in zip(holders, np.array_split(idx, len(holders))):
            parts[i].append(chunk)
    shards, sources = [], []
    for i in range(I):
        src = np.sort(np.concatenate(parts[i])) if parts[i] else np.empty(0, dtype=np.intp)
        if len(src) == 0:
            raise InsufficientData(f"device {i} would receive no data points (labels {sets[i]})")
        sources.append(src)
        shards.append(Shard(pool.x[src], labels[src]))
    return FederatedDataset(shards, clusters, num_classes, sets, sources)


def _words(seed) -> list[int]:
    if seed is None:
        return [0]
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _read_header(buf: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < 4:
        raise TruncatedFile("missing magic number", path)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagic(f"magic 0x{got:08x}, expected 0x{magic:08x}", path)
    if len(buf) < need:
        raise TruncatedFile("header is incomplete", path)
    return struct.unpack(">" + "I" * ndims, buf[4:need])


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike) -> LabeledPool:
    """Read an IDX image/label file pair (MNIST encoding).

    Pixels are flattened row-major and scaled to [0, 1].
    """
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()
    n_img, rows, cols = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    pix = n_img * rows * cols
    if len(ibuf) - 16 < pix:
        raise TruncatedFile(f"expected {pix} pixel bytes, found {len(ibuf) - 16}", images_path)
    if len(lbuf) - 8 < n_lab:
        raise TruncatedFile(f"expected {n_lab} label bytes, found {len(lbuf) - 8}", labels_path)
    if n_img != n_lab:
        raise CountMismatch(f"{n_img} images but {n_lab} labels in {labels_path}", images_path)
    x = np.frombuffer(ibuf, dtype=np.uint8, count=pix, offset=16).reshape(n_img, rows * cols)
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n_lab, offset=8)
    return LabeledPool(x.astype(np.float64) / 255.0, y.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``uint8`` images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())
