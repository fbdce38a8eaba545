"""
Federated datasets
==================

Two kinds of data feed the simulator: a least-squares task whose optimum is
known in closed form, and classification data split so that every device
only sees a few labels.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from tthf.data import load_idx, partition_label_skew, synth_classification, synth_quadratic, write_idx
from tthf.model import LossModel, global_gradient, measure_gradient_diversity

# %% Least squares.  Heterogeneity shifts each cluster's target model.
for h in (0.0, 0.5, 1.0, 2.0):
    ds, w_star = synth_quadratic(dim=5, I=25, N=5, points_per_device=40, heterogeneity=h, seed=0)
    delta = measure_gradient_diversity(LossModel(), ds, [w_star, np.zeros(5)])
    grad = np.linalg.norm(global_gradient(LossModel(), ds, w_star))
    print(f"h={h}: delta={delta:.3f}, |grad F(w*)|={grad:.1e}")

# %% Label skew: 3 of 10 classes per device, classes rotating across devices.
pool = synth_classification(50 * 60, num_classes=10, dim=20, seed=1)
ds = partition_label_skew(pool, I=50, N=10, labels_per_device=3, num_classes=10, seed=2)
for i in range(4):
    print(f"device {i}: labels {ds.labels_per_device[i]}, {len(ds.shards[i])} points")
print("every point used once:", sorted(np.concatenate(ds.source_indices).tolist()) == list(range(len(pool))))

# %% IDX files (the MNIST encoding) round-trip through the loader.
with tempfile.TemporaryDirectory() as d:
    imgs = np.random.default_rng(0).integers(0, 256, (4, 28, 28), dtype=np.uint8)
    write_idx(Path(d) / "images", Path(d) / "labels", imgs, [3, 1, 4, 1])
    data = load_idx(Path(d) / "images", Path(d) / "labels")
    print(data.x.shape, data.x.min(), data.x.max(), data.y)
