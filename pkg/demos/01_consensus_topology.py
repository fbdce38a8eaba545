"""
D2D graphs and consensus
========================

Each cluster talks over a random geometric graph.  Metropolis weights turn
the graph into a mixing matrix; its deflated spectral radius says how fast
neighbour averaging erases disagreement.
"""

# %%
import math

import numpy as np

from tthf.topology import (
    ClusterGraph,
    mixing_violations,
    generate_random_geometric_cluster,
    metropolis_weights,
    run_consensus,
    tune_radius_for_spectral_target,
)
from tthf.analysis import lemma1_bound

# %% A path of three devices, small enough to check by hand.
path = ClusterGraph.from_edges(3, [(0, 1), (1, 2)])
V = metropolis_weights(path)
print(V.weights)            # [[2/3 1/3 0] [1/3 1/3 1/3] [0 1/3 2/3]]
print("lambda =", V.lam)    # 2/3

z = run_consensus([0.0, 3.0, 6.0], V, 1)
print("one round:", z)      # (1, 3, 5); the mean 3 never moves

# %% A random cluster of ten devices.
g = generate_random_geometric_cluster(10, radius=0.45, seed=4)
V = metropolis_weights(g)
print(len(g.edges) // 2, "edges, degrees", g.degrees, "lambda =", round(V.lam, 3))
print("violated conditions:", mixing_violations(V, g) or "none")

# %% Tune the radius so the contraction factor sits near 0.7.
g, V = tune_radius_for_spectral_target(10, 0.7, seed=1)
print("tuned lambda =", round(V.lam, 3))

# %% Error after G rounds against the geometric bound lambda^G sqrt(s) Upsilon.
rng = np.random.default_rng(0)
Z0 = rng.standard_normal((10, 4))
ups = max(np.linalg.norm(a - b) for a in Z0 for b in Z0)
for G in (0, 1, 2, 5, 10, 20):
    err = np.linalg.norm(run_consensus(Z0, V, G) - Z0.mean(axis=0), axis=1).max()
    print(f"G={G:2d}  measured {err:.2e}  bound {lemma1_bound(V.lam, G, 10, ups):.2e}")
