"""
Losses and the constants behind the bounds
==========================================

The convergence bounds need mu, beta, sigma^2 and delta.  mu is the
regulariser; the others are measured from data.
"""

# %%
import numpy as np

from tthf.data import partition_label_skew, synth_classification, synth_quadratic
from tthf.model import (
    LossModel,
    SgdContext,
    estimate_beta,
    estimate_sigma2,
    full_gradient,
    measure_gradient_diversity,
    minibatch_variance,
)

ds, w_star = synth_quadratic(5, 25, 5, 40, 1.0, seed=0)
ls = LossModel("least_squares", reg=1.0)
probes = [w_star, np.zeros(5), np.ones(5)]

# %% Smoothness is exact: the largest local curvature plus the regulariser.
print("mu =", ls.mu, " beta =", round(estimate_beta(ls, ds), 4))

# %% Mini-batch noise falls as the batch grows.
for b in (1, 4, 16, 40):
    s2 = estimate_sigma2(ls, ds, SgdContext(b, np.random.default_rng(0)), probes)
    exact = max(minibatch_variance(ls, sh, w, b) for sh in ds.shards for w in probes)
    print(f"batch {b:2d}: sampled sigma^2 {s2:.4f}, exact {exact:.4f}")

# %% Gradient diversity across clusters.
print("delta =", round(measure_gradient_diversity(ls, ds, probes), 4))

# %% The squared SVM works on flattened (features x classes) weights.
pool = synth_classification(20 * 40, num_classes=10, seed=1)
cls = partition_label_skew(pool, 20, 4, 3, 10, seed=2)
svm = LossModel("squared_svm", reg=0.01, num_classes=10)
w = np.zeros(svm.param_dim(cls.feature_dim))
print("SVM parameters:", w.size, " beta =", round(estimate_beta(svm, cls), 3))
print("gradient norm at zero:", round(float(np.linalg.norm(full_gradient(svm, cls.shards[0], w))), 3))
