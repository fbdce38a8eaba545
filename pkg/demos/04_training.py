"""
Training with TT-HF
===================

Devices take SGD steps, clusters average over their D2D graphs, and the
server averages one sampled device per cluster every tau steps.  With no
D2D rounds this is FedAvg with cluster sampling.
"""

# %%
import numpy as np

from tthf.data import partition_label_skew, split_pool, synth_classification
from tthf.engine import FULL, SAMPLED, Hyperparameters, run_fedavg_baseline, run_tthf, trace_array
from tthf.model import LossModel
from tthf.topology import build_network

pool, test = split_pool(synth_classification(50 * 60 + 2000, seed=1), 2000, seed=5)
ds = partition_label_skew(pool, 50, 10, 3, 10, seed=2)
topo = build_network(50, 10, target_rho=0.7, seed=3)
svm = LossModel("squared_svm", 0.01, 10)
base = dict(gamma=10.0, alpha=50.0, tau=20, total_steps=200, batch_size=16)

# %% Fixed cadence: G rounds every 5 local steps.
for G in (0, 1, 5):
    hp = Hyperparameters(**base, consensus="fixed", rounds=G, period=5)
    tr = run_tthf(ds, topo, svm, hp, eval_set=test)
    print(f"G={G}: final loss {tr[-1].global_loss:.4f}, accuracy {tr[-1].accuracy:.3f}")

# %% Adaptive cadence: as many rounds as needed to keep errors under eta_t * phi.
hp = Hyperparameters(**base, consensus="adaptive", phi=1.0)
tr = run_tthf(ds, topo, svm, hp, eval_set=test)
rounds = trace_array(tr, "gamma_rounds")
print("adaptive: final loss", round(tr[-1].global_loss, 4), " mean rounds per cluster-step", rounds[1:].mean().round(2))
print("rounds per cluster, first 5 steps:\n", rounds[1:6])

# %% Baselines.
for part, tau in ((FULL, 1), (SAMPLED, 20)):
    tr = run_fedavg_baseline(ds, svm, Hyperparameters(**base), part, tau=tau, eval_set=test)
    print(f"FedAvg {part}, tau={tau}: final loss {tr[-1].global_loss:.4f}")
