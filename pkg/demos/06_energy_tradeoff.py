"""
Energy and delay
================

D2D rounds are cheap when short-range links cost little next to uplinks.
Here the same traces are priced under two energy ratios.
"""

# %%
import numpy as np

from tthf import analysis as an
from tthf.data import partition_label_skew, split_pool, synth_classification
from tthf.engine import FULL, SAMPLED, Hyperparameters, run_fedavg_baseline, run_tthf
from tthf.model import LossModel
from tthf.topology import build_network

pool, test = split_pool(synth_classification(50 * 60 + 2000, separation=1.0, seed=1), 2000, seed=5)
ds = partition_label_skew(pool, 50, 10, 3, 10, seed=2)
topo = build_network(50, 10, 0.7, seed=3)
svm = LossModel("squared_svm", 0.01, 10)
w0 = np.random.default_rng(9).standard_normal(svm.param_dim(ds.feature_dim))
base = dict(gamma=20.0, alpha=50.0, total_steps=400, batch_size=16)

tthf = run_tthf(ds, topo, svm, Hyperparameters(**base, tau=40, consensus="adaptive", phi=1.0), w0=w0, eval_set=test)
fedavg = run_fedavg_baseline(ds, svm, Hyperparameters(**base, tau=1), FULL, w0=w0, eval_set=test)

# %%
for ratio in (0.01, 1.0):
    rm = an.ResourceModel(e_d2d=ratio, e_glob=1.0, d_d2d=0.01, d_glob=0.25)
    e_t, d_t = an.resource_accounting(tthf, rm, topo, SAMPLED)
    e_f, d_f = an.resource_accounting(fedavg, rm, topo, FULL)
    print(f"E_D2D/E_Glob = {ratio}")
    print(f"  TT-HF  : 60% of peak at t={an.time_to_accuracy(tthf, 0.6)}, energy {an.cost_to_accuracy(tthf, e_t, 0.6):.1f}, delay {an.cost_to_accuracy(tthf, d_t, 0.6):.2f}")
    print(f"  FedAvg : 60% of peak at t={an.time_to_accuracy(fedavg, 0.6)}, energy {an.cost_to_accuracy(fedavg, e_f, 0.6):.1f}, delay {an.cost_to_accuracy(fedavg, d_f, 0.6):.2f}")
