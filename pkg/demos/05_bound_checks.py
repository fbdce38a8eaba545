"""
Checking the convergence bounds
===============================

In theorem mode (gamma > 1/mu, alpha >= gamma beta^2/mu, adaptive D2D with
phi > 0) the loss gap must stay under nu/(t + alpha).  Expectations are
replicate means over independent seeds.
"""

# %%
import numpy as np

from tthf import analysis as an
from tthf.data import synth_quadratic
from tthf.engine import Hyperparameters, replicate_seeds, run_tthf
from tthf.model import LossModel, estimate_beta
from tthf.topology import build_network

ds, w_star = synth_quadratic(5, 25, 5, 40, 1.0, seed=0)
topo = build_network(25, 5, 0.7, seed=0)
model = LossModel(reg=1.0)
beta = estimate_beta(model, ds)
gamma = 2.0
print(f"beta={beta:.3f}; theorem mode needs alpha >= {gamma * beta**2:.3f}")

hp = Hyperparameters(gamma=gamma, alpha=20.0, tau=10, total_steps=500, consensus="adaptive",
                     phi=1.0, batch_size=8, theorem_mode=True)
w0 = np.full(5, 3.0)
traces = []
for s in replicate_seeds(0, 20):
    hp.master_seed = s
    traces.append(run_tthf(ds, topo, model, hp, w0=w0, w_star=w_star))

# %% Constants and the envelope.
c = an.estimate_constants(model, ds, hp, w0, w_star, seed=1, draws=200)
gaps = an.replicate_matrix(traces, "global_loss_gap")
nu, env = an.theorem2_envelope(c, gaps[0, 0])
mean_gap = gaps.mean(axis=0)
print(f"sigma^2={c.sigma2:.4f} delta={c.delta:.3f} nu={nu:.3e}")
print("envelope violations:", int(np.sum(mean_gap > env(np.arange(len(mean_gap))))))

# %% Dispersion against its bound, inside every interval.
A = an.replicate_matrix(traces, "dispersion_A").mean(axis=0)
bounds = np.array([an.prop1_bound(c, t, (t - 1) // hp.tau * hp.tau) for t in range(1, len(A))])
print("max A/bound:", float(np.max(A[1:] / bounds)))

# %% One-step inequality with replicate standard errors.
disp = np.array([an.one_step_dispersion(tr, hp.tau) for tr in traces])
res = an.theorem1_check(gaps, disp, c)
print(f"one-step residual >= -2 SE on {res.fraction_ok:.1%} of steps; min residual {res.min_residual:.2e}")
