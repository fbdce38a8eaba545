import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tthf.data import FederatedDataset, Shard, partition_label_skew, split_pool, synth_classification, synth_quadratic
from tthf.engine import (
    ADAPTIVE,
    FIXED,
    FULL,
    NO_CONSENSUS,
    SAMPLED,
    Hyperparameters,
    broadcast,
    consensus_phase,
    device_streams,
    global_aggregate,
    local_sgd_step,
    max_pairwise_distance,
    run_fedavg_baseline,
    run_tthf,
    sample_devices,
    schedule_gamma_remark1,
    trace_array,
)
from tthf.errors import ConfigError, InvalidLambda
from tthf.model import LossModel, SgdContext, global_gradient, global_loss, sgd_gradient
from tthf.topology import ClusterGraph, ClusterTopology, build_network, metropolis_weights

LS = LossModel(reg=1.0)


def quad(I=10, N=2, seed=0, h=1.0, ppd=20, dim=3):
    return synth_quadratic(dim, I, N, ppd, h, seed=seed)


def hp(**kw):
    base = dict(gamma=1.0, alpha=5.0, tau=5, total_steps=20, batch_size=4)
    return Hyperparameters(**{**base, **kw})


def path3_topology(ids=(0, 1, 2)):
    g = ClusterGraph.from_edges(3, [(0, 1), (1, 2)], node_ids=ids)
    return ClusterTopology(g, metropolis_weights(g))


# local steps

def test_zero_step_size_leaves_models():
    ds, _ = quad()
    W = np.random.default_rng(0).standard_normal((10, 3))
    rngs, _ = device_streams(0, 10)
    np.testing.assert_array_equal(local_sgd_step(W, ds, LS, 0.0, 4, rngs), W)


def test_full_batch_step_is_gradient_descent():
    ds, _ = quad(I=2, N=1, dim=2)
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    rngs, _ = device_streams(0, 2)
    out = local_sgd_step(W, ds, LS, 0.1, None, rngs)
    for i, sh in enumerate(ds.shards):
        # closed-form least-squares gradient
        g = sh.x.T @ (sh.x @ W[i] - sh.y) / len(sh) + W[i]
        np.testing.assert_allclose(out[i], W[i] - 0.1 * g, atol=1e-15)


def test_identical_devices_with_identical_streams_agree():
    ds, _ = quad(I=2, N=1)
    same = FederatedDataset([ds.shards[0], ds.shards[0]], [np.array([0, 1])])
    W = np.ones((2, 3))
    rngs = [np.random.default_rng(4), np.random.default_rng(4)]
    out = local_sgd_step(W, same, LS, 0.2, 5, rngs)
    np.testing.assert_array_equal(out[0], out[1])


def test_batched_step_equals_per_device_evaluation():
    pool = synth_classification(300, num_classes=4, dim=3, seed=0)
    ds = partition_label_skew(pool, 6, 2, 2, 4, seed=0)  # unequal shard sizes
    model = LossModel("squared_svm", 0.1, 4)
    W = np.random.default_rng(1).standard_normal((6, model.param_dim(4)))
    rngs, _ = device_streams(7, 6)
    ref_rngs = copy.deepcopy(rngs)
    out = local_sgd_step(W, ds, model, 0.3, 8, rngs)
    for i in range(6):
        g = sgd_gradient(model, ds.shards[i], W[i], SgdContext(8, ref_rngs[i]))
        np.testing.assert_allclose(out[i], W[i] - 0.3 * g, rtol=0, atol=1e-14)


# consensus phase

def test_path3_fixed_round_by_hand():
    topo = [path3_topology()]
    Z = np.array([[0.0], [3.0], [6.0]])
    W, rounds, ups = consensus_phase(Z, topo, hp(consensus=FIXED, rounds=1, period=1), t=1)
    np.testing.assert_allclose(W.ravel(), [1, 3, 5], atol=1e-14)
    assert rounds.tolist() == [1] and ups[0] == pytest.approx(6.0)


def test_fixed_policy_respects_period():
    topo = [path3_topology()]
    Z = np.array([[0.0], [3.0], [6.0]])
    W, rounds, _ = consensus_phase(Z, topo, hp(consensus=FIXED, rounds=2, period=5), t=3)
    assert rounds.tolist() == [0]
    np.testing.assert_array_equal(W, Z)


def test_identical_intermediates_need_no_rounds():
    topo = [path3_topology()]
    Z = np.tile([[1.5, -2.0]], (3, 1))
    W, rounds, ups = consensus_phase(Z, topo, hp(consensus=ADAPTIVE, phi=1.0), t=4)
    assert rounds.tolist() == [0] and ups.tolist() == [0.0]
    np.testing.assert_array_equal(W, Z)


def test_max_pairwise_distance_exact():
    Z = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    assert max_pairwise_distance(Z) == 5.0
    assert max_pairwise_distance(Z[:1]) == 0.0


# round scheduler

def test_scheduler_reference_values():
    assert schedule_gamma_remark1(0.1, 1.0, 4, 0.0, 0.5) == 0
    # boundary: eta*phi equals sqrt(s)*upsilon
    assert schedule_gamma_remark1(0.2, 5.0, 4, 0.5, 0.5) == 0
    # sqrt(4)*4 = 8 = 8*eta*phi with eta*phi = 1
    assert schedule_gamma_remark1(0.5, 2.0, 4, 4.0, 0.5) == 3
    for lam in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidLambda):
            schedule_gamma_remark1(0.1, 1.0, 4, 1.0, lam)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-3, 10), st.integers(1, 30), st.floats(0, 100), st.floats(0.01, 0.99))
def test_scheduler_is_smallest_sufficient_round_count(eta, phi, s, ups, lam):
    g = schedule_gamma_remark1(eta, phi, s, ups, lam)
    start = math.sqrt(s) * ups
    assert lam**g * start <= eta * phi
    if g > 0:
        assert lam ** (g - 1) * start > eta * phi


# aggregation

def test_aggregate_of_identical_models():
    W = np.tile([2.0, -1.0], (6, 1))
    clusters = [np.array([0, 1, 2]), np.array([3, 4, 5])]
    for part in (FULL, SAMPLED):
        got = global_aggregate(W, clusters, np.random.default_rng(0), participation=part)
        np.testing.assert_allclose(got, W[0], rtol=1e-15)


def test_equal_clusters_take_plain_mean_of_sampled():
    W = np.arange(12.0).reshape(6, 2)
    clusters = [np.array([0, 1, 2]), np.array([3, 4, 5])]
    got = global_aggregate(W, clusters, sampled=np.array([1, 5]))
    np.testing.assert_allclose(got, (W[1] + W[5]) / 2)


def test_sampled_aggregate_is_unbiased():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((9, 3))
    clusters = [np.array([0, 1]), np.array([2, 3, 4, 5]), np.array([6, 7, 8])]
    rho = np.array([2, 4, 3]) / 9
    want = sum(r * W[m].mean(axis=0) for r, m in zip(rho, clusters))
    draws = np.array([global_aggregate(W, clusters, rng) for _ in range(10000)])
    se = draws.std(axis=0) / 100
    assert np.all(np.abs(draws.mean(axis=0) - want) <= 4 * se)


def test_sampling_picks_members():
    clusters = [np.array([4, 7]), np.array([1])]
    picks = sample_devices(clusters, np.random.default_rng(1))
    assert picks[0] in (4, 7) and picks[1] == 1


def test_broadcast_is_bitwise():
    W = np.random.default_rng(0).standard_normal((4, 3))
    w = np.array([0.1, 0.2, 0.3])
    broadcast(W, w)
    assert all(np.array_equal(row, w) for row in W)


# full runs

def test_runs_are_deterministic():
    ds, w_star = quad()
    topo = build_network(10, 2, 0.7, seed=1)
    a = run_tthf(ds, topo, LS, hp(consensus=ADAPTIVE, phi=0.5, master_seed=3), w_star=w_star)
    b = run_tthf(ds, topo, LS, hp(consensus=ADAPTIVE, phi=0.5, master_seed=3), w_star=w_star)
    for name in ("global_loss", "dispersion_A", "gamma_rounds", "upsilon", "max_consensus_err"):
        np.testing.assert_array_equal(trace_array(a, name), trace_array(b, name))
    assert len(a) == 21 and [r.t for r in a] == list(range(21))
    assert [r.aggregated for r in a] == [t > 0 and t % 5 == 0 for t in range(21)]


def test_no_rounds_reduces_to_sampled_fedavg():
    ds, w_star = quad(I=12, N=3)
    topo = build_network(12, 3, 0.7, seed=2)
    for cfg in (dict(consensus=NO_CONSENSUS), dict(consensus=FIXED, rounds=0)):
        a = run_tthf(ds, topo, LS, hp(master_seed=9, **cfg), w_star=w_star)
        b = run_fedavg_baseline(ds, LS, hp(master_seed=9), SAMPLED, w_star=w_star)
        np.testing.assert_array_equal(trace_array(a, "global_loss"), trace_array(b, "global_loss"))


def test_singleton_clusters_make_participation_modes_agree():
    ds, _ = quad(I=6, N=6)
    a = run_fedavg_baseline(ds, LS, hp(master_seed=1), SAMPLED)
    b = run_fedavg_baseline(ds, LS, hp(master_seed=1), FULL)
    np.testing.assert_array_equal(trace_array(a, "global_loss"), trace_array(b, "global_loss"))
    topo = build_network(6, 6, 0.7, seed=0)
    c = run_tthf(ds, topo, LS, hp(master_seed=1, consensus=NO_CONSENSUS))
    np.testing.assert_array_equal(trace_array(a, "global_loss"), trace_array(c, "global_loss"))


def test_tau1_full_batch_fedavg_is_centralized_gd():
    ds, w_star = quad(I=6, N=2, dim=2)
    h = hp(tau=1, batch_size=None, gamma=1.0, alpha=4.0, total_steps=30)
    tr = run_fedavg_baseline(ds, LS, h, FULL)
    w = np.zeros(2)
    for t in range(30):
        w = w - h.eta(t) * global_gradient(LS, ds, w)
        assert tr[t + 1].global_loss == pytest.approx(global_loss(LS, ds, w), abs=1e-12)


def test_round_schedule_guarantee_and_mean_preservation():
    ds, w_star = quad(I=25, N=5, seed=4)
    topo = build_network(25, 5, 0.7, seed=4)
    h = hp(consensus=ADAPTIVE, phi=0.3, total_steps=60, tau=10, master_seed=2)
    tr = run_tthf(ds, topo, LS, h, w_star=w_star, keep_cluster_means=True)
    for r in tr[1:]:
        assert np.all(r.max_consensus_err <= h.eta(r.t) * h.phi + 1e-9)
        scale = max(1.0, np.abs(r.cluster_means_pre).max())
        np.testing.assert_allclose(r.cluster_means_post, r.cluster_means_pre, atol=1e-10 * scale)
    assert sum(int(r.gamma_rounds.sum()) for r in tr) > 0
    etas = [h.eta(t) * h.phi for t in range(61)]
    assert all(a >= b for a, b in zip(etas, etas[1:]))


def test_longer_interval_hurts_on_label_skew():
    pool, test = split_pool(synth_classification(30 * 40 + 300, seed=1, separation=1.5), 300, seed=0)
    ds = partition_label_skew(pool, 30, 6, 3, 10, seed=2)
    m = LossModel("squared_svm", 0.01, 10)
    h = hp(gamma=10.0, alpha=50.0, total_steps=100, batch_size=16)
    t1 = run_fedavg_baseline(ds, m, h, FULL, tau=1)
    t20 = run_fedavg_baseline(ds, m, h, FULL, tau=20)
    assert t20[-1].global_loss > t1[-1].global_loss


def test_hyperparameter_validation():
    with pytest.raises(ConfigError):
        hp(tau=0).validate()
    with pytest.raises(ConfigError):
        hp(consensus="sometimes").validate()
    with pytest.raises(ConfigError):
        hp(theorem_mode=True, gamma=0.5, consensus=ADAPTIVE, phi=1).validate(mu=1.0, beta=2.0)
    with pytest.raises(ConfigError):
        hp(theorem_mode=True, gamma=2.0, alpha=3.0, consensus=ADAPTIVE, phi=1).validate(mu=1.0, beta=2.0)
    with pytest.raises(ConfigError):
        hp(theorem_mode=True, gamma=2.0, alpha=8.0, consensus=FIXED).validate(mu=1.0, beta=2.0)
    hp(theorem_mode=True, gamma=2.0, alpha=8.0, consensus=ADAPTIVE, phi=1).validate(mu=1.0, beta=2.0)


def test_batch_larger_than_shard_rejected():
    ds, _ = quad(ppd=3)
    with pytest.raises(ConfigError):
        run_fedavg_baseline(ds, LS, hp(batch_size=4))


def test_topology_must_match_clusters():
    ds, _ = quad(I=10, N=2)
    with pytest.raises(ConfigError):
        run_tthf(ds, build_network(10, 5, seed=0), LS, hp())
