import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from tthf.errors import DimensionMismatch, DisconnectedGraph, NoConvergence, ToleranceNotMet
from tthf.topology import (
    ClusterGraph,
    mixing_violations,
    build_network,
    deflated_spectral_radius,
    generate_random_geometric_cluster,
    metropolis_weights,
    run_consensus,
    spectral_radius,
    tune_radius_for_spectral_target,
)

PATH3_V = np.array([[2 / 3, 1 / 3, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 2 / 3]])


def path3():
    return ClusterGraph.from_edges(3, [(0, 1), (1, 2)])


def eig_oracle(V):
    s = V.shape[0]
    return float(np.max(np.abs(np.linalg.eigvalsh(V - 1.0 / s))))


# graph generation

def test_singleton_cluster_has_no_edges():
    g = generate_random_geometric_cluster(1, 0.3, seed=0)
    assert g.s_c == 1 and g.edges == frozenset()
    V = metropolis_weights(g)
    assert V.weights.tolist() == [[1.0]] and V.lam == 0.0


def test_full_radius_gives_complete_graph():
    g = generate_random_geometric_cluster(5, math.sqrt(2), seed=3)
    assert len(g.edges) == 5 * 4
    assert np.all(g.degrees == 4)


def test_edges_match_brute_force_threshold():
    g = generate_random_geometric_cluster(5, 0.4, seed=7)
    assert g.is_connected()
    # independent reimplementation of the placement and threshold rule
    rng = np.random.default_rng(7)
    for _ in range(10):
        pos = rng.random((5, 2))
        want = {(i, j) for i in range(5) for j in range(5)
                if i != j and math.dist(pos[i], pos[j]) <= 0.4}
        adj = np.zeros((5, 5), bool)
        for i, j in want:
            adj[i, j] = True
        if ClusterGraph(tuple(range(5)), adj).is_connected():
            break
    np.testing.assert_array_equal(g.positions, pos)
    assert g.edges == frozenset(want)


def test_tiny_radius_falls_back_to_bridging():
    g = generate_random_geometric_cluster(8, 1e-3, seed=1)
    assert g.is_connected()
    # bridging adds exactly a spanning forest over the singleton components
    assert len(g.edges) // 2 == 7


def test_generation_is_deterministic():
    a = generate_random_geometric_cluster(9, 0.35, seed=11)
    b = generate_random_geometric_cluster(9, 0.35, seed=11)
    assert a.edges == b.edges
    np.testing.assert_array_equal(a.positions, b.positions)


def test_graph_rejects_asymmetric_and_self_loops():
    with pytest.raises(ValueError):
        ClusterGraph((0, 1), np.array([[False, True], [False, False]]))
    with pytest.raises(ValueError):
        ClusterGraph((0, 1), np.array([[True, False], [False, False]]))
    with pytest.raises(DimensionMismatch):
        ClusterGraph((0, 1, 2), np.zeros((2, 2), bool))


# Metropolis weights

def test_path3_metropolis_matrix():
    V = metropolis_weights(path3())
    np.testing.assert_allclose(V.weights, PATH3_V, atol=1e-15)
    assert V.lam == pytest.approx(2 / 3, abs=1e-9)
    assert eig_oracle(PATH3_V) == pytest.approx(2 / 3, abs=1e-12)


def test_two_node_complete_graph_averages_exactly():
    V = metropolis_weights(ClusterGraph.from_edges(2, [(0, 1)]))
    np.testing.assert_array_equal(V.weights, [[0.5, 0.5], [0.5, 0.5]])
    assert V.lam == 0.0


def test_disconnected_graph_rejected():
    with pytest.raises(DisconnectedGraph):
        metropolis_weights(ClusterGraph.from_edges(4, [(0, 1), (2, 3)]))


# spectral radius

def test_spectral_radius_reference_values():
    assert spectral_radius(np.full((4, 4), 0.25)) == 0.0
    assert spectral_radius(PATH3_V) == pytest.approx(2 / 3, abs=1e-9)
    assert spectral_radius(np.eye(3)) == pytest.approx(1.0, abs=1e-9)


def test_spectral_radius_shape_check():
    with pytest.raises(DimensionMismatch):
        spectral_radius(np.eye(3), s_c=4)


def test_power_iteration_cap_raises_and_fallback_recovers():
    g = generate_random_geometric_cluster(10, 0.5, seed=2)
    V = metropolis_weights(g).weights
    with pytest.raises(NoConvergence):
        spectral_radius(V, max_iter=1)
    assert deflated_spectral_radius(V) == pytest.approx(eig_oracle(V), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.floats(0.1, 1.5), st.integers(0, 2**31 - 1))
@example(s=7, radius=0.59375, seed=262145)  # leading eigenvalues 0.7351 and 0.7346
def test_power_iteration_matches_eigensolver(s, radius, seed):
    V = metropolis_weights(generate_random_geometric_cluster(s, radius, seed)).weights
    assert spectral_radius(V) == pytest.approx(eig_oracle(V), abs=1e-8)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 1.5), st.integers(0, 2**31 - 1))
def test_generated_matrices_satisfy_all_conditions(s, radius, seed):
    g = generate_random_geometric_cluster(s, radius, seed)
    assert g.is_connected()
    assert all((j, i) in g.edges for i, j in g.edges)
    V = metropolis_weights(g)
    assert mixing_violations(V, g) == []
    assert 0.0 <= V.lam < 1.0


def test_violation_report_names_conditions():
    g = path3()
    bad = PATH3_V.copy()
    bad[0, 2] = bad[2, 0] = 0.1
    assert "sparsity" in mixing_violations(bad, g)
    assert set(mixing_violations(np.eye(3) * 0.5, g)) >= {"row-stochastic"}
    assert "spectral-radius" in mixing_violations(np.eye(3), g)


# radius tuning

def test_tuning_hits_default_target():
    g, V = tune_radius_for_spectral_target(5, 0.7, seed=1)
    assert 0.65 <= V.lam <= 0.75
    assert V.lam == pytest.approx(eig_oracle(V.weights), abs=1e-9)


def test_tuning_low_target_verified_by_eigensolver():
    try:
        g, V = tune_radius_for_spectral_target(5, 0.3, seed=3)
        assert abs(V.lam - 0.3) <= 0.05
    except ToleranceNotMet as e:
        g, V = e.best
        assert abs(V.lam - 0.3) > 0.05
    assert V.lam == pytest.approx(eig_oracle(V.weights), abs=1e-9)


def test_two_node_cluster_cannot_reach_positive_target():
    with pytest.raises(ToleranceNotMet) as info:
        tune_radius_for_spectral_target(2, 0.7, seed=0)
    assert info.value.best[1].lam == 0.0
    g, V = tune_radius_for_spectral_target(2, 0.7, seed=0, accept_closest=True)
    assert V.lam == 0.0


def test_build_network_layout():
    topo = build_network(20, 4, 0.7, seed=5)
    assert [t.members.tolist() for t in topo] == [list(range(5 * c, 5 * c + 5)) for c in range(4)]
    assert np.mean([t.lam for t in topo]) == pytest.approx(0.7, abs=0.05)
    again = build_network(20, 4, 0.7, seed=5)
    for a, b in zip(topo, again):
        np.testing.assert_array_equal(a.matrix.weights, b.matrix.weights)
    with pytest.raises(ValueError):
        build_network(10, 3)


# consensus iteration

def test_path3_consensus_by_hand():
    np.testing.assert_allclose(run_consensus([[0.0], [3.0], [6.0]], PATH3_V, 1).ravel(), [1, 3, 5], atol=1e-14)
    np.testing.assert_allclose(run_consensus([0.0, 3.0, 6.0], PATH3_V, 2), [5 / 3, 3, 13 / 3], atol=1e-14)


def test_zero_rounds_and_fixed_point():
    Z = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(run_consensus(Z, PATH3_V, 0), Z)
    same = np.tile(Z[0], (3, 1))
    np.testing.assert_allclose(run_consensus(same, PATH3_V, 7), same, atol=1e-14)


def test_consensus_input_errors():
    with pytest.raises(DimensionMismatch):
        run_consensus([[1.0, 2.0], [1.0]], PATH3_V, 1)
    with pytest.raises(DimensionMismatch):
        run_consensus(np.zeros((4, 2)), PATH3_V, 1)
    with pytest.raises(ValueError):
        run_consensus(np.zeros((3, 2)), PATH3_V, -1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1), st.integers(0, 20))
def test_mean_preserved_and_geometric_contraction(s, seed, rounds):
    rng = np.random.default_rng(seed)
    g = generate_random_geometric_cluster(s, rng.uniform(0.2, 1.2), seed)
    V = metropolis_weights(g)
    Z0 = rng.standard_normal((s, 3)) * rng.uniform(0.1, 10)
    Z = run_consensus(Z0, V, rounds)
    mean0 = Z0.mean(axis=0)
    assert np.linalg.norm(Z.mean(axis=0) - mean0) <= 1e-10 * max(1.0, np.linalg.norm(mean0))
    ups = max(np.linalg.norm(a - b) for a in Z0 for b in Z0)
    err = np.linalg.norm(Z - mean0, axis=1).max()
    assert err <= V.lam**rounds * math.sqrt(s) * ups + 1e-9
