import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventadmm.events import DropModel, TriggerPolicy
from eventadmm.graph import (AgentGraph, GraphConfig, build_transmitter_receiver, constraint_matrix,
                             graph_kappa, run_graph)
from eventadmm.harness.data import gen_noniid_regression
from eventadmm.objectives import Regularizer, reference_solution

from oracles import decentralized_admm


@pytest.fixture(scope="module")
def setup():
    locs = gen_noniid_regression(8, 20, 4, seed=6)
    graph = AgentGraph.random_connected(8, 14, seed=6)
    return locs, graph, reference_solution(locs, Regularizer.zero())


#%% topology

def test_complete_and_path_sizes():
    assert AgentGraph.complete(6).n_edges == 15
    assert AgentGraph.complete(6).n_directed == 30
    p = AgentGraph.path(5)
    assert p.n_edges == 4 and list(p.degrees()) == [1, 2, 2, 2, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.data(), st.integers(0, 10_000))
def test_random_connected_has_requested_edges(N, data, seed):
    m = data.draw(st.integers(N - 1, N * (N - 1) // 2))
    g = AgentGraph.random_connected(N, m, seed)
    assert g.n_edges == m and g.is_connected()
    assert np.array_equal(g.edges, AgentGraph.random_connected(N, m, seed).edges)


@pytest.mark.parametrize("N, edges, msg", [
    (3, [(0, 0), (1, 2)], "self-loop"),
    (3, [(0, 1), (1, 0), (1, 2)], "duplicate"),
    (4, [(0, 1), (2, 3)], "not connected"),
    (3, [(0, 5)], "out of range"),
])
def test_graph_validation(N, edges, msg):
    with pytest.raises(ValueError, match=msg):
        AgentGraph(N, np.array(edges))


def test_edge_list_round_trip(tmp_path):
    g = AgentGraph.random_connected(7, 10, seed=3)
    g.to_edge_list(tmp_path / "g.txt")
    (tmp_path / "h.txt").write_text("# comment\n" + (tmp_path / "g.txt").read_text())
    h = AgentGraph.from_edge_list(tmp_path / "h.txt")
    assert h.N == 7 and np.array_equal(h.edges, g.edges)


def test_transmitter_receiver_structure():
    g = AgentGraph.path(4)
    At, Ar = build_transmitter_receiver(g)
    assert np.all(At.sum(axis=1) == 1) and np.all(Ar.sum(axis=1) == 1)
    # their difference is an oriented incidence matrix whose Gram is the Laplacian
    Lap = np.diag(g.degrees()) - sum(np.outer(np.eye(4)[i], np.eye(4)[j]) + np.outer(np.eye(4)[j], np.eye(4)[i])
                                     for i, j in g.edges)
    assert np.allclose((At - Ar).T @ (At - Ar), Lap)
    Atd, _ = build_transmitter_receiver(g, directed=True)
    assert Atd.shape == (6, 4)


def test_constraint_matrix_gram_is_degree_matrix():
    g = AgentGraph.random_connected(6, 9, seed=1)
    A = constraint_matrix(g, 3)
    assert np.allclose(A.T @ A, np.kron(np.diag(g.degrees()), np.eye(3)))
    sv = np.linalg.svd(A, compute_uv=False)
    kappa = graph_kappa(g, 4.0, 0.5)
    assert math.isclose(kappa, 4.0 * sv[0] ** 2 / (0.5 * sv[-1] ** 2))
    assert graph_kappa(g, 1.0, 0.0) == math.inf


#%% run

def test_zero_threshold_equals_decentralized_admm(setup):
    locs, graph, ref = setup
    rho = 1.7
    tr, _ = run_graph(locs, graph, GraphConfig(rho=rho), TriggerPolicy.vanilla(0.0), horizon=80, reference=ref)
    x = decentralized_admm(locs, graph.neighbors(), rho / 2, 80)
    assert np.abs(tr.x - x).max() < 1e-10


def test_converges_to_centralized_optimum(setup):
    locs, graph, ref = setup
    tr, _ = run_graph(locs, graph, GraphConfig(), TriggerPolicy.vanilla(0.0), horizon=1500, reference=ref)
    assert tr.f_gap[-1] < 1e-9
    assert tr.consensus_residual[-1] < 1e-6
    assert np.allclose(tr.x[-1], ref.z_star, atol=1e-5)


def test_drops_with_resets_stay_within_copy_bounds(setup):
    locs, graph, ref = setup
    tr, clog = run_graph(locs, graph, GraphConfig(T=5, seed=1), TriggerPolicy.vanilla(1e-2),
                         DropModel(0.3, ("edge",)), horizon=300, reference=ref)
    assert clog.dropped > 0
    assert np.all(tr.est_err <= tr.est_bound * (1 + 1e-9) + 1e-12)
    assert tr.f_gap[-1] < 1e-3


def test_reset_costs_four_messages_per_edge(setup):
    locs, graph, ref = setup
    _, clog = run_graph(locs, graph, GraphConfig(T=5), TriggerPolicy.vanilla(1e-2), horizon=20, reference=ref)
    assert clog.reset_messages == 4 * 4 * graph.n_edges


def test_messages_to_reach(setup, tmp_path):
    locs, graph, ref = setup
    tr, _ = run_graph(locs, graph, GraphConfig(), TriggerPolicy.random_only(0.5), horizon=50, reference=ref)
    assert tr.messages_to_reach(-1.0) == math.inf
    hit = int(np.flatnonzero(tr.f_gap <= tr.f_gap[10])[0])
    assert tr.messages_to_reach(tr.f_gap[10]) == tr.messages[hit] + tr.resets[hit]
    tr.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].startswith("# kappa_graph=")
    assert lines[1] == "k,f_gap,consensus_residual,messages,drops,resets,load"


def test_locals_must_match_vertices(setup):
    locs, graph, ref = setup
    with pytest.raises(ValueError):
        run_graph(locs[:-1], graph, GraphConfig(), TriggerPolicy.vanilla(0.0), horizon=2)
