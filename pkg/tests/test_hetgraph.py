import numpy as np
import pytest

from graphrl.hetgraph import (
    GraphSchema,
    GraphSchemaError,
    HeteroGraph,
    VertexPermutation,
    build_d2d_state_graph,
    build_pra_state_action_graph,
    build_pra_state_graph,
    graph_from_text,
    graph_to_text,
    permute,
)


def pra_graph(k=2, m=3, t=2, rng=None, action=None):
    rng = rng or np.random.default_rng(0)
    users = rng.standard_normal((k, 3))
    edges = rng.standard_normal((k, m, t + 1))
    if action is not None:
        return build_pra_state_action_graph(users, edges, action, k, m)
    return build_pra_state_graph(users, edges, k, m)


def test_schema_rejects_duplicate_codes():
    with pytest.raises(GraphSchemaError):
        GraphSchema([("a", 1)], {"x": 1, "y": 1}, [])


def test_pra_2x1_adjacency():
    g = pra_graph(k=2, m=1)
    adj = g.adjacency
    expected = np.zeros((3, 3), dtype=np.int64)
    expected[0, 2] = expected[2, 0] = 1
    expected[1, 2] = expected[2, 1] = 1
    assert np.array_equal(adj, expected)


@pytest.mark.parametrize("k,m", [(1, 1), (2, 3), (4, 5)])
def test_pra_edge_count_is_k_times_m(k, m):
    g = pra_graph(k=k, m=m)
    assert (g.adjacency != 0).sum() == 2 * k * m  # symmetric storage


def test_pra_edge_feature_dimension_tracks_history():
    g = pra_graph(k=2, m=2, t=2)
    assert g.edge_dim("link") == 3


def test_pra_state_action_adds_action_column():
    rng = np.random.default_rng(1)
    users = rng.standard_normal((2, 3))
    edges = rng.standard_normal((2, 3, 3))
    a = np.array([1e6, 2e6])
    g = build_pra_state_action_graph(users, edges, a, 2, 3)
    assert g.vertex_features["user"].shape == (2, 4)
    assert np.array_equal(g.vertex_features["user"][:, 3], a)
    assert np.array_equal(g.vertex_features["user"][:, :3], users)


def test_pra_state_and_state_action_topology_identical():
    rng = np.random.default_rng(2)
    users = rng.standard_normal((3, 3))
    edges = rng.standard_normal((3, 2, 3))
    gs = build_pra_state_graph(users, edges, 3, 2)
    ga = build_pra_state_action_graph(users, edges, np.zeros(3), 3, 2)
    assert np.array_equal(gs.adjacency, ga.adjacency)


def test_pra_zero_action_pads_state_features():
    rng = np.random.default_rng(3)
    users = rng.standard_normal((2, 3))
    edges = rng.standard_normal((2, 2, 3))
    ga = build_pra_state_action_graph(users, edges, np.zeros(2), 2, 2)
    assert np.array_equal(ga.vertex_features["user"][:, 3], np.zeros(2))


def test_pra_adjacency_ignores_feature_values():
    a = pra_graph(rng=np.random.default_rng(4))
    b = pra_graph(rng=np.random.default_rng(5))
    assert np.array_equal(a.adjacency, b.adjacency)


def test_d2d_single_pair_is_one_com_edge():
    g = build_d2d_state_graph(np.array([[2.0]]))
    assert g.adjacency[0, 1] == 1
    assert g.neighbors(0) == [(1, "com", g.edge_features[(0, 1)])]


def test_d2d_two_pairs_codes():
    h = np.array([[1.0, 0.1], [0.2, 3.0]])
    g = build_d2d_state_graph(h)
    # tx vertices 0,1; rx vertices 2,3
    assert g.adjacency[0, 2] == 1 and g.adjacency[1, 3] == 1
    assert g.adjacency[0, 3] == 2 and g.adjacency[1, 2] == 2
    # feature of edge (tx m, rx k) is h[k, m]
    assert g.edge_features[(1, 2)][0] == 0.1
    assert g.edge_features[(0, 3)][0] == 0.2


def test_d2d_50_pairs_has_2500_edges():
    rng = np.random.default_rng(6)
    h = rng.uniform(0.5, 2.0, size=(50, 50))
    g = build_d2d_state_graph(h)
    assert (g.adjacency != 0).sum() == 2 * 2500


def test_d2d_rejects_non_square():
    with pytest.raises(GraphSchemaError):
        build_d2d_state_graph(np.ones((2, 3)))


def test_neighbors_pra_du_sees_all_users():
    g = pra_graph(k=4, m=2)
    nbrs = g.neighbors(4)  # first du
    assert [n for n, _, _ in nbrs] == [0, 1, 2, 3]


def test_neighbors_d2d_rx_has_one_com_edge():
    rng = np.random.default_rng(7)
    g = build_d2d_state_graph(rng.uniform(0.5, 2.0, size=(3, 3)))
    nbrs = g.neighbors(3 + 1)  # rx 1
    assert [n for n, _, _ in nbrs] == [0, 1, 2]
    assert [e for _, e, _ in nbrs].count("com") == 1


def test_neighbors_isolated_vertex_empty():
    schema = GraphSchema([("a", 2)], {"e": 1}, [("a", "a", "e")])
    adj = np.zeros((2, 2), dtype=np.int64)
    g = HeteroGraph(schema, adj, {"a": np.zeros((2, 1))}, {})
    assert g.neighbors(0) == []


def test_permute_identity_is_noop():
    g = pra_graph(k=3, m=2)
    p = VertexPermutation("user", [0, 1, 2])
    assert permute(g, p).equals(g)


def test_permute_roundtrip_inverse():
    g = pra_graph(k=4, m=3)
    p = VertexPermutation("user", [2, 0, 3, 1])
    back = permute(permute(g, p), p.inverse())
    assert back.equals(g)


def test_permute_user_swap_moves_rows_and_edges():
    rng = np.random.default_rng(8)
    users = rng.standard_normal((2, 3))
    edges = rng.standard_normal((2, 3, 3))
    g = build_pra_state_graph(users, edges, 2, 3)
    swapped = permute(g, VertexPermutation("user", [1, 0]))
    assert np.array_equal(swapped.vertex_features["user"], users[[1, 0]])
    for m in range(3):
        assert np.array_equal(swapped.edge_features[(0, 2 + m)], edges[1, m])
        assert np.array_equal(swapped.edge_features[(1, 2 + m)], edges[0, m])


def test_permute_preserves_neighborhood_multiset():
    # invariant: per type, the multiset of (vertex features, sorted incident
    # edge features) is unchanged by a same-type permutation
    rng = np.random.default_rng(9)
    g = pra_graph(k=4, m=3, rng=rng)
    p = VertexPermutation("user", rng.permutation(4))
    h = permute(g, p)

    def signature(graph, vtype):
        block = graph.schema.block(vtype)
        sigs = []
        for v in range(block.start, block.stop):
            feats = graph.vertex_features[vtype][v - block.start]
            nbr = sorted(tuple(f.tolist()) for _, _, f in graph.neighbors(v))
            sigs.append((tuple(feats.tolist()), tuple(nbr)))
        return sorted(sigs)

    for vtype in ("user", "du"):
        assert signature(g, vtype) == signature(h, vtype)


def test_permute_rejects_bad_size():
    g = pra_graph(k=2, m=2)
    with pytest.raises(ValueError):
        permute(g, VertexPermutation("user", [0, 1, 2]))


def test_text_roundtrip_exact():
    g = pra_graph(k=3, m=2, rng=np.random.default_rng(10), action=None)
    text = graph_to_text(g)
    back = graph_from_text(text)
    assert back.equals(g)
    assert graph_to_text(back) == text


def test_text_roundtrip_d2d():
    rng = np.random.default_rng(11)
    g = build_d2d_state_graph(rng.uniform(0.1, 5.0, size=(4, 4)))
    assert graph_from_text(graph_to_text(g)).equals(g)
