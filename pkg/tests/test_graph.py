"""Ingestion, normalized adjacency, and split management."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quiet.errors import BoundsError, ConfigurationError, ParseError, ShapeError
from quiet.graph import (GraphData, LinkSplits, build_gcn_adjacency, load_graph,
                         make_splits, save_features_binary)
from quiet.synthetic import make_preset, write_dataset


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _tiny_dataset(tmp_path, edges="0 1\n", rows=2, dim=3, labels="0\n1\n"):
    e = _write(tmp_path, "edges.txt", edges)
    feats = "\n".join(",".join(str(float(i + j)) for j in range(dim))
                      for i in range(rows)) + "\n"
    f = _write(tmp_path, "features.csv", feats)
    l = _write(tmp_path, "labels.txt", labels) if labels is not None else None
    return e, f, l


# ---------------------------------------------------------------------------
# load_graph


def test_load_cora_shaped_dataset(tmp_path):
    graph = make_preset("cora_like", seed=0)
    paths = write_dataset(graph, tmp_path / "cora")
    loaded = load_graph(paths["edges"], paths["features"], paths["labels"])
    assert loaded.num_nodes == 2708
    assert loaded.feature_dim == 1433
    assert loaded.num_classes == 7


def test_load_single_edge_symmetrized(tmp_path):
    e, f, l = _tiny_dataset(tmp_path)
    g = load_graph(e, f, l)
    assert g.num_nodes == 2
    assert g.edges.shape[0] == 2     # one arc per direction
    assert {tuple(a) for a in g.edges} == {(0, 1), (1, 0)}


def test_load_duplicate_edges_deduplicated(tmp_path):
    e, f, l = _tiny_dataset(tmp_path, edges="0 1\n0 1\n")
    g = load_graph(e, f, l)
    assert g.edges.shape[0] == 2


def test_load_symmetric_input_idempotent(tmp_path):
    e1, f, l = _tiny_dataset(tmp_path, edges="0 1\n")
    base = load_graph(e1, f, l)
    e2 = _write(tmp_path, "edges2.txt", "0 1\n1 0\n")
    again = load_graph(e2, f, l)
    np.testing.assert_array_equal(base.edges, again.edges)


def test_load_comments_and_self_loops(tmp_path):
    e, f, l = _tiny_dataset(tmp_path, edges="# header\n0 1\n1 1\n")
    g = load_graph(e, f, l)
    assert {tuple(a) for a in g.edges} == {(0, 1), (1, 0)}


def test_load_malformed_line_parse_error(tmp_path):
    e, f, l = _tiny_dataset(tmp_path, edges="0 1\n0 one\n")
    with pytest.raises(ParseError) as err:
        load_graph(e, f, l)
    assert ":2:" in str(err.value)


def test_load_out_of_range_bounds_error(tmp_path):
    e, f, l = _tiny_dataset(tmp_path, edges="0 5\n")
    with pytest.raises(BoundsError):
        load_graph(e, f, l)


def test_load_label_count_mismatch_shape_error(tmp_path):
    e, f, _ = _tiny_dataset(tmp_path)
    bad = _write(tmp_path, "labels_bad.txt", "0\n1\n0\n")
    with pytest.raises(ShapeError):
        load_graph(e, f, bad)


def test_load_binary_features_roundtrip(tmp_path):
    feats = np.arange(12, dtype=np.float64).reshape(4, 3)
    path = tmp_path / "f.qtfm"
    save_features_binary(path, feats)
    e = _write(tmp_path, "e.txt", "0 1\n2 3\n")
    g = load_graph(e, path)
    np.testing.assert_allclose(g.features, feats, atol=1e-6)


def test_load_token_labels_first_seen_order(tmp_path):
    e, f, _ = _tiny_dataset(tmp_path, rows=4, edges="0 1\n2 3\n")
    labels = _write(tmp_path, "tok.txt", "genetics\nai\ngenetics\n-1\n")
    g = load_graph(e, f, labels)
    np.testing.assert_array_equal(g.labels, [0, 1, 0, -1])


def test_unlabeled_markers(tmp_path):
    e, f, _ = _tiny_dataset(tmp_path, rows=3, edges="0 1\n")
    labels = _write(tmp_path, "l.txt", "2\n-1\n\n")
    g = load_graph(e, f, labels)
    np.testing.assert_array_equal(g.labels, [2, -1, -1])


# ---------------------------------------------------------------------------
# build_gcn_adjacency


def _graph_from_edges(pairs, num_nodes, dim=2):
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([edges, edges[:, ::-1]]) if edges.size else edges
    feats = np.zeros((num_nodes, dim))
    return GraphData(num_nodes=num_nodes,
                     edges=np.unique(both, axis=0) if both.size else
                     np.zeros((0, 2), dtype=np.int64),
                     features=feats)


def test_adjacency_isolated_nodes_diagonal_one():
    adj = build_gcn_adjacency(_graph_from_edges([], 2))
    dense = adj.to_csr().toarray()
    np.testing.assert_allclose(dense, np.eye(2))


def test_adjacency_single_edge_half_everywhere():
    adj = build_gcn_adjacency(_graph_from_edges([(0, 1)], 2))
    dense = adj.to_csr().toarray()
    np.testing.assert_allclose(dense, np.full((2, 2), 0.5))


def test_adjacency_star_hub_quarter():
    adj = build_gcn_adjacency(_graph_from_edges([(0, 1), (0, 2), (0, 3)], 4))
    dense = adj.to_csr().toarray()
    assert dense[0, 0] == pytest.approx(0.25)
    assert dense[1, 1] == pytest.approx(0.5)
    assert dense[0, 1] == pytest.approx(1 / np.sqrt(8))


def test_adjacency_sorted_csr_invariants():
    adj = build_gcn_adjacency(_graph_from_edges([(0, 1), (1, 2), (0, 3)], 4))
    assert adj.offsets[0] == 0 and adj.offsets[-1] == adj.nnz
    assert (np.diff(adj.offsets) >= 0).all()
    for u in range(adj.num_nodes):
        row = adj.indices[adj.offsets[u]:adj.offsets[u + 1]]
        assert (np.diff(row) > 0).all()


def _bounded_degree_graph(seed, n=30):
    """Random graph with degrees in [2, 6]; keeps the row-sum bound valid."""
    gen = np.random.default_rng(seed)
    pairs = [(i, (i + 1) % n) for i in range(n)]        # ring: degree 2
    deg = np.full(n, 2)
    for _ in range(2 * n):
        u, v = gen.integers(n), gen.integers(n)
        if u != v and deg[u] < 6 and deg[v] < 6 and (u, v) not in pairs:
            pairs.append((int(u), int(v)))
            deg[u] += 1
            deg[v] += 1
    return _graph_from_edges(pairs, n)


@pytest.mark.parametrize("seed", range(5))
def test_adjacency_row_sums_bounded(seed):
    adj = build_gcn_adjacency(_bounded_degree_graph(seed))
    sums = np.asarray(adj.to_csr().sum(axis=1)).ravel()
    assert (sums > 0).all()
    assert (sums <= 1.5).all()


# ---------------------------------------------------------------------------
# make_splits


def _labeled_graph(n=10, seed=0):
    gen = np.random.default_rng(seed)
    pairs = [(i, (i + 1) % n) for i in range(n)]
    g = _graph_from_edges(pairs, n)
    labels = gen.integers(0, 2, size=n).astype(np.int64)
    return GraphData(num_nodes=n, edges=g.edges, features=g.features,
                     labels=labels)


def test_node_split_sizes_and_determinism():
    g = _labeled_graph(10)
    s1 = make_splits(g, seed=3, task="node", ratios=(0.6, 0.2, 0.2))
    s2 = make_splits(g, seed=3, task="node", ratios=(0.6, 0.2, 0.2))
    assert s1.splits.train.size == 6
    assert s1.splits.val.size == 2
    assert s1.splits.test.size == 2
    np.testing.assert_array_equal(s1.splits.train, s2.splits.train)
    np.testing.assert_array_equal(s1.splits.test, s2.splits.test)


def test_node_split_covers_labeled_universe():
    g = _labeled_graph(17, seed=2)
    s = make_splits(g, seed=1, task="node", ratios=(0.5, 0.25, 0.25))
    union = np.concatenate([s.splits.train, s.splits.val, s.splits.test])
    np.testing.assert_array_equal(np.sort(union),
                                  np.flatnonzero(g.labels >= 0))
    assert len(set(union)) == union.size


def test_link_split_triangle_removes_heldout_edges():
    g = _graph_from_edges([(0, 1), (1, 2), (0, 2)], 3)
    s = make_splits(g, seed=5, task="link", ratios=(2 / 3, 0.0, 1 / 3))
    assert isinstance(s.splits, LinkSplits)
    assert s.splits.test_pos.shape[0] == 1
    assert s.undirected_edges().shape[0] == 2   # encoding adjacency
    held = {tuple(e) for e in s.splits.test_pos}
    kept = {tuple(e) for e in s.undirected_edges()}
    assert held.isdisjoint(kept)


def test_link_split_negatives_are_non_edges():
    graph = make_preset("tiny", seed=4)
    s = make_splits(graph, seed=9, task="link", ratios=(0.7, 0.15, 0.15))
    true_edges = {tuple(e) for e in graph.undirected_edges()}
    for neg in (s.splits.val_neg, s.splits.test_neg):
        assert neg.shape[0] > 0
        for u, v in neg:
            assert (min(u, v), max(u, v)) not in true_edges
    assert s.splits.val_neg.shape == s.splits.val_pos.shape
    assert s.splits.test_neg.shape == s.splits.test_pos.shape


def test_link_split_covers_all_positives():
    graph = make_preset("tiny", seed=4)
    s = make_splits(graph, seed=9, task="link", ratios=(0.7, 0.15, 0.15))
    pieces = np.concatenate([s.splits.train_pos, s.splits.val_pos,
                             s.splits.test_pos])
    np.testing.assert_array_equal(
        np.unique(pieces, axis=0), graph.undirected_edges())


def test_split_ratio_validation():
    g = _labeled_graph(10)
    with pytest.raises(ConfigurationError):
        make_splits(g, seed=0, task="node", ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigurationError):
        make_splits(g, seed=0, task="badtask", ratios=(0.6, 0.2, 0.2))


def test_split_too_small_graph_errors():
    g = _labeled_graph(2)
    with pytest.raises(ConfigurationError):
        make_splits(g, seed=0, task="node", ratios=(0.5, 0.25, 0.25))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_symmetrization_idempotence_property(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(3, 12))
    m = int(gen.integers(1, 14))
    pairs = gen.integers(0, n, size=(m, 2))
    g1 = _graph_from_edges([tuple(p) for p in pairs if p[0] != p[1]] or [(0, 1)], n)
    g2 = _graph_from_edges([tuple(p) for p in g1.edges], n)
    np.testing.assert_array_equal(g1.edges, g2.edges)
