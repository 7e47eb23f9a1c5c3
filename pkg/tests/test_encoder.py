"""GCN encoder: forward semantics, init, equivariance, gradient flow."""

import numpy as np
import pytest

import quiet.autograd as ag
from quiet.autograd import Tape, Tensor, backward
from quiet.encoder import GcnEncoder, GcnLayer, encode, init_gcn
from quiet.errors import ShapeError
from quiet.graph import GraphData, build_gcn_adjacency


def _graph(pairs, n, feats):
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([edges, edges[:, ::-1]]) if edges.size else edges
    return GraphData(num_nodes=n,
                     edges=np.unique(both, axis=0) if both.size else
                     np.zeros((0, 2), dtype=np.int64),
                     features=np.asarray(feats, dtype=np.float64))


def _manual_encoder(weights_biases, dropout=0.0):
    layers = [GcnLayer(weight=Tensor(w, requires_grad=True),
                       bias=Tensor(b, requires_grad=True))
              for w, b in weights_biases]
    return GcnEncoder(layers=layers, dropout_rate=dropout)


def test_identity_setup_returns_features():
    g = _graph([], 3, np.arange(6).reshape(3, 2))
    adj = build_gcn_adjacency(g)       # isolated nodes: identity adjacency
    enc = _manual_encoder([(np.eye(2), np.zeros(2))])
    out = encode(enc, adj, Tensor(g.features))
    np.testing.assert_allclose(out.data, g.features)


def test_identical_features_identical_embeddings():
    feats = np.array([[1.0, 2.0], [1.0, 2.0]])
    g = _graph([(0, 1)], 2, feats)
    adj = build_gcn_adjacency(g)
    enc = init_gcn([2, 5, 4], seed=3, dropout_rate=0.0)
    out = encode(enc, adj, Tensor(feats))
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)


def test_path_graph_middle_node_hand_computed():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    g = _graph([(0, 1), (1, 2)], 3, feats)
    adj = build_gcn_adjacency(g)
    w = np.array([[1.0, -1.0], [0.5, 2.0]])
    enc = _manual_encoder([(w, np.zeros(2))])
    out = encode(enc, adj, Tensor(feats))
    # row 1 of the normalized adjacency: deg+1 = (2, 3, 2)
    a10 = 1 / np.sqrt(3 * 2)
    a11 = 1 / 3
    a12 = 1 / np.sqrt(3 * 2)
    agg = a10 * feats[0] + a11 * feats[1] + a12 * feats[2]
    np.testing.assert_allclose(out.data[1], agg @ w, atol=1e-12)


def test_init_deterministic_per_seed():
    e1 = init_gcn([4, 8, 3], seed=11)
    e2 = init_gcn([4, 8, 3], seed=11)
    e3 = init_gcn([4, 8, 3], seed=12)
    for l1, l2 in zip(e1.layers, e2.layers):
        np.testing.assert_array_equal(l1.weight.data, l2.weight.data)
    assert any(not np.array_equal(a.weight.data, b.weight.data)
               for a, b in zip(e1.layers, e3.layers))


def test_init_glorot_bound_and_zero_bias():
    enc = init_gcn([40, 30], seed=0)
    bound = np.sqrt(6.0 / (40 + 30))
    assert np.abs(enc.layers[0].weight.data).max() <= bound
    np.testing.assert_array_equal(enc.layers[0].bias.data, 0.0)


def test_permutation_equivariance():
    gen = np.random.default_rng(5)
    n = 8
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (0, 4)]
    feats = gen.standard_normal((n, 3))
    g = _graph(pairs, n, feats)
    enc = init_gcn([3, 6, 4], seed=2, dropout_rate=0.0)
    base = encode(enc, build_gcn_adjacency(g), Tensor(feats)).data

    perm = gen.permutation(n)
    inv = np.argsort(perm)
    # relabel: node i becomes perm[i]
    p_pairs = [(perm[u], perm[v]) for u, v in pairs]
    p_feats = feats[inv]
    pg = _graph(p_pairs, n, p_feats)
    permuted = encode(enc, build_gcn_adjacency(pg), Tensor(p_feats)).data
    np.testing.assert_allclose(permuted, base[inv], atol=1e-10)


def test_gradient_flow_to_all_layers():
    gen = np.random.default_rng(7)
    feats = gen.standard_normal((6, 4))
    g = _graph([(0, 1), (1, 2), (3, 4), (4, 5)], 6, feats)
    adj = build_gcn_adjacency(g)
    enc = init_gcn([4, 5, 3], seed=1, dropout_rate=0.0)
    with Tape():
        out = encode(enc, adj, Tensor(feats))
        loss = ag.mean(ag.square(out))
    backward(loss)
    for name, p in enc.parameters().items():
        if name.endswith("weight"):
            assert p.grad is not None
            assert np.isfinite(p.grad).all()
            assert np.abs(p.grad).max() > 0, name


def test_dropout_disabled_in_eval_mode():
    gen = np.random.default_rng(3)
    feats = gen.standard_normal((5, 3))
    g = _graph([(0, 1), (2, 3)], 5, feats)
    adj = build_gcn_adjacency(g)
    enc = init_gcn([3, 4], seed=1, dropout_rate=0.9)
    a = encode(enc, adj, Tensor(feats)).data
    b = encode(enc, adj, Tensor(feats)).data
    np.testing.assert_array_equal(a, b)


def test_sparse_input_path_matches_dense():
    gen = np.random.default_rng(4)
    feats = (gen.random((6, 200)) < 0.02).astype(np.float64)   # sparse input
    g = _graph([(0, 1), (1, 2), (3, 4)], 6, feats)
    adj = build_gcn_adjacency(g)
    enc = init_gcn([200, 8], seed=6, dropout_rate=0.0)
    sparse_out = encode(enc, adj, Tensor(feats)).data
    dense_out = encode(enc, adj, Tensor(feats + 0.0, requires_grad=True)).data
    np.testing.assert_allclose(sparse_out, dense_out, atol=1e-10)


def test_dimension_mismatch_shape_error():
    g = _graph([(0, 1)], 2, np.zeros((2, 3)))
    adj = build_gcn_adjacency(g)
    enc = init_gcn([3, 4], seed=0)
    with pytest.raises(ShapeError):
        encode(enc, adj, Tensor(np.zeros((5, 3))))
