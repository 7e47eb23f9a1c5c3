"""Synthetic attributed graphs for desk-scale experiments and tests.

Planted-partition graphs with class-correlated sparse binary features,
optionally nested inside super-communities so that structure exists at
more than one scale. Shapes mirror common citation benchmarks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import GraphData, _dedup_symmetrize, save_features_binary
from .rng import derive

PRESETS = {
    # (num_nodes, feat_dim, num_classes, avg_degree)
    "cora_like": (2708, 1433, 7, 4.0),
    "citeseer_like": (3327, 3703, 6, 2.8),
    "pubmed_like": (19717, 500, 3, 4.5),
    "tiny": (60, 16, 3, 4.0),
}


def make_attributed_graph(num_nodes: int, feat_dim: int, num_classes: int,
                          seed: int, *, avg_degree: float = 4.0,
                          homophily: float = 0.88, superblocks: int = 1,
                          super_mix: float = 0.7, class_dims: int = None,
                          on_rate: float = 0.25, noise_rate: float = 0.004,
                          dense_features: bool = False) -> GraphData:
    """Sample a labeled homophilous graph with class-informative features.

    With ``superblocks`` > 1, classes are grouped; non-homophilous edges
    prefer the same super-group with probability ``super_mix``, giving the
    graph coarse structure on top of the class-level communities.
    """
    rng = derive(seed, "synthetic", num_nodes, feat_dim)
    labels = rng.integers(0, num_classes, size=num_nodes)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, members in enumerate(by_class):
        if members.size == 0:   # tiny graphs: keep every class inhabited
            labels[rng.integers(num_nodes)] = c
            by_class = [np.flatnonzero(labels == k) for k in range(num_classes)]

    group_of = np.arange(num_classes) % max(superblocks, 1)
    by_group = [np.flatnonzero(np.isin(labels, np.flatnonzero(group_of == g)))
                for g in range(max(superblocks, 1))]

    num_edges = int(avg_degree * num_nodes / 2)
    src = rng.integers(0, num_nodes, size=num_edges)
    pick = rng.random(num_edges)
    sub = rng.random(num_edges)
    dst = np.empty(num_edges, dtype=np.int64)
    for i, u in enumerate(src):
        if pick[i] < homophily:
            pool = by_class[labels[u]]
        elif superblocks > 1 and sub[i] < super_mix:
            pool = by_group[group_of[labels[u]]]
        else:
            pool = None
        if pool is None or pool.size < 2:
            dst[i] = rng.integers(num_nodes)
        else:
            dst[i] = pool[rng.integers(pool.size)]
    edges = _dedup_symmetrize(np.stack([src, dst], axis=1))

    if dense_features:
        centers = rng.standard_normal((num_classes, feat_dim))
        feats = centers[labels] + 1.5 * rng.standard_normal((num_nodes, feat_dim))
    else:
        width = class_dims or max(4, feat_dim // (2 * num_classes))
        feats = (rng.random((num_nodes, feat_dim)) < noise_rate).astype(np.float64)
        for c in range(num_classes):
            dims = derive(seed, "classdims", c).permutation(feat_dim)[:width]
            members = by_class[c]
            hits = rng.random((members.size, width)) < on_rate
            feats[np.ix_(members, dims)] = np.maximum(
                feats[np.ix_(members, dims)], hits)
    return GraphData(num_nodes=num_nodes, edges=edges, features=feats,
                     labels=labels.astype(np.int64))


def make_preset(name: str, seed: int, **overrides) -> GraphData:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}")
    num_nodes, feat_dim, num_classes, avg_degree = PRESETS[name]
    kwargs = dict(avg_degree=avg_degree, superblocks=max(2, num_classes // 3))
    kwargs.update(overrides)
    return make_attributed_graph(num_nodes, feat_dim, num_classes, seed, **kwargs)


def two_blob_graph(seed: int = 0, per_class: int = 5, feat_dim: int = 4) -> GraphData:
    """Linearly separable two-community toy graph for smoke tests."""
    rng = derive(seed, "two-blob")
    n = 2 * per_class
    labels = np.repeat([0, 1], per_class)
    centers = np.array([[2.0] * feat_dim, [-2.0] * feat_dim])
    feats = centers[labels] + 0.3 * rng.standard_normal((n, feat_dim))
    pairs = []
    for c in range(2):
        ids = np.flatnonzero(labels == c)
        for i in range(ids.size):
            pairs.append((ids[i], ids[(i + 1) % ids.size]))
    pairs.append((0, per_class))   # one bridge edge
    edges = _dedup_symmetrize(np.asarray(pairs, dtype=np.int64))
    return GraphData(num_nodes=n, edges=edges, features=feats,
                     labels=labels.astype(np.int64))


def write_dataset(graph: GraphData, out_dir, *, binary_features: bool = True) -> dict:
    """Write edge list, features, and labels; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    edge_path = out_dir / "edges.txt"
    und = graph.undirected_edges()
    edge_path.write_text("".join(f"{u} {v}\n" for u, v in und), encoding="utf-8")
    if binary_features:
        feat_path = out_dir / "features.qtfm"
        save_features_binary(feat_path, graph.features)
    else:
        feat_path = out_dir / "features.csv"
        with open(feat_path, "w", encoding="utf-8") as fh:
            for row in graph.features:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    label_path = out_dir / "labels.txt"
    if graph.labels is not None:
        label_path.write_text(
            "".join(f"{int(l)}\n" for l in graph.labels), encoding="utf-8")
    else:
        label_path.write_text("".join("-1\n" for _ in range(graph.num_nodes)),
                              encoding="utf-8")
    return {"edges": str(edge_path), "features": str(feat_path),
            "labels": str(label_path)}
