"""Graph data model, sparse adjacency, dataset ingestion, split management.

File formats:
  * edge list - UTF-8 text, one "src dst" pair per line, '#' comments
  * features  - dense CSV (row i = node i) or binary "QTFM"
                (magic, u32 rows, u32 cols, little-endian f32 row-major)
  * labels    - one integer or token per line; "-1" or empty = unlabeled
  * splits    - text files of node ids / edge pairs, one per line
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, ConfigurationError, ParseError, ShapeError
from .rng import derive

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"QTFM"


@dataclass(frozen=True)
class NodeSplits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class LinkSplits:
    """Undirected positive edges per split plus fixed evaluation negatives."""

    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray


@dataclass(frozen=True)
class GraphData:
    """Immutable graph: directed arc list (symmetrized), features, labels."""

    num_nodes: int
    edges: np.ndarray            # [E, 2] deduplicated arcs, no self-loops
    features: np.ndarray         # [num_nodes, d]
    labels: Optional[np.ndarray] = None   # [num_nodes], -1 = unlabeled
    edge_features: Optional[np.ndarray] = None
    splits: Union[NodeSplits, LinkSplits, None] = None

    def __post_init__(self):
        if self.features.shape[0] != self.num_nodes:
            raise ShapeError(
                f"feature rows ({self.features.shape[0]}) != num_nodes ({self.num_nodes})")
        if self.labels is not None and self.labels.shape[0] != self.num_nodes:
            raise ShapeError(
                f"label rows ({self.labels.shape[0]}) != num_nodes ({self.num_nodes})")
        if self.edges.size and self.edges.max() >= self.num_nodes:
            raise BoundsError(
                f"edge references node {int(self.edges.max())} but only "
                f"{self.num_nodes} nodes exist")
        for arr in (self.edges, self.features, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        labeled = self.labels[self.labels >= 0]
        return int(labeled.max()) + 1 if labeled.size else 0

    def undirected_edges(self) -> np.ndarray:
        """Unique (u, v) pairs with u < v."""
        if not self.edges.size:
            return np.zeros((0, 2), dtype=np.int64)
        lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
        hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
        return np.unique(np.stack([lo, hi], axis=1), axis=0)

    def neighbor_sets(self) -> list[set]:
        nbrs = [set() for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].add(int(v))
        return nbrs


@dataclass(frozen=True)
class SparseAdjacency:
    """CSR matrix D̃^{-1/2}(A+I)D̃^{-1/2} with sorted column indices."""

    offsets: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    num_nodes: int

    def __post_init__(self):
        for arr in (self.offsets, self.indices, self.values):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.indices, self.offsets),
            shape=(self.num_nodes, self.num_nodes))

    def structure_csr(self) -> sp.csr_matrix:
        """Same sparsity pattern with unit values."""
        return sp.csr_matrix(
            (np.ones_like(self.values), self.indices, self.offsets),
            shape=(self.num_nodes, self.num_nodes))

    def row_degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def structure_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.offsets.tobytes())
        h.update(self.indices.tobytes())
        return h.hexdigest()


def _dedup_symmetrize(pairs: np.ndarray) -> np.ndarray:
    """Drop self-loops, add both directions, deduplicate, sort."""
    if not pairs.size:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    return np.unique(both, axis=0)


def _load_features(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == FEATURE_MAGIC:
            rows, cols = struct.unpack("<II", fh.read(8))
            payload = np.frombuffer(fh.read(4 * rows * cols), dtype="<f4")
            if payload.size != rows * cols:
                raise ParseError(path, 0, "truncated QTFM payload")
            return payload.reshape(rows, cols).astype(np.float64)
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad feature value: {exc}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ShapeError(
                    f"{path}:{line_no}: feature row has {len(row)} columns, expected {width}")
            rows.append(row)
    if not rows:
        raise ParseError(path, 0, "empty feature file")
    return np.asarray(rows, dtype=np.float64)


def _load_edge_list(path, num_nodes: int) -> np.ndarray:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            if len(toks) != 2:
                raise ParseError(path, line_no, f"expected 'src dst', got {line!r}")
            try:
                u, v = int(toks[0]), int(toks[1])
            except ValueError:
                raise ParseError(path, line_no, f"non-integer node id in {line!r}") from None
            if u < 0 or v < 0 or u >= num_nodes or v >= num_nodes:
                raise BoundsError(
                    f"{path}:{line_no}: node id out of range [0, {num_nodes}): {u} {v}")
            pairs.append((u, v))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _load_labels(path, num_nodes: int) -> np.ndarray:
    raw = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            raw.append(line.strip())
    if len(raw) != num_nodes:
        raise ShapeError(f"{path}: {len(raw)} label lines for {num_nodes} nodes")
    all_int = all(tok == "" or _is_int(tok) for tok in raw)
    labels = np.full(num_nodes, -1, dtype=np.int64)
    if all_int:
        for i, tok in enumerate(raw):
            if tok != "":
                labels[i] = int(tok)
    else:
        mapping: dict[str, int] = {}
        for i, tok in enumerate(raw):
            if tok in ("", "-1"):
                continue
            if tok not in mapping:
                mapping[tok] = len(mapping)
            labels[i] = mapping[tok]
    return labels


def _is_int(tok: str) -> bool:
    try:
        int(tok)
        return True
    except ValueError:
        return False


def load_graph(edge_list_path, feature_path, label_path=None) -> GraphData:
    """Ingest a dataset; edges come out deduplicated and symmetrized."""
    features = _load_features(feature_path)
    num_nodes = features.shape[0]
    pairs = _load_edge_list(edge_list_path, num_nodes)
    edges = _dedup_symmetrize(pairs)
    labels = _load_labels(label_path, num_nodes) if label_path is not None else None
    return GraphData(num_nodes=num_nodes, edges=edges, features=features, labels=labels)


def build_gcn_adjacency(g: GraphData) -> SparseAdjacency:
    """Symmetric-normalized adjacency with self-loops in CSR form."""
    n = g.num_nodes
    deg = np.bincount(g.edges[:, 0], minlength=n) if g.edges.size else np.zeros(n, dtype=np.int64)
    dtil = deg + 1.0
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([g.edges[:, 0], loops]) if g.edges.size else loops
    dst = np.concatenate([g.edges[:, 1], loops]) if g.edges.size else loops
    vals = 1.0 / np.sqrt(dtil[src] * dtil[dst])
    mat = sp.csr_matrix((vals, (src, dst)), shape=(n, n))
    mat.sort_indices()
    return SparseAdjacency(
        offsets=mat.indptr.astype(np.int64),
        indices=mat.indices.astype(np.int64),
        values=mat.data.astype(np.float64),
        num_nodes=n)


def _split_counts(total: int, ratios) -> tuple[int, int, int]:
    """Counts per split; a positive ratio must yield a non-empty split."""
    n_train = int(round(ratios[0] * total))
    n_val = int(round(ratios[1] * total))
    n_test = total - n_train - n_val
    for count, ratio in zip((n_train, n_val, n_test), ratios):
        if count < 0 or (ratio > 0 and count == 0):
            raise ConfigurationError(
                f"cannot split {total} items with ratios {tuple(ratios)}: "
                f"a requested split would be empty")
    return n_train, n_val, n_test


def sample_non_edges(count: int, num_nodes: int, forbidden: set, rng,
                     max_tries: int = 200, unique: bool = True) -> np.ndarray:
    """Uniform (u < v) pairs outside `forbidden`; rejection-sampled.

    With unique=False, pairs are drawn iid (duplicates allowed), which is
    the protocol for per-positive candidate negatives.
    """
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    chosen: list[tuple[int, int]] = []
    seen = set()
    for _ in range(max_tries):
        need = count - len(chosen)
        if need <= 0:
            break
        us = rng.integers(0, num_nodes, size=2 * need + 8)
        vs = rng.integers(0, num_nodes, size=2 * need + 8)
        for u, v in zip(us, vs):
            if u == v:
                continue
            key = (int(min(u, v)), int(max(u, v)))
            if key in forbidden or (unique and key in seen):
                continue
            if unique:
                seen.add(key)
            chosen.append(key)
            if len(chosen) == count:
                break
    if len(chosen) < count:
        raise ConfigurationError(
            f"could not sample {count} non-edges from a graph with "
            f"{num_nodes} nodes; graph too dense or too small")
    return np.asarray(chosen, dtype=np.int64)


def make_splits(g: GraphData, seed: int, task: str, ratios=(0.6, 0.2, 0.2)) -> GraphData:
    """Deterministic splits; for link tasks, held-out edges leave the adjacency."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios {tuple(ratios)} do not sum to 1")
    if task == "node":
        if g.labels is None:
            raise ConfigurationError("node split requested but graph has no labels")
        labeled = np.flatnonzero(g.labels >= 0)
        if not labeled.size:
            raise ConfigurationError("no labeled nodes to split")
        rng = derive(seed, "splits", "node")
        perm = labeled[rng.permutation(labeled.size)]
        n_tr, n_va, _ = _split_counts(labeled.size, ratios)
        splits = NodeSplits(
            train=np.sort(perm[:n_tr]),
            val=np.sort(perm[n_tr:n_tr + n_va]),
            test=np.sort(perm[n_tr + n_va:]))
        return replace(g, splits=splits)
    if task == "link":
        und = g.undirected_edges()
        if not und.size:
            raise ConfigurationError("link split requested but graph has no edges")
        rng = derive(seed, "splits", "link")
        perm = rng.permutation(und.shape[0])
        n_tr, n_va, _ = _split_counts(und.shape[0], ratios)
        train_pos = und[np.sort(perm[:n_tr])]
        val_pos = und[np.sort(perm[n_tr:n_tr + n_va])]
        test_pos = und[np.sort(perm[n_tr + n_va:])]
        forbidden = {(int(u), int(v)) for u, v in und}
        neg_rng = derive(seed, "splits", "link-negatives")
        # degenerate dense graphs may not have enough distinct non-edges
        available = g.num_nodes * (g.num_nodes - 1) // 2 - len(forbidden)
        want_val = min(val_pos.shape[0], available)
        want_test = min(test_pos.shape[0], max(available - want_val, 0))
        if want_val < val_pos.shape[0] or want_test < test_pos.shape[0]:
            log.warning("only %d non-edges available; negative sets will be short",
                        available)
        val_neg = sample_non_edges(want_val, g.num_nodes, forbidden, neg_rng)
        taken = {(int(u), int(v)) for u, v in val_neg}
        test_neg = sample_non_edges(want_test, g.num_nodes,
                                    forbidden | taken, neg_rng)
        splits = LinkSplits(train_pos=train_pos, val_pos=val_pos, test_pos=test_pos,
                            val_neg=val_neg, test_neg=test_neg)
        return replace(g, edges=_dedup_symmetrize(train_pos), splits=splits)
    raise ConfigurationError(f"unknown task {task!r}; expected 'node' or 'link'")


# ---------------------------------------------------------------------------
# persistence helpers


def save_features_binary(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def save_splits(splits, out_dir, prefix: str = "split") -> None:
    out_dir = Path(out_dir)
    if isinstance(splits, NodeSplits):
        parts = {"train": splits.train, "val": splits.val, "test": splits.test}
        for name, ids in parts.items():
            (out_dir / f"{prefix}_{name}.txt").write_text(
                "".join(f"{i}\n" for i in ids), encoding="utf-8")
    elif isinstance(splits, LinkSplits):
        parts = {
            "train_pos": splits.train_pos, "val_pos": splits.val_pos,
            "test_pos": splits.test_pos, "val_neg": splits.val_neg,
            "test_neg": splits.test_neg,
        }
        for name, pairs in parts.items():
            (out_dir / f"{prefix}_{name}.txt").write_text(
                "".join(f"{u} {v}\n" for u, v in pairs), encoding="utf-8")
    else:
        raise ConfigurationError("no splits to save")


def load_node_split_file(path) -> np.ndarray:
    ids = [int(line) for line in Path(path).read_text().split()]
    return np.asarray(ids, dtype=np.int64)
