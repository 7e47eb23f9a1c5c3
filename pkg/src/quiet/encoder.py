"""L-layer GCN encoder producing continuous node embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .graph import SparseAdjacency
from .rng import derive

SPARSE_INPUT_DENSITY = 0.05


def glorot_uniform(rng, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


@dataclass
class GcnLayer:
    weight: Tensor
    bias: Tensor


@dataclass
class GcnEncoder:
    """Stack of Â·X·W + b layers with ReLU between, none after the last."""

    layers: list[GcnLayer]
    dropout_rate: float = 0.5
    _input_cache: tuple = field(default=None, repr=False, compare=False)

    @property
    def dims(self) -> list[int]:
        out = [self.layers[0].weight.shape[0]]
        out.extend(l.weight.shape[1] for l in self.layers)
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"gnn.layer{i}.weight"] = layer.weight
            out[f"gnn.layer{i}.bias"] = layer.bias
        return out


def init_gcn(dims: list[int], seed: int, dropout_rate: float = 0.5) -> GcnEncoder:
    """Glorot-uniform weights and zero biases, deterministic per seed."""
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        rng = derive(seed, "gnn", i)
        layers.append(GcnLayer(
            weight=Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True),
            bias=Tensor(np.zeros(d_out), requires_grad=True)))
    return GcnEncoder(layers=layers, dropout_rate=dropout_rate)


def _sparse_input(enc: GcnEncoder, x: np.ndarray) -> sp.csr_matrix:
    if enc._input_cache is None or enc._input_cache[0] is not x:
        enc._input_cache = (x, sp.csr_matrix(x))
    return enc._input_cache[1]


def encode(enc: GcnEncoder, adj: SparseAdjacency, x: Tensor, *,
           training: bool = False, rng=None) -> Tensor:
    """Run all layers; records on the active tape when inputs require grad.

    Dense feature inputs that do not require gradients and are sparse
    enough take a CSR fast path for the first projection.
    """
    if x.shape[0] != adj.num_nodes:
        raise ShapeError(
            f"encode: features have {x.shape[0]} rows, adjacency has {adj.num_nodes}")
    if training and enc.dropout_rate > 0.0 and rng is None:
        raise ContractError("encode: training-mode dropout needs an rng")
    a_csr = adj.to_csr()
    h = x
    for i, layer in enumerate(enc.layers):
        if i == 0 and not x.requires_grad and _density(x.data) < SPARSE_INPUT_DENSITY:
            base = _sparse_input(enc, x.data)
            if training and enc.dropout_rate > 0.0:
                keep = 1.0 - enc.dropout_rate
                mask = (rng.random(base.data.shape) < keep) / keep
                base = sp.csr_matrix((base.data * mask, base.indices, base.indptr),
                                     shape=base.shape)
            hw = ag.sparse_dense_matmul(base, layer.weight)
        else:
            if training and enc.dropout_rate > 0.0:
                h = ag.dropout(h, enc.dropout_rate, rng, training=True)
            hw = ag.matmul(h, layer.weight)
        h = ag.add(ag.sparse_dense_matmul(a_csr, hw), layer.bias)
        if i < len(enc.layers) - 1:
            h = ag.relu(h)
    return h


def _density(arr: np.ndarray) -> float:
    return float(np.count_nonzero(arr)) / max(arr.size, 1)
