"""quiet: hierarchical residual-quantized graph tokenizer with a
task-adaptive self-weighted gate, plus desk-scale node-classification
and link-prediction heads."""

__version__ = "0.1.0"

from .autograd import Adam, Tape, Tensor, backward, stop_gradient
from .config import RunConfig, load_config, save_config
from .gate import (FusedCodebook, GateState, TokenAssignment, assign_tokens,
                   diversity_loss, fuse_codebooks, gate_logits, gate_weights)
from .graph import (GraphData, LinkSplits, NodeSplits, SparseAdjacency,
                    build_gcn_adjacency, load_graph, make_splits)
from .quantizer import (CodebookStack, QuantizationResult, balance_loss,
                        kmeans_init, quantize, revive_dead_codes)
from .training import (Model, commitment_loss, evaluate, metric_acc,
                       metric_hits_at_k, metric_mrr, metric_roc_auc,
                       tokenizer_loss, total_loss, train)

__all__ = [
    "Adam", "Tape", "Tensor", "backward", "stop_gradient",
    "RunConfig", "load_config", "save_config",
    "FusedCodebook", "GateState", "TokenAssignment", "assign_tokens",
    "diversity_loss", "fuse_codebooks", "gate_logits", "gate_weights",
    "GraphData", "LinkSplits", "NodeSplits", "SparseAdjacency",
    "build_gcn_adjacency", "load_graph", "make_splits",
    "CodebookStack", "QuantizationResult", "balance_loss", "kmeans_init",
    "quantize", "revive_dead_codes",
    "Model", "commitment_loss", "evaluate", "metric_acc", "metric_hits_at_k",
    "metric_mrr", "metric_roc_auc", "tokenizer_loss", "total_loss", "train",
]
