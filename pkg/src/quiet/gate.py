"""Self-weighted gate over quantization levels and final token assignment.

A two-layer MLP scores the mean-pooled codewords of each level; a
tempered softmax turns the scores into fusion weights; the fused
codebook is the weighted sum of the per-level codebooks. Tokens are
nearest-fused-codeword ids, wired straight-through so task gradients
reach the encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ShapeError
from .quantizer import CodebookStack
from .rng import derive

log = logging.getLogger(__name__)


@dataclass
class GateState:
    """Two-layer MLP parameters plus the temperature and last outputs."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    temperature: float = 1.5
    last_logits: Optional[np.ndarray] = field(default=None, compare=False)
    last_weights: Optional[np.ndarray] = field(default=None, compare=False)

    def parameters(self) -> dict[str, Tensor]:
        return {"gate.w1": self.w1, "gate.b1": self.b1,
                "gate.w2": self.w2, "gate.b2": self.b2}


def init_gate(dim: int, hidden: int, temperature: float, seed: int) -> GateState:
    if temperature <= 0.0:
        raise ConfigurationError(f"gate temperature must be positive, got {temperature}")
    rng = derive(seed, "gate")
    from .encoder import glorot_uniform

    return GateState(
        w1=Tensor(glorot_uniform(rng, dim, hidden), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(glorot_uniform(rng, hidden, 1), requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
        temperature=temperature)


@dataclass
class FusedCodebook:
    c: Tensor                 # [K, d]
    weights: np.ndarray       # the fusion weights that produced c


@dataclass
class TokenAssignment:
    token_ids: np.ndarray          # [n] ids into the fused codebook
    embeddings: Tensor             # [n, d] straight-through token rows
    codeword_rows: Tensor          # [n, d] plain gather of fused rows
    level_indices: Optional[np.ndarray] = None   # [n, M] from quantization


def gate_logits(gate: GateState, stack: CodebookStack) -> Tensor:
    """One scalar per level from the MLP over mean-pooled codewords."""
    pooled = ag.concat(
        [ag.reshape(ag.mean(c, axis=0), (1, stack.dim)) for c in stack.levels], axis=0)
    hidden = ag.relu(ag.add(ag.matmul(pooled, gate.w1), gate.b1))
    z = ag.reshape(ag.add(ag.matmul(hidden, gate.w2), gate.b2), (stack.num_levels,))
    gate.last_logits = z.data.copy()
    return z


def gate_weights(logits: Tensor, temperature: float) -> Tensor:
    """Tempered softmax over the per-level scores."""
    if temperature <= 0.0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    return ag.softmax(ag.scale(logits, 1.0 / temperature), axis=0)


def fuse_codebooks(stack: CodebookStack, w: Tensor) -> FusedCodebook:
    """Weighted rowwise sum of the per-level codebooks."""
    if w.shape != (stack.num_levels,):
        raise ShapeError(f"fuse: weights shape {w.shape} != ({stack.num_levels},)")
    w_col = ag.reshape(w, (stack.num_levels, 1))
    fused = None
    for m, codebook in enumerate(stack.levels):
        term = ag.scale(codebook, ag.gather_rows(w_col, np.array([m])))
        fused = term if fused is None else ag.add(fused, term)
    return FusedCodebook(c=fused, weights=w.data.copy())


def fuse_codebooks_unweighted(stack: CodebookStack) -> FusedCodebook:
    """Gating-ablation fusion: plain sum over levels (stacking behaviour)."""
    fused = None
    for codebook in stack.levels:
        fused = codebook if fused is None else ag.add(fused, codebook)
    return FusedCodebook(c=fused, weights=np.ones(stack.num_levels))


def diversity_loss(stack: CodebookStack) -> Tensor:
    """Mean cosine similarity between aligned rows of adjacent levels."""
    if stack.num_levels < 2:
        log.info("diversity_loss: fewer than two levels, returning 0")
        return Tensor(0.0)
    total = None
    for m in range(stack.num_levels - 1):
        cos = ag.mean(ag.cosine_similarity_rows(stack.levels[m], stack.levels[m + 1]))
        total = cos if total is None else ag.add(total, cos)
    return ag.scale(total, 1.0 / (stack.num_levels - 1))


def assign_tokens(fused: FusedCodebook, h: Tensor, *,
                  straight_through: bool = True,
                  level_indices: Optional[np.ndarray] = None) -> TokenAssignment:
    """Map each embedding to its nearest fused codeword (ties to lowest id).

    With straight_through, the token tensor forwards the codeword value
    while the backward pass copies gradients onto the embeddings
    unchanged, in addition to the normal path into the fused codebook.
    """
    if h.shape[1] != fused.c.shape[1]:
        raise ShapeError(f"assign: embeddings dim {h.shape[1]} != fused dim {fused.c.shape[1]}")
    cd = fused.c.data
    d2 = ((h.data * h.data).sum(axis=1)[:, None]
          - 2.0 * (h.data @ cd.T)
          + (cd * cd).sum(axis=1)[None, :])
    ids = d2.argmin(axis=1)
    rows = ag.gather_rows(fused.c, ids)
    if straight_through and h.requires_grad:
        emb = ag.add(rows, ag.sub(h, ag.stop_gradient(h)))
    else:
        emb = rows
    return TokenAssignment(token_ids=ids, embeddings=emb,
                           codeword_rows=rows, level_indices=level_indices)


# ---------------------------------------------------------------------------
# token export: TSV "node_id\ttoken_id\tq1..qM"


def save_tokens_tsv(path, assignment: TokenAssignment) -> None:
    m = assignment.level_indices.shape[1] if assignment.level_indices is not None else 0
    header = "node_id\ttoken_id" + "".join(f"\tq{i + 1}" for i in range(m))
    lines = [header]
    for v, tok in enumerate(assignment.token_ids):
        row = f"{v}\t{tok}"
        if m:
            row += "".join(f"\t{q}" for q in assignment.level_indices[v])
        lines.append(row)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_gate_weight_log(path, rows: list) -> None:
    """CSV "epoch,w1..wM" with one row per epoch."""
    if not rows:
        return
    m = len(rows[0][1])
    header = "epoch," + ",".join(f"w{i + 1}" for i in range(m))
    lines = [header]
    for epoch, weights in rows:
        lines.append(f"{epoch}," + ",".join(repr(float(w)) for w in weights))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
