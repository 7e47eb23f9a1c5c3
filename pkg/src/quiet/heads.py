"""Task heads over discrete tokens.

Node classification runs a pre-norm transformer encoder over token
embeddings of a node batch (all-pairs attention inside the batch,
no positional encoding). Link prediction scores a node pair from the
elementwise token product plus an attention-pooled context summary,
where each context node carries a personalized-PageRank relative
positional encoding.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, ShapeError
from .gate import TokenAssignment
from .graph import SparseAdjacency
from .rng import derive

PPR_MAGIC = b"QTPR"
_NEG_BIG = 1e9


# ---------------------------------------------------------------------------
# transformer encoder for node classification


@dataclass
class TransformerBlock:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class TransformerEncoder:
    """Pre-norm blocks: x + MHA(LN(x)) then x + MLP(LN(x))."""

    blocks: list[TransformerBlock]
    num_heads: int
    model_dim: int
    in_proj: Optional[Tensor]
    in_bias: Optional[Tensor]
    out_w: Tensor
    out_b: Tensor
    last_attention: Optional[np.ndarray] = field(default=None, compare=False)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.in_proj is not None:
            out["head.in_proj.weight"] = self.in_proj
            out["head.in_proj.bias"] = self.in_bias
        for i, blk in enumerate(self.blocks):
            prefix = f"head.block{i}"
            out[f"{prefix}.ln1.gain"] = blk.ln1_gain
            out[f"{prefix}.ln1.bias"] = blk.ln1_bias
            out[f"{prefix}.attn.wq"] = blk.wq
            out[f"{prefix}.attn.wk"] = blk.wk
            out[f"{prefix}.attn.wv"] = blk.wv
            out[f"{prefix}.attn.wo"] = blk.wo
            out[f"{prefix}.attn.bo"] = blk.bo
            out[f"{prefix}.ln2.gain"] = blk.ln2_gain
            out[f"{prefix}.ln2.bias"] = blk.ln2_bias
            out[f"{prefix}.mlp.w1"] = blk.mlp_w1
            out[f"{prefix}.mlp.b1"] = blk.mlp_b1
            out[f"{prefix}.mlp.w2"] = blk.mlp_w2
            out[f"{prefix}.mlp.b2"] = blk.mlp_b2
        out["head.out.weight"] = self.out_w
        out["head.out.bias"] = self.out_b
        return out


def init_transformer(d_in: int, d_model: int, num_heads: int, num_layers: int,
                     num_classes: int, seed: int, mlp_ratio: int = 2) -> TransformerEncoder:
    if d_model % num_heads != 0:
        raise ConfigurationError(f"model dim {d_model} not divisible by {num_heads} heads")
    from .encoder import glorot_uniform

    rng = derive(seed, "transformer")
    blocks = []
    hidden = mlp_ratio * d_model
    for _ in range(num_layers):
        blocks.append(TransformerBlock(
            ln1_gain=Tensor(np.ones(d_model), requires_grad=True),
            ln1_bias=Tensor(np.zeros(d_model), requires_grad=True),
            wq=Tensor(glorot_uniform(rng, d_model, d_model), requires_grad=True),
            wk=Tensor(glorot_uniform(rng, d_model, d_model), requires_grad=True),
            wv=Tensor(glorot_uniform(rng, d_model, d_model), requires_grad=True),
            wo=Tensor(glorot_uniform(rng, d_model, d_model), requires_grad=True),
            bo=Tensor(np.zeros(d_model), requires_grad=True),
            ln2_gain=Tensor(np.ones(d_model), requires_grad=True),
            ln2_bias=Tensor(np.zeros(d_model), requires_grad=True),
            mlp_w1=Tensor(glorot_uniform(rng, d_model, hidden), requires_grad=True),
            mlp_b1=Tensor(np.zeros(hidden), requires_grad=True),
            mlp_w2=Tensor(glorot_uniform(rng, hidden, d_model), requires_grad=True),
            mlp_b2=Tensor(np.zeros(d_model), requires_grad=True)))
    in_proj = in_bias = None
    if d_in != d_model:
        in_proj = Tensor(glorot_uniform(rng, d_in, d_model), requires_grad=True)
        in_bias = Tensor(np.zeros(d_model), requires_grad=True)
    return TransformerEncoder(
        blocks=blocks, num_heads=num_heads, model_dim=d_model,
        in_proj=in_proj, in_bias=in_bias,
        out_w=Tensor(glorot_uniform(rng, d_model, num_classes), requires_grad=True),
        out_b=Tensor(np.zeros(num_classes), requires_grad=True))


def multi_head_attention(x: Tensor, blk: TransformerBlock, num_heads: int):
    """Scaled dot-product attention over the batch; returns (out, probs)."""
    b, d = x.shape
    dk = d // num_heads
    q = ag.matmul(x, blk.wq)
    k = ag.matmul(x, blk.wk)
    v = ag.matmul(x, blk.wv)

    def split(t):
        return ag.transpose(ag.reshape(t, (b, num_heads, dk)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dk))
    probs = ag.softmax(scores, axis=-1)
    mixed = ag.matmul(probs, vh)
    merged = ag.reshape(ag.transpose(mixed, (1, 0, 2)), (b, d))
    out = ag.add(ag.matmul(merged, blk.wo), blk.bo)
    return out, probs.data


def transformer_block_forward(x: Tensor, blk: TransformerBlock, num_heads: int) -> Tensor:
    attn_out, _ = multi_head_attention(
        ag.layer_norm(x, blk.ln1_gain, blk.ln1_bias), blk, num_heads)
    x = ag.add(x, attn_out)
    normed = ag.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
    mlp = ag.add(ag.matmul(ag.relu(ag.add(ag.matmul(normed, blk.mlp_w1), blk.mlp_b1)),
                           blk.mlp_w2), blk.mlp_b2)
    return ag.add(x, mlp)


def nc_forward(enc: TransformerEncoder, tokens, batch) -> Tensor:
    """Class logits for a node batch from its token embeddings."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ContractError("nc_forward: empty batch")
    emb = tokens.embeddings if isinstance(tokens, TokenAssignment) else tokens
    x = ag.gather_rows(emb, batch)
    if enc.in_proj is not None:
        x = ag.add(ag.matmul(x, enc.in_proj), enc.in_bias)
    elif x.shape[1] != enc.model_dim:
        raise ShapeError(f"nc_forward: token dim {x.shape[1]} != model dim {enc.model_dim}")
    for blk in enc.blocks:
        x = transformer_block_forward(x, blk, enc.num_heads)
    return ag.add(ag.matmul(x, enc.out_w), enc.out_b)


# ---------------------------------------------------------------------------
# personalized PageRank by synchronous forward push


@dataclass
class PprTable:
    """Sparse PPR rows keyed by source node."""

    alpha: float
    eps: float
    num_nodes: int
    rows: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    _top_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def value(self, source: int, target: int) -> float:
        idx, val = self.rows[source]
        pos = np.searchsorted(idx, target)
        if pos < idx.size and idx[pos] == target:
            return float(val[pos])
        return 0.0

    def values_at(self, source: int, targets: np.ndarray) -> np.ndarray:
        idx, val = self.rows[source]
        pos = np.searchsorted(idx, targets)
        pos = np.minimum(pos, max(idx.size - 1, 0))
        out = np.zeros(targets.shape, dtype=np.float64)
        if idx.size:
            hit = idx[pos] == targets
            out[hit] = val[pos[hit]]
        return out

    def top_nodes(self, source: int, count: int) -> np.ndarray:
        """Highest-PPR node ids for a source, ties broken by ascending id."""
        key = (source, count)
        cached = self._top_cache.get(key)
        if cached is not None:
            return cached
        idx, val = self.rows[source]
        if not idx.size:
            out = np.zeros(0, dtype=np.int64)
        else:
            order = np.lexsort((idx, -val))
            out = idx[order[:count]]
        self._top_cache[key] = out
        return out


def _push_chunk(w_t: sp.csr_matrix, deg: np.ndarray, sources: np.ndarray,
                alpha: float, eps: float, max_sweeps: int = 100_000) -> np.ndarray:
    """Synchronous push for a block of sources; columns are sources."""
    n = deg.size
    r = np.zeros((n, sources.size), dtype=np.float64)
    r[sources, np.arange(sources.size)] = 1.0
    p = np.zeros_like(r)
    thresh = (eps * deg)[:, None]
    for _ in range(max_sweeps):
        active = r >= thresh
        if not active.any():
            return p
        ra = np.where(active, r, 0.0)
        p += alpha * ra
        r = (r - ra) + w_t @ ((1.0 - alpha) * ra)
    raise ContractError("ppr push did not converge; check adjacency")


def _walk_operator(adj: SparseAdjacency) -> tuple[sp.csr_matrix, np.ndarray]:
    """Column-stochastic transfer operator W^T and structural degrees."""
    deg = adj.row_degrees().astype(np.float64)
    if (deg == 0).any():
        raise ContractError("ppr: adjacency has empty rows; add self-loops first")
    struct = adj.structure_csr()
    w = sp.diags(1.0 / deg) @ struct
    return w.T.tocsr(), deg


def compute_ppr(adj: SparseAdjacency, source: int, alpha: float = 0.15,
                eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Approximate PPR row: every residual ends below eps*deg(node)."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"restart probability must be in (0,1), got {alpha}")
    w_t, deg = _walk_operator(adj)
    p = _push_chunk(w_t, deg, np.array([source]), alpha, eps)[:, 0]
    idx = np.flatnonzero(p)
    return idx.astype(np.int64), p[idx]


def compute_ppr_table(adj: SparseAdjacency, sources, alpha: float = 0.15,
                      eps: float = 1e-5, chunk: int = 256) -> PprTable:
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"restart probability must be in (0,1), got {alpha}")
    sources = np.asarray(sorted(set(int(s) for s in np.asarray(sources).ravel())),
                         dtype=np.int64)
    w_t, deg = _walk_operator(adj)
    table = PprTable(alpha=alpha, eps=eps, num_nodes=adj.num_nodes)
    for start in range(0, sources.size, chunk):
        block = sources[start:start + chunk]
        p = _push_chunk(w_t, deg, block, alpha, eps)
        for j, s in enumerate(block):
            idx = np.flatnonzero(p[:, j])
            table.rows[int(s)] = (idx.astype(np.int64), p[idx, j].copy())
    return table


def save_ppr_cache(path, table: PprTable, adjacency_hash: str) -> None:
    digest = bytes.fromhex(adjacency_hash)
    with open(path, "wb") as fh:
        fh.write(PPR_MAGIC)
        fh.write(struct.pack("<dd", table.alpha, table.eps))
        fh.write(struct.pack("<II", table.num_nodes, len(table.rows)))
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        for source in sorted(table.rows):
            idx, val = table.rows[source]
            fh.write(struct.pack("<II", source, idx.size))
            fh.write(np.ascontiguousarray(idx, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(val, dtype="<f4").tobytes())


def load_ppr_cache(path, expected_hash: str = None) -> Optional[PprTable]:
    """Read a QTPR file; returns None when the adjacency hash differs."""
    with open(path, "rb") as fh:
        if fh.read(4) != PPR_MAGIC:
            raise ShapeError(f"{path}: not a PPR cache file")
        alpha, eps = struct.unpack("<dd", fh.read(16))
        num_nodes, num_rows = struct.unpack("<II", fh.read(8))
        (hlen,) = struct.unpack("<I", fh.read(4))
        stored_hash = fh.read(hlen).hex()
        if expected_hash is not None and stored_hash != expected_hash:
            return None
        table = PprTable(alpha=alpha, eps=eps, num_nodes=num_nodes)
        for _ in range(num_rows):
            source, nnz = struct.unpack("<II", fh.read(8))
            idx = np.frombuffer(fh.read(4 * nnz), dtype="<u4").astype(np.int64)
            val = np.frombuffer(fh.read(4 * nnz), dtype="<f4").astype(np.float64)
            table.rows[source] = (idx, val)
    return table


def ppr_cache_key(adj: SparseAdjacency, alpha: float, eps: float) -> str:
    h = hashlib.sha256()
    h.update(adj.offsets.tobytes())
    h.update(adj.indices.tobytes())
    h.update(struct.pack("<dd", alpha, eps))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# relative positional encoding and the link-prediction scorer

CATEGORY_CN, CATEGORY_ONE_HOP, CATEGORY_FAR = 0, 1, 2


@dataclass
class RpeFunction:
    """One linear map (ppr pair -> d_r vector) per structural category."""

    weights: list[Tensor]   # 3 tensors [2, d_r]
    biases: list[Tensor]    # 3 tensors [d_r]

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        names = ("cn", "one_hop", "far")
        out = {}
        for name, w, b in zip(names, self.weights, self.biases):
            out[f"lp.rpe.{name}.weight"] = w
            out[f"lp.rpe.{name}.bias"] = b
        return out


def init_rpe(d_r: int, seed: int) -> RpeFunction:
    from .encoder import glorot_uniform

    rng = derive(seed, "rpe")
    return RpeFunction(
        weights=[Tensor(glorot_uniform(rng, 2, d_r), requires_grad=True) for _ in range(3)],
        biases=[Tensor(np.zeros(d_r), requires_grad=True) for _ in range(3)])


def categorize(u: int, a: int, b: int, neighbor_sets) -> int:
    in_a = u in neighbor_sets[a]
    in_b = u in neighbor_sets[b]
    if in_a and in_b:
        return CATEGORY_CN
    if in_a or in_b:
        return CATEGORY_ONE_HOP
    return CATEGORY_FAR


def rpe(a: int, b: int, u: int, table: PprTable, f: RpeFunction, neighbor_sets) -> Tensor:
    """Symmetric positional code for context node u of the pair (a, b)."""
    if u in (a, b):
        raise ContractError("rpe: context node equals an endpoint; caller must filter")
    cat = categorize(u, a, b, neighbor_sets)
    pa = table.value(a, u)
    pb = table.value(b, u)
    xy = np.array([[pa, pb]])
    yx = np.array([[pb, pa]])
    w, bias = f.weights[cat], f.biases[cat]
    out = ag.add(ag.add(ag.matmul(Tensor(xy), w), ag.matmul(Tensor(yx), w)),
                 ag.scale(bias, 2.0))
    return ag.reshape(out, (f.dim,))


@dataclass
class LpHead:
    """Attention-pooled context scorer over token pairs."""

    rpe_fn: RpeFunction
    att_w: Tensor
    att_b: Tensor
    att_v: Tensor
    att_c: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.rpe_fn.parameters())
        out.update({
            "lp.att.w": self.att_w, "lp.att.b": self.att_b,
            "lp.att.v": self.att_v, "lp.att.c": self.att_c,
            "lp.mlp.w1": self.mlp_w1, "lp.mlp.b1": self.mlp_b1,
            "lp.mlp.w2": self.mlp_w2, "lp.mlp.b2": self.mlp_b2,
        })
        return out


def init_lp_head(token_dim: int, d_r: int, att_hidden: int, mlp_hidden: int,
                 seed: int) -> LpHead:
    from .encoder import glorot_uniform

    rng = derive(seed, "lp-head")
    att_in = 2 * token_dim + d_r
    mlp_in = 2 * token_dim + d_r
    return LpHead(
        rpe_fn=init_rpe(d_r, seed),
        att_w=Tensor(glorot_uniform(rng, att_in, att_hidden), requires_grad=True),
        att_b=Tensor(np.zeros(att_hidden), requires_grad=True),
        att_v=Tensor(glorot_uniform(rng, att_hidden, 1), requires_grad=True),
        att_c=Tensor(np.zeros(1), requires_grad=True),
        mlp_w1=Tensor(glorot_uniform(rng, mlp_in, mlp_hidden), requires_grad=True),
        mlp_b1=Tensor(np.zeros(mlp_hidden), requires_grad=True),
        mlp_w2=Tensor(glorot_uniform(rng, mlp_hidden, 1), requires_grad=True),
        mlp_b2=Tensor(np.zeros(1), requires_grad=True))


def build_pair_contexts(pairs: np.ndarray, table: PprTable, per_endpoint: int,
                        neighbor_sets) -> dict:
    """Padded context ids, mask, ppr values, and categories per pair.

    The context of (a, b) is the union of each endpoint's highest-PPR
    nodes, endpoints excluded, in ascending id order.
    """
    num_pairs = pairs.shape[0]
    nbr_arrays = [np.fromiter(s, dtype=np.int64, count=len(s)) if s else
                  np.zeros(0, dtype=np.int64) for s in neighbor_sets]
    for arr in nbr_arrays:
        arr.sort()
    ctx_lists = []
    for a, b in pairs:
        a, b = int(a), int(b)
        merged = np.union1d(table.top_nodes(a, per_endpoint),
                            table.top_nodes(b, per_endpoint))
        ctx_lists.append(merged[(merged != a) & (merged != b)])
    width = max((c.size for c in ctx_lists), default=0)
    ids = np.zeros((num_pairs, width), dtype=np.int64)
    mask = np.zeros((num_pairs, width), dtype=np.float64)
    pa = np.zeros((num_pairs, width), dtype=np.float64)
    pb = np.zeros((num_pairs, width), dtype=np.float64)
    cats = np.full((num_pairs, width), CATEGORY_FAR, dtype=np.int64)
    for i, (pair, arr) in enumerate(zip(pairs, ctx_lists)):
        if not arr.size:
            continue
        a, b = int(pair[0]), int(pair[1])
        k = arr.size
        ids[i, :k] = arr
        mask[i, :k] = 1.0
        pa[i, :k] = table.values_at(a, arr)
        pb[i, :k] = table.values_at(b, arr)
        in_a = np.isin(arr, nbr_arrays[a], assume_unique=True)
        in_b = np.isin(arr, nbr_arrays[b], assume_unique=True)
        cats[i, :k] = np.where(in_a & in_b, CATEGORY_CN,
                               np.where(in_a | in_b, CATEGORY_ONE_HOP,
                                        CATEGORY_FAR))
    return {"ids": ids, "mask": mask, "pa": pa, "pb": pb, "cats": cats}


def _rpe_batch(f: RpeFunction, pa: np.ndarray, pb: np.ndarray,
               cats: np.ndarray) -> Tensor:
    """Vectorized symmetric RPE for flattened (pair, context) slots."""
    flat = pa.size
    xy = np.stack([pa.ravel(), pb.ravel()], axis=1)
    yx = xy[:, ::-1]
    sym = xy + yx
    out = None
    for cat in (CATEGORY_CN, CATEGORY_ONE_HOP, CATEGORY_FAR):
        sel = (cats.ravel() == cat).astype(np.float64)[:, None]
        term = ag.add(ag.matmul(Tensor(sym), f.weights[cat]),
                      ag.scale(f.biases[cat], 2.0))
        term = ag.mul(term, sel)
        out = term if out is None else ag.add(out, term)
    return out  # [flat, d_r]


def lp_pair_logits(head: LpHead, token_emb: Tensor, pairs: np.ndarray,
                   ctx: dict) -> Tensor:
    """Pre-sigmoid scores for a batch of candidate pairs."""
    pairs = np.asarray(pairs, dtype=np.int64)
    num_pairs = pairs.shape[0]
    ta = ag.gather_rows(token_emb, pairs[:, 0])
    tb = ag.gather_rows(token_emb, pairs[:, 1])
    tab = ag.mul(ta, tb)
    d = token_emb.shape[1]
    width = ctx["ids"].shape[1]
    d_r = head.rpe_fn.dim
    if width == 0:
        ctx_vec = Tensor(np.zeros((num_pairs, d + d_r)))
    else:
        flat_ids = ctx["ids"].ravel()
        tu = ag.gather_rows(token_emb, flat_ids)
        rpe_all = _rpe_batch(head.rpe_fn, ctx["pa"], ctx["pb"], ctx["cats"])
        tab_rep = ag.gather_rows(tab, np.repeat(np.arange(num_pairs), width))
        att_in = ag.concat([tab_rep, tu, rpe_all], axis=1)
        scores = ag.add(ag.matmul(ag.relu(ag.add(ag.matmul(att_in, head.att_w),
                                                 head.att_b)), head.att_v), head.att_c)
        scores = ag.reshape(scores, (num_pairs, width))
        scores = ag.add(scores, (ctx["mask"] - 1.0) * _NEG_BIG)
        att = ag.softmax(scores, axis=1)
        att = ag.mul(att, ctx["mask"])
        ctx_feat = ag.concat([tu, rpe_all], axis=1)
        weighted = ag.mul(ctx_feat, ag.reshape(att, (num_pairs * width, 1)))
        ctx_vec = ag.tsum(ag.reshape(weighted, (num_pairs, width, d + d_r)), axis=1)
    feat = ag.concat([tab, ctx_vec], axis=1)
    hidden = ag.relu(ag.add(ag.matmul(feat, head.mlp_w1), head.mlp_b1))
    return ag.reshape(ag.add(ag.matmul(hidden, head.mlp_w2), head.mlp_b2), (num_pairs,))


def lp_score(head: LpHead, tokens, pair, context, table: PprTable,
             neighbor_sets) -> float:
    """Probability that the edge (a, b) exists, given explicit context ids."""
    a, b = int(pair[0]), int(pair[1])
    context = [int(u) for u in context]
    if a in context or b in context:
        raise ContractError("lp_score: context must exclude the endpoints")
    emb = tokens.embeddings if isinstance(tokens, TokenAssignment) else tokens
    pairs = np.array([[a, b]], dtype=np.int64)
    width = len(context)
    ctx = {
        "ids": np.asarray(context, dtype=np.int64).reshape(1, width),
        "mask": np.ones((1, width), dtype=np.float64),
        "pa": np.array([[table.value(a, u) for u in context]], dtype=np.float64),
        "pb": np.array([[table.value(b, u) for u in context]], dtype=np.float64),
        "cats": np.array([[categorize(u, a, b, neighbor_sets) for u in context]],
                         dtype=np.int64),
    }
    if width == 0:
        ctx = {"ids": np.zeros((1, 0), dtype=np.int64),
               "mask": np.zeros((1, 0)), "pa": np.zeros((1, 0)),
               "pb": np.zeros((1, 0)), "cats": np.zeros((1, 0), dtype=np.int64)}
    logit = lp_pair_logits(head, emb, pairs, ctx)
    return float(ag.sigmoid(logit).data[0])
