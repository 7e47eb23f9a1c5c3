"""Composite objective, training loop, and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Adam, Tape, Tensor, backward
from .encoder import GcnEncoder, encode, init_gcn
from .errors import (ConfigurationError, ContractError, DivergenceError,
                     ShapeError, UndefinedMetricError)
from .gate import (GateState, TokenAssignment, assign_tokens, diversity_loss,
                   fuse_codebooks, fuse_codebooks_unweighted, gate_logits,
                   gate_weights, init_gate)
from .graph import (GraphData, LinkSplits, NodeSplits, SparseAdjacency,
                    build_gcn_adjacency, sample_non_edges)
from .heads import (LpHead, TransformerEncoder, build_pair_contexts,
                    compute_ppr_table, init_lp_head, init_transformer,
                    lp_pair_logits, nc_forward)
from .quantizer import (CodebookStack, balance_loss, balance_surrogate,
                        init_stack, quantize, revive_dead_codes)
from .rng import derive

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    alpha: float = 0.01
    beta: float = 0.01
    eta: float = 0.25
    no_gating: bool = False
    no_diversity: bool = False
    no_balance: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = -np.inf
    best_epoch: int = -1
    patience_left: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss terms


def commitment_loss(h: Tensor, t: Tensor, eta: float) -> Tensor:
    """Mean squared pull of tokens toward (stopped) embeddings and back."""
    if h.shape != t.shape:
        raise ShapeError(f"commitment_loss: {h.shape} vs {t.shape}")
    first = ag.mean(ag.tsum(ag.square(ag.sub(ag.stop_gradient(h), t)), axis=1))
    second = ag.mean(ag.tsum(ag.square(ag.sub(ag.stop_gradient(t), h)), axis=1))
    return ag.add(first, ag.scale(second, eta))


def tokenizer_loss(parts: dict, cfg: LossConfig):
    """Combine commitment, balance, and diversity terms per the ablation flags.

    Returns (loss, included) where `included` maps term name to its scalar
    contribution; the sum of contributions equals the loss exactly.
    """
    included = {"commit": parts["commit"]}
    total = parts["commit"]
    if not cfg.no_balance and cfg.alpha > 0 and parts.get("balance") is not None:
        term = ag.scale(parts["balance"], cfg.alpha)
        included["balance"] = term
        total = ag.add(total, term)
    if not cfg.no_diversity and cfg.beta > 0 and parts.get("diversity") is not None:
        term = ag.scale(parts["diversity"], cfg.beta)
        included["diversity"] = term
        total = ag.add(total, term)
    return total, included


def total_loss(tok: Tensor, task: Tensor) -> Tensor:
    return ag.add(tok, task)


# ---------------------------------------------------------------------------
# evaluation metrics


def metric_acc(pred, gold) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ShapeError(f"metric_acc: {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise ContractError("metric_acc: empty prediction vector")
    return float((pred == gold).mean())


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def metric_roc_auc(scores, labels) -> float:
    """Rank-based AUC (Mann-Whitney), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def rank_against_negatives(pos_scores: np.ndarray, neg_scores: np.ndarray) -> np.ndarray:
    """Optimistic-pessimistic average rank of each positive among its negatives."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)[:, None]
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    greater = (neg_scores > pos_scores).sum(axis=1)
    ties = (neg_scores == pos_scores).sum(axis=1)
    return 1.0 + greater + 0.5 * ties


def metric_mrr(pos_ranks) -> float:
    ranks = np.asarray(pos_ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("metric_mrr: no ranks")
    if (ranks < 1).any():
        raise ContractError("metric_mrr: ranks must be >= 1")
    return float((1.0 / ranks).mean())


def metric_hits_at_k(pos_ranks, k: int) -> float:
    if k < 1:
        raise ContractError("metric_hits_at_k: k must be >= 1")
    ranks = np.asarray(pos_ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("metric_hits_at_k: no ranks")
    return float((ranks <= k).mean())


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Model:
    task: str
    encoder: GcnEncoder
    stack: CodebookStack
    gate: Optional[GateState]
    nc_head: Optional[TransformerEncoder] = None
    lp_head: Optional[LpHead] = None
    gate_weights: Optional[np.ndarray] = None   # fusion weights snapshot

    def parameters(self, *, trainable_only: bool = False,
                   freeze_encoder: bool = False) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if not (trainable_only and freeze_encoder):
            out.update(self.encoder.parameters())
            out.update(self.stack.parameters())
        if self.gate is not None:
            out.update(self.gate.parameters())
        if self.nc_head is not None:
            out.update(self.nc_head.parameters())
        if self.lp_head is not None:
            out.update(self.lp_head.parameters())
        return out

    def fusion(self, *, stored: bool = False):
        """Current fused codebook; `stored` uses the saved weights vector."""
        if self.gate is None:
            return fuse_codebooks_unweighted(self.stack)
        if stored:
            if self.gate_weights is None:
                raise ContractError("model has no stored gate weights")
            return fuse_codebooks(self.stack, Tensor(self.gate_weights))
        logits = gate_logits(self.gate, self.stack)
        w = gate_weights(logits, self.gate.temperature)
        self.gate.last_weights = w.data.copy()
        return fuse_codebooks(self.stack, w)


def build_model(cfg, feature_dim: int, num_classes: int,
                init_embeddings: Optional[np.ndarray] = None) -> Model:
    """Construct encoder, codebooks, gate, and the task head from a config.

    Without reference embeddings the codebooks start from the seeded random
    fallback; pass the untrained encoder's output to pre-fit them instead.
    """
    dims = [feature_dim] + [cfg.encoder_hidden] * cfg.encoder_layers
    enc = init_gcn(dims, cfg.seed, cfg.encoder_dropout)
    if init_embeddings is None:
        stack = init_stack(np.zeros((max(cfg.codewords, 1), cfg.encoder_hidden)),
                           cfg.levels, cfg.codewords, seed=cfg.seed, kmeans=False)
    else:
        stack = init_stack(init_embeddings, cfg.levels, cfg.codewords,
                           seed=cfg.seed, kmeans=cfg.kmeans_init,
                           kmeans_iters=cfg.kmeans_iters)
    gating = cfg.gate_enabled and not cfg.no_gating
    gate = init_gate(cfg.encoder_hidden, cfg.gate_hidden, cfg.temperature,
                     cfg.seed) if gating else None
    model = Model(task=cfg.task, encoder=enc, stack=stack, gate=gate)
    if cfg.task == "nc":
        model.nc_head = init_transformer(
            cfg.encoder_hidden, cfg.head_dim, cfg.head_heads, cfg.head_layers,
            num_classes, cfg.seed, mlp_ratio=cfg.head_mlp_ratio)
    elif cfg.task == "lp":
        model.lp_head = init_lp_head(
            cfg.encoder_hidden, cfg.rpe_dim, cfg.att_hidden, cfg.lp_mlp_hidden,
            cfg.seed)
    else:
        raise ConfigurationError(f"unknown task {cfg.task!r}")
    return model


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.parameters().items()}
    weights = model.gate_weights
    if weights is None:
        weights = np.ones(model.stack.num_levels)
    out["gate.weights"] = weights
    return out


def load_model(cfg, feature_dim: int, num_classes: int,
               tensors: dict[str, np.ndarray]) -> Model:
    model = build_model(cfg, feature_dim, num_classes, init_embeddings=None)
    params = model.parameters()
    for name, p in params.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise ShapeError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {tuple(p.shape)}")
        p.data = tensors[name].astype(p.data.dtype)
    model.gate_weights = tensors.get("gate.weights")
    return model


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    history: list
    gate_log: list
    test_metrics: dict
    tokens: TokenAssignment
    fused_codebook: np.ndarray


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def _tokenizer_forward(model: Model, adj, x: Tensor, cfg, *, training: bool,
                       epoch: int = 0):
    """Shared encode -> quantize -> gate/fuse -> assign pipeline."""
    rng = derive(cfg.seed, "dropout", epoch) if training else None
    h = encode(model.encoder, adj, x, training=training, rng=rng)
    qres = quantize(model.stack, h, count_usage=training)
    fused = model.fusion()
    assign = assign_tokens(fused, h, straight_through=training,
                           level_indices=qres.indices)
    return h, qres, fused, assign


def _nc_eval(model: Model, assign: TokenAssignment, labels, ids, batch: int) -> float:
    preds = np.empty(ids.size, dtype=np.int64)
    step = batch if batch > 0 else ids.size
    for start in range(0, ids.size, step):
        chunk = ids[start:start + step]
        logits = nc_forward(model.nc_head, assign, chunk)
        preds[start:start + step] = logits.data.argmax(axis=1)
    return metric_acc(preds, labels[ids])


def _lp_logits_chunked(model: Model, assign: TokenAssignment, pairs: np.ndarray,
                       ctx: dict, chunk: int = 4096):
    outs = []
    for start in range(0, pairs.shape[0], chunk):
        sl = slice(start, start + chunk)
        sub_ctx = {k: v[sl] for k, v in ctx.items()}
        outs.append(lp_pair_logits(model.lp_head, assign.embeddings,
                                   pairs[sl], sub_ctx))
    return ag.concat(outs, axis=0) if len(outs) > 1 else outs[0]


class _LpRun:
    """Per-run link-prediction fixtures: PPR, contexts, eval candidates."""

    def __init__(self, graph: GraphData, adj, cfg):
        splits: LinkSplits = graph.splits
        self.splits = splits
        self.nbrs = graph.neighbor_sets()
        self.table = compute_ppr_table(
            adj, np.arange(graph.num_nodes), cfg.alpha_restart, cfg.eps_ppr)
        self.per_endpoint = cfg.context_per_endpoint
        forbidden = {(int(u), int(v)) for u, v in
                     np.concatenate([splits.train_pos, splits.val_pos,
                                     splits.test_pos])}
        self.forbidden = forbidden
        self.num_nodes = graph.num_nodes
        cand_rng = derive(cfg.seed, "eval-candidates")
        self.val_cand = self._candidates(splits.val_pos, cand_rng)
        self.test_cand = self._candidates(splits.test_pos, cand_rng)
        self.train_pos_ctx = self.contexts(splits.train_pos)
        self.val_pos_ctx = self.contexts(splits.val_pos)
        self.val_cand_ctx = self.contexts(self.val_cand.reshape(-1, 2))
        # fixed subsample of train positives for the per-epoch train metric
        sub_rng = derive(cfg.seed, "train-eval-subsample")
        count = min(200, splits.train_pos.shape[0])
        pick = np.sort(sub_rng.permutation(splits.train_pos.shape[0])[:count])
        self.train_eval_pos = splits.train_pos[pick]
        self.train_eval_cand = self._candidates(self.train_eval_pos, cand_rng)
        self.train_eval_pos_ctx = self.contexts(self.train_eval_pos)
        self.train_eval_cand_ctx = self.contexts(self.train_eval_cand.reshape(-1, 2))

    def _candidates(self, pos: np.ndarray, rng) -> np.ndarray:
        flat = sample_non_edges(pos.shape[0] * 100, self.num_nodes,
                                self.forbidden, rng, unique=False)
        return flat.reshape(pos.shape[0], 100, 2)

    def contexts(self, pairs: np.ndarray) -> dict:
        return build_pair_contexts(pairs, self.table, self.per_endpoint, self.nbrs)


def _lp_rank_metric(model: Model, assign, pos, pos_ctx, cand, cand_ctx):
    pos_scores = _lp_logits_chunked(model, assign, pos, pos_ctx).data
    flat = cand.reshape(-1, 2)
    neg_scores = _lp_logits_chunked(model, assign, flat, cand_ctx).data
    ranks = rank_against_negatives(pos_scores, neg_scores.reshape(cand.shape[:2]))
    return ranks


def train(graph: GraphData, cfg) -> TrainResult:
    """Joint tokenizer + head optimization with validation early stopping."""
    ag.set_default_dtype(np.float32 if cfg.dtype == "f32" else np.float64)
    if graph.splits is None:
        raise ConfigurationError("train: graph has no splits; call make_splits first")
    if cfg.task == "nc" and not isinstance(graph.splits, NodeSplits):
        raise ConfigurationError("nc task requires node splits")
    if cfg.task == "lp" and not isinstance(graph.splits, LinkSplits):
        raise ConfigurationError("lp task requires link splits")
    adj = build_gcn_adjacency(graph)
    x = Tensor(np.asarray(graph.features))
    loss_cfg = LossConfig(alpha=cfg.alpha, beta=cfg.beta, eta=cfg.eta,
                          no_gating=cfg.no_gating, no_diversity=cfg.no_diversity,
                          no_balance=cfg.no_balance)

    model = build_model(cfg, graph.feature_dim,
                        graph.num_classes if cfg.task == "nc" else 0)
    h0 = encode(model.encoder, adj, x)
    model.stack = init_stack(h0.data, cfg.levels, cfg.codewords, seed=cfg.seed,
                             kmeans=cfg.kmeans_init, kmeans_iters=cfg.kmeans_iters)

    all_params = model.parameters()
    trainable = model.parameters(trainable_only=True,
                                 freeze_encoder=cfg.freeze_encoder)
    opt = Adam(trainable, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
               eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    lp_run = _LpRun(graph, adj, cfg) if cfg.task == "lp" else None
    labels = graph.labels

    state = TrainState(seed=cfg.seed, patience_left=cfg.patience)
    gate_log: list = []
    best_snap = _snapshot(all_params)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        model.stack.reset_usage()
        tape = Tape()
        with tape:
            h, qres, fused, assign = _tokenizer_forward(
                model, adj, x, cfg, training=True, epoch=epoch)
            parts = {"commit": commitment_loss(h, assign.codeword_rows, cfg.eta)}
            if not loss_cfg.no_balance and cfg.alpha > 0:
                parts["balance"] = balance_surrogate(qres)
            if not loss_cfg.no_diversity and cfg.beta > 0:
                parts["diversity"] = diversity_loss(model.stack)
            if cfg.task == "nc":
                task = _nc_task_loss(model, assign, labels, graph.splits.train,
                                     cfg, epoch)
            else:
                task = _lp_task_loss(model, assign, lp_run, cfg, epoch)
            tok, included = tokenizer_loss(parts, loss_cfg)
            loss = total_loss(tok, task)
        if not np.isfinite(loss.data):
            raise DivergenceError(
                f"non-finite loss {float(loss.data)} at epoch {epoch}")
        ag.zero_grads(all_params)
        backward(loss)
        opt.step()

        fusion_weights = (model.gate.last_weights if model.gate is not None
                          else np.ones(model.stack.num_levels))
        gate_log.append((epoch, fusion_weights.copy()))

        hard_balance = balance_loss(model.stack).item()
        term_values = {name: t.item() for name, t in included.items()}
        term_values["task"] = task.item()

        train_metric, val_metric = _epoch_metrics(model, adj, x, cfg, graph, lp_run)
        metric_name = "acc" if cfg.task == "nc" else "mrr"
        for split, value in (("train", train_metric), ("val", val_metric)):
            state.history.append({
                "epoch": epoch, "split": split, "metric": metric_name,
                "value": value, "weights": fusion_weights.copy(),
                "l_commit": parts["commit"].item(), "l_bal": hard_balance,
                "l_div": (parts["diversity"].item() if "diversity" in parts else 0.0),
                "l_task": task.item(), "l_total": loss.item(),
                "terms": term_values,
            })

        if cfg.revive and cfg.dead_code_threshold > 0:
            revive_dead_codes(model.stack, h.data, cfg.dead_code_threshold,
                              derive(cfg.seed, "revive", epoch))

        if val_metric > state.best_val:
            state.best_val = val_metric
            state.best_epoch = epoch
            state.patience_left = cfg.patience
            best_snap = _snapshot(all_params)
        else:
            state.patience_left -= 1
            if state.patience_left <= 0:
                break

    _restore(all_params, best_snap)

    # final artifacts from the best parameters, evaluation mode; the stored
    # gate weights are exactly the ones that produced the exported tokens
    model.stack.reset_usage()
    h, qres, fused, assign = _tokenizer_forward(model, adj, x, cfg, training=False)
    model.gate_weights = fused.weights.copy()
    for m in range(model.stack.num_levels):
        model.stack.usage_counts[m] = np.bincount(
            qres.indices[:, m], minlength=model.stack.num_codes)
    test_metrics = _final_metrics(model, assign, cfg, graph, lp_run)
    return TrainResult(model=model, state=state, history=state.history,
                       gate_log=gate_log, test_metrics=test_metrics,
                       tokens=assign, fused_codebook=fused.c.data.copy())


def tokenize_graph(model: Model, graph: GraphData, cfg) -> tuple[TokenAssignment, np.ndarray]:
    """Inference-only pass using the stored gate weights; no mutation."""
    ag.set_default_dtype(np.float32 if cfg.dtype == "f32" else np.float64)
    adj = build_gcn_adjacency(graph)
    x = Tensor(np.asarray(graph.features))
    h = encode(model.encoder, adj, x, training=False)
    qres = quantize(model.stack, h, count_usage=False)
    fused = model.fusion(stored=model.gate_weights is not None)
    assign = assign_tokens(fused, h, straight_through=False,
                           level_indices=qres.indices)
    return assign, fused.c.data.copy()


def evaluate(model: Model, graph: GraphData, cfg) -> dict:
    """Test-split metrics for a trained model on a split graph."""
    ag.set_default_dtype(np.float32 if cfg.dtype == "f32" else np.float64)
    adj = build_gcn_adjacency(graph)
    x = Tensor(np.asarray(graph.features))
    lp_run = _LpRun(graph, adj, cfg) if cfg.task == "lp" else None
    _, _, _, assign = _tokenizer_forward(model, adj, x, cfg, training=False)
    return _final_metrics(model, assign, cfg, graph, lp_run)


def _nc_task_loss(model, assign, labels, train_ids, cfg, epoch):
    rng = derive(cfg.seed, "batches", epoch)
    order = train_ids[rng.permutation(train_ids.size)]
    step = cfg.head_batch if cfg.head_batch > 0 else order.size
    loss = None
    for start in range(0, order.size, step):
        chunk = order[start:start + step]
        logits = nc_forward(model.nc_head, assign, chunk)
        ce = ag.cross_entropy(logits, labels[chunk])
        term = ag.scale(ce, chunk.size / order.size)
        loss = term if loss is None else ag.add(loss, term)
    return loss


def _lp_task_loss(model, assign, lp_run: _LpRun, cfg, epoch):
    pos = lp_run.splits.train_pos
    pos_ctx = lp_run.train_pos_ctx
    if 0 < cfg.lp_epoch_edges < pos.shape[0]:
        pick = derive(cfg.seed, "train-pos", epoch).permutation(
            pos.shape[0])[:cfg.lp_epoch_edges]
        pos = pos[pick]
        pos_ctx = {k: v[pick] for k, v in pos_ctx.items()}
    neg = sample_non_edges(pos.shape[0], lp_run.num_nodes, lp_run.forbidden,
                           derive(cfg.seed, "train-negatives", epoch),
                           unique=False)
    pairs = np.concatenate([pos, neg], axis=0)
    neg_ctx = lp_run.contexts(neg)
    ctx = _concat_ctx(pos_ctx, neg_ctx)
    logits = _lp_logits_chunked(model, assign, pairs, ctx)
    targets = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    return ag.bce_with_logits(logits, targets)


def _concat_ctx(a: dict, b: dict) -> dict:
    width = max(a["ids"].shape[1], b["ids"].shape[1])

    def pad(d):
        w = d["ids"].shape[1]
        if w == width:
            return d
        out = {}
        for k, v in d.items():
            extra = np.zeros((v.shape[0], width - w), dtype=v.dtype)
            out[k] = np.concatenate([v, extra], axis=1)
        return out

    a, b = pad(a), pad(b)
    return {k: np.concatenate([a[k], b[k]], axis=0) for k in a}


def _epoch_metrics(model, adj, x, cfg, graph, lp_run):
    h, qres, fused, assign = _tokenizer_forward(model, adj, x, cfg, training=False)
    if cfg.task == "nc":
        splits: NodeSplits = graph.splits
        train_m = _nc_eval(model, assign, graph.labels, splits.train, cfg.head_batch)
        val_m = _nc_eval(model, assign, graph.labels, splits.val, cfg.head_batch)
    else:
        splits: LinkSplits = lp_run.splits
        val_ranks = _lp_rank_metric(model, assign, splits.val_pos,
                                    lp_run.val_pos_ctx, lp_run.val_cand,
                                    lp_run.val_cand_ctx)
        val_m = metric_mrr(val_ranks)
        train_ranks = _lp_rank_metric(model, assign, lp_run.train_eval_pos,
                                      lp_run.train_eval_pos_ctx,
                                      lp_run.train_eval_cand,
                                      lp_run.train_eval_cand_ctx)
        train_m = metric_mrr(train_ranks)
    return train_m, val_m


def _final_metrics(model, assign, cfg, graph, lp_run) -> dict:
    if cfg.task == "nc":
        splits: NodeSplits = graph.splits
        return {
            "acc": _nc_eval(model, assign, graph.labels, splits.test, cfg.head_batch),
            "val_acc": _nc_eval(model, assign, graph.labels, splits.val, cfg.head_batch),
        }
    splits = lp_run.splits
    test_cand_ctx = lp_run.contexts(lp_run.test_cand.reshape(-1, 2))
    test_pos_ctx = lp_run.contexts(splits.test_pos)
    ranks = _lp_rank_metric(model, assign, splits.test_pos, test_pos_ctx,
                            lp_run.test_cand, test_cand_ctx)
    val_ranks = _lp_rank_metric(model, assign, splits.val_pos,
                                lp_run.val_pos_ctx, lp_run.val_cand,
                                lp_run.val_cand_ctx)
    return {
        "mrr": metric_mrr(ranks),
        "hits@50": metric_hits_at_k(ranks, 50),
        "hits@100": metric_hits_at_k(ranks, 100),
        "val_mrr": metric_mrr(val_ranks),
    }
