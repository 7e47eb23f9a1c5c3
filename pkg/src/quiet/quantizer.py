"""Multi-level residual vector quantization with usage tracking.

Each level greedily assigns the running residual to its nearest codeword
and subtracts it. Codebooks are gradient-trained; a soft-assignment
surrogate carries the balance objective since hard usage counts have no
gradient. Rarely used codewords can be re-seeded from high-residual
inputs at epoch boundaries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractError, ShapeError
from .rng import derive

CODEBOOK_MAGIC = b"QTCB"


@dataclass
class CodebookStack:
    """M codebooks of shape [K, d] plus per-epoch usage counters."""

    levels: list[Tensor]
    usage_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        shapes = {tuple(l.shape) for l in self.levels}
        if len(shapes) != 1:
            raise ShapeError(f"codebook levels disagree on shape: {sorted(shapes)}")
        if self.usage_counts is None:
            self.usage_counts = np.zeros((self.num_levels, self.num_codes), dtype=np.int64)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def num_codes(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {f"codebook.level{m}": c for m, c in enumerate(self.levels)}

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0

    def usage_probs(self) -> np.ndarray:
        totals = self.usage_counts.sum(axis=1, keepdims=True)
        if (totals == 0).any():
            raise ContractError("usage_probs: no vectors quantized this epoch")
        return self.usage_counts / totals

    def utilization_entropy(self) -> float:
        """Mean over levels of -sum p log p (nats)."""
        p = self.usage_probs()
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return float(terms.sum(axis=1).mean())


@dataclass
class QuantizationResult:
    indices: np.ndarray                 # [n, M] selected code ids
    residual_norms: np.ndarray          # [n] final residual L2 norms
    quantized_sum: Tensor               # [n, d] sum of selected codewords
    per_level_selected: list[Tensor]    # M tensors [n, d]
    level_distances: list[Tensor]       # M tensors [n, K] squared distances
    level_residual_norms: np.ndarray    # [n, M] residual norm after each level


def _pairwise_sq_dists(x: Tensor, codebook: Tensor) -> Tensor:
    """Squared distances ||x_i - c_k||^2 as a taped [n, K] tensor."""
    xn = ag.reshape(ag.tsum(ag.square(x), axis=1), (x.shape[0], 1))
    cn = ag.tsum(ag.square(codebook), axis=1)
    cross = ag.matmul(x, ag.transpose(codebook))
    return ag.add(ag.sub(xn, ag.scale(cross, 2.0)), cn)


def kmeans_init(h: np.ndarray, k: int, iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    if n < k:
        raise ConfigurationError(f"kmeans: {n} points but {k} clusters requested")
    rng = derive(seed, "kmeans")
    centers = np.empty((k, h.shape[1]), dtype=np.float64)
    centers[0] = h[rng.integers(n)]
    d2 = ((h - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = h[rng.integers(n)]
        else:
            pick = np.searchsorted(np.cumsum(d2 / total), rng.random())
            centers[j] = h[min(pick, n - 1)]
        d2 = np.minimum(d2, ((h - centers[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        assign = _sq_dists_np(h, centers).argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = h[assign == j]
            if members.size:
                new_centers[j] = members.mean(axis=0)
            else:
                far = _sq_dists_np(h, new_centers).min(axis=1).argmax()
                new_centers[j] = h[far]
        if np.allclose(new_centers, centers, rtol=0.0, atol=1e-12):
            centers = new_centers
            break
        centers = new_centers
    return centers


def _sq_dists_np(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def init_stack(h: np.ndarray, num_levels: int, num_codes: int, *, seed: int,
               kmeans: bool = True, kmeans_iters: int = 25) -> CodebookStack:
    """Build M codebooks; level m is fit on the residuals left by level m-1."""
    h = np.asarray(h, dtype=np.float64)
    levels = []
    residual = h.copy()
    for m in range(num_levels):
        if kmeans:
            cb = kmeans_init(residual, num_codes, kmeans_iters, seed + 7919 * m)
        else:
            rng = derive(seed, "codebook", m)
            cb = 0.1 * rng.standard_normal((num_codes, h.shape[1]))
        levels.append(Tensor(cb, requires_grad=True))
        idx = _sq_dists_np(residual, cb).argmin(axis=1)
        residual = residual - cb[idx]
    return CodebookStack(levels=levels)


def quantize(stack: CodebookStack, h: Tensor, *, count_usage: bool = True) -> QuantizationResult:
    """Greedy per-level nearest-codeword assignment; ties to lowest index."""
    if h.shape[1] != stack.dim:
        raise ShapeError(f"quantize: embeddings dim {h.shape[1]} != codebook dim {stack.dim}")
    n = h.shape[0]
    m_levels = stack.num_levels
    residual = h
    indices = np.empty((n, m_levels), dtype=np.int64)
    level_norms = np.empty((n, m_levels), dtype=np.float64)
    selected: list[Tensor] = []
    distances: list[Tensor] = []
    total = None
    for m, codebook in enumerate(stack.levels):
        dist = _pairwise_sq_dists(residual, codebook)
        idx = dist.data.argmin(axis=1)
        indices[:, m] = idx
        if count_usage:
            stack.usage_counts[m] += np.bincount(idx, minlength=stack.num_codes)
        sel = ag.gather_rows(codebook, idx)
        selected.append(sel)
        distances.append(dist)
        total = sel if total is None else ag.add(total, sel)
        residual = ag.sub(residual, sel)
        level_norms[:, m] = np.sqrt((residual.data ** 2).sum(axis=1))
    return QuantizationResult(
        indices=indices,
        residual_norms=level_norms[:, -1].copy(),
        quantized_sum=total,
        per_level_selected=selected,
        level_distances=distances,
        level_residual_norms=level_norms)


def balance_loss(stack: CodebookStack) -> Tensor:
    """Usage-imbalance score from hard counts (reporting path, no gradient)."""
    if stack.usage_counts.sum() == 0:
        raise ContractError("balance_loss: no vectors quantized this epoch")
    p = stack.usage_probs()
    k = stack.num_codes
    return Tensor(((p - 1.0 / k) ** 2).sum())


def balance_surrogate(result: QuantizationResult, temperature: float = 1.0) -> Tensor:
    """Differentiable stand-in: soft-assignment frequencies against uniform.

    Per level, p̃_k is the batch mean of softmax(-d²/T) over codewords; the
    minimizer (uniform usage) matches the hard-count objective.
    """
    k = result.level_distances[0].shape[1]
    total = None
    for dist in result.level_distances:
        soft = ag.softmax(ag.scale(dist, -1.0 / temperature), axis=1)
        p_soft = ag.mean(soft, axis=0)
        term = ag.tsum(ag.square(ag.sub(p_soft, 1.0 / k)))
        total = term if total is None else ag.add(total, term)
    return total


def revive_dead_codes(stack: CodebookStack, h, threshold: int, rng=None) -> int:
    """Re-seed under-used codewords from high-residual inputs.

    A codeword with epoch usage below `threshold` is overwritten with the
    level-input residual of a node drawn from the worst-reconstructed
    decile. Returns the number of reassignments.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    data = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    revived = 0
    residual = data
    # level inputs under the current codebooks, recomputed without the tape
    level_inputs = []
    for codebook in stack.levels:
        level_inputs.append(residual)
        idx = _sq_dists_np(residual, codebook.data).argmin(axis=1)
        residual = residual - codebook.data[idx]
    final_norms = np.sqrt((residual ** 2).sum(axis=1))
    n = data.shape[0]
    pool = np.argsort(-final_norms)[:max(1, n // 10)]
    for m, codebook in enumerate(stack.levels):
        dead = np.flatnonzero(stack.usage_counts[m] < threshold)
        for k in dead:
            pick = pool[rng.integers(pool.size)]
            codebook.data[k] = level_inputs[m][pick]
            revived += 1
    return revived


# ---------------------------------------------------------------------------
# codebook export: magic "QTCB", u32 M, u32 K, u32 d, then f32 [K, d] blocks.
# Training appends the fused codebook as one extra trailing block.


def save_codebooks(path, stack: CodebookStack, fused: np.ndarray = None,
                   usage_sidecar: bool = True) -> None:
    m, k, d = stack.num_levels, stack.num_codes, stack.dim
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<III", m, k, d))
        for level in stack.levels:
            fh.write(np.ascontiguousarray(level.data, dtype="<f4").tobytes())
        if fused is not None:
            fh.write(np.ascontiguousarray(fused, dtype="<f4").tobytes())
    if usage_sidecar:
        totals = stack.usage_counts.sum(axis=1)
        sidecar = {
            "levels": m,
            "codewords": k,
            "usage_counts": stack.usage_counts.tolist(),
            "active_codewords": (stack.usage_counts > 0).sum(axis=1).tolist(),
            "utilization_entropy_nats": (
                stack.utilization_entropy() if totals.min() > 0 else None),
        }
        with open(str(path) + ".usage.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2)


def load_codebooks(path) -> tuple[CodebookStack, np.ndarray | None]:
    """Read a QTCB file; returns (stack, fused-or-None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CODEBOOK_MAGIC:
            raise ShapeError(f"{path}: not a codebook file")
        m, k, d = struct.unpack("<III", fh.read(12))
        blocks = []
        while True:
            raw = fh.read(4 * k * d)
            if not raw:
                break
            if len(raw) != 4 * k * d:
                raise ShapeError(f"{path}: truncated codebook block")
            blocks.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(k, d))
    if len(blocks) < m:
        raise ShapeError(f"{path}: expected {m} levels, found {len(blocks)} blocks")
    stack = CodebookStack(levels=[Tensor(b, requires_grad=True) for b in blocks[:m]])
    fused = blocks[m] if len(blocks) > m else None
    return stack, fused
