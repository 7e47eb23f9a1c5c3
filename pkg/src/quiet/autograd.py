"""Dense tensor arithmetic with reverse-mode automatic differentiation.

A global recording tape captures operations whose inputs require
gradients; ``backward`` replays it in exact reverse order. Broadcasting
is limited to a leading batch axis (bias rows, scalar factors), which is
all the model expressions need. Arithmetic runs in float64 by default;
on-disk formats are float32.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported tensor dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered operation record; backward traverses it back-to-front."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.entries.append(_Entry(tuple(inputs), output, backward_fn))
        output.tape = self

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.entries)


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _emit(inputs, out_data, backward_fn) -> Tensor:
    tape = active_tape()
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    needs = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(tensors, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dx into .grad of every requires_grad ancestor."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        g = flow.pop(id(entry.output), None)
        leaves.pop(id(entry.output), None)
        if g is None:
            continue
        out = entry.output
        out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(entry.inputs, entry.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                leaves[key] = t
    for key, t in leaves.items():
        g = flow.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting helpers


def _coerce(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy trailing broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# core operation set


def add(a, b) -> Tensor:
    at, bt = _coerce(a), _coerce(b)
    _check_broadcast("add", at, bt)
    out = at + bt

    def bwd(g):
        return (_unbroadcast(g, at.shape), _unbroadcast(g, bt.shape))

    return _emit((a, b), out, bwd)


def sub(a, b) -> Tensor:
    at, bt = _coerce(a), _coerce(b)
    _check_broadcast("sub", at, bt)
    out = at - bt

    def bwd(g):
        return (_unbroadcast(g, at.shape), _unbroadcast(-g, bt.shape))

    return _emit((a, b), out, bwd)


def mul(a, b) -> Tensor:
    at, bt = _coerce(a), _coerce(b)
    _check_broadcast("mul", at, bt)
    out = at * bt

    def bwd(g):
        return (_unbroadcast(g * bt, at.shape), _unbroadcast(g * at, bt.shape))

    return _emit((a, b), out, bwd)


def scale(x, s) -> Tensor:
    """Multiply by a python scalar or a size-1 tensor."""
    xd = _coerce(x)
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError(f"scale: scalar operand has shape {s.shape}")
        sv = s.data.reshape(())
        out = xd * sv

        def bwd(g):
            return (g * sv, np.sum(g * xd).reshape(s.data.shape))

        return _emit((x, s), out, bwd)
    sv = float(s)

    def bwd(g):
        return (g * sv,)

    return _emit((x,), xd * sv, bwd)


def matmul(a, b) -> Tensor:
    ad, bd = _coerce(a), _coerce(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {ad.shape} and {bd.shape}")
    if ad.ndim != bd.ndim or (ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeError(f"matmul: batch dims must match, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _emit((a, b), out, bwd)


def sparse_dense_matmul(sp, x) -> Tensor:
    """CSR (constant) times dense tensor; gradient flows to the dense side."""
    xd = _coerce(x)
    if sp.shape[1] != xd.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: {sp.shape} @ {xd.shape}")
    out = sp @ xd

    def bwd(g):
        return (sp.T @ g,)

    return _emit((x,), out, bwd)


def gather_rows(x, idx) -> Tensor:
    xd = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = xd[idx]

    def bwd(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit((x,), out, bwd)


def concat(parts, axis: int = 0) -> Tensor:
    datas = [_coerce(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(tuple(parts), out, bwd)


def transpose(x, axes=None) -> Tensor:
    xd = _coerce(x)
    out = np.transpose(xd, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit((x,), out, bwd)


def reshape(x, shape) -> Tensor:
    xd = _coerce(x)
    out = xd.reshape(shape)

    def bwd(g):
        return (g.reshape(xd.shape),)

    return _emit((x,), out, bwd)


def relu(x) -> Tensor:
    xd = _coerce(x)
    out = np.maximum(xd, 0.0)
    mask = xd > 0.0

    def bwd(g):
        return (g * mask,)

    return _emit((x,), out, bwd)


def sigmoid(x) -> Tensor:
    xd = _coerce(x)
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit((x,), out, bwd)


def square(x) -> Tensor:
    xd = _coerce(x)

    def bwd(g):
        return (2.0 * g * xd,)

    return _emit((x,), xd * xd, bwd)


def sqrt(x) -> Tensor:
    xd = _coerce(x)
    out = np.sqrt(xd)

    def bwd(g):
        return (g / (2.0 * out + 1e-30),)

    return _emit((x,), out, bwd)


def _reduce_bwd(g, xshape, axis, count):
    if axis is None:
        return np.broadcast_to(g, xshape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), xshape).copy()


def tsum(x, axis=None) -> Tensor:
    xd = _coerce(x)
    out = xd.sum(axis=axis)

    def bwd(g):
        return (_reduce_bwd(g, xd.shape, axis, None),)

    return _emit((x,), out, bwd)


def mean(x, axis=None) -> Tensor:
    xd = _coerce(x)
    out = xd.mean(axis=axis)
    count = xd.size if axis is None else xd.shape[axis]

    def bwd(g):
        return (_reduce_bwd(g, xd.shape, axis, count) / count,)

    return _emit((x,), out, bwd)


def softmax(x, axis: int = -1) -> Tensor:
    xd = _coerce(x)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit((x,), out, bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    xd = _coerce(x)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit((x,), out, bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learnable affine map."""
    xd, gd, bd = _coerce(x), _coerce(gain), _coerce(bias)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gd + bd

    def bwd(g):
        gh = g * gd
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = (gh - m1 - xhat * m2) * inv
        red = tuple(range(xd.ndim - 1))
        return (dx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _emit((x, gain, bias), out, bwd)


def l2_norm_rows(x) -> Tensor:
    xd = _coerce(x)
    sq = (xd * xd).sum(axis=1)
    out = np.sqrt(sq)

    def bwd(g):
        return (xd * (g / (out + 1e-30))[:, None],)

    return _emit((x,), out, bwd)


def cosine_similarity_rows(a, b, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine similarity of two equally shaped matrices."""
    ad, bd = _coerce(a), _coerce(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"cosine_similarity_rows: {ad.shape} vs {bd.shape}")
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    denom = na * nb + eps
    s = (ad * bd).sum(axis=1)
    out = s / denom

    def bwd(g):
        coef = g / denom
        ga = coef[:, None] * (bd - (out * nb / (na + 1e-30))[:, None] * ad)
        gb = coef[:, None] * (ad - (out * na / (nb + 1e-30))[:, None] * bd)
        return (ga, gb)

    return _emit((a, b), out, bwd)


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x if isinstance(x, Tensor) else Tensor(x)
    keep = 1.0 - rate
    xd = _coerce(x)
    mask = (rng.random(xd.shape) < keep).astype(xd.dtype) / keep
    out = xd * mask

    def bwd(g):
        return (g * mask,)

    return _emit((x,), out, bwd)


def stop_gradient(x) -> Tensor:
    """Forward identity; contributes zero gradient to its argument."""
    return Tensor(_coerce(x))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels."""
    ld = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy: logits {ld.shape}, labels {labels.shape}")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = ld.shape[0]
    out = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _emit((logits,), out, bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy, numerically stable in the logits."""
    xd = _coerce(logits)
    y = np.asarray(targets, dtype=xd.dtype)
    if xd.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logits {xd.shape}, targets {y.shape}")
    out = (np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))).mean()
    n = xd.size

    def bwd(g):
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * (s - y) / n,)

    return _emit((logits,), out, bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with L2 weight decay folded into the gradient before the moments."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam step: parameter '{name}' has no gradient")
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def adam_step(opt: Adam) -> None:
    opt.step()


# ---------------------------------------------------------------------------
# checkpoint format: magic "QTCK", u32 count, then per tensor
# (u32 name_len, name bytes, u32 rank, u32 dims..., f32 little-endian payload)

CHECKPOINT_MAGIC = b"QTCK"


def save_checkpoint(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(fh.read(4 * n), dtype="<f4")
            out[name] = payload.reshape(dims).astype(_DEFAULT_DTYPE)
    return out
