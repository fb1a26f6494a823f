"""Dense float64 tensors (rank <= 3) with reverse-mode automatic differentiation.

Every op computes its result with numpy, checks it is finite, and, when grad
mode is on and an input requires grad, records a closure that maps the
output gradient to input gradients.  ``backward`` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608...


def gelu(x: Tensor) -> Tensor:
    """tanh approximation 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _result(out, (x,), backward, "gelu")


# --- shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, src),), "broadcast_to")


def take_rows(x: Tensor, n: int) -> Tensor:
    """The first ``n`` entries along axis 0."""
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        out[:n] = g
        return (out,)

    return _result(x.data[:n].copy(), (x,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [(...) * heads, n, d / heads]; a rank-2 input is treated as batch 1."""
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    if d % heads:
        raise ValueError(f"feature dim {d} is not divisible by {heads} heads")
    dh = d // heads

    def fwd(a):
        return a.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, n, dh)

    def backward(g):
        return (g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d),)

    return _result(fwd(x.data), (x,), backward, "split_heads")


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """Inverse of ``split_heads``: [b * heads, n, dh] -> [b, n, heads * dh]."""
    bh, n, dh = x.shape
    b = bh // heads

    def backward(g):
        return (g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh),)

    out = x.data.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, heads * dh)
    return _result(out, (x,), backward, "merge_heads")


# --- reductions -----------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


# --- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to x) marks allowed entries; disallowed
    entries get probability exactly 0.  Every row needs one allowed entry.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit (biased) variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n]; entry (i, j) is allowed iff j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes (batched if rank 3)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value row counts differ: {k.shape} vs {v.shape}")
    d = q.shape[-1]
    logits = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    mask = None
    if causal:
        if q.shape[-2] != k.shape[-2]:
            raise ValueError("causal attention needs as many queries as keys")
        mask = causal_mask(q.shape[-2])
    return matmul(softmax_rows(logits, mask), v)


# --- embedding and loss ---------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim > 2:
        raise ValueError("embedding ids must be rank <= 2")
    vocab = table.shape[0]

    def backward(g):
        gt = np.zeros((vocab,) + table.shape[1:])
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is [..., V]; ``labels`` has the leading shape.  Positions where
    ``mask`` is False contribute nothing, to the value or the gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    if labels.shape != ld.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {ld.shape}")
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy over an empty mask")
    m = ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(ld - m).sum(axis=-1, keepdims=True)) + m
    logp = ld - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (float(g) * (p - onehot) * mask[..., None] / count,)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")


# --- autodiff driver ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between autodiff and central finite differences.

    ``x`` is perturbed in place (and restored); ``f`` must return a scalar.
    The error per coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was

    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            g_fd.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(g_ad - g_fd) / np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(err.max()) if err.size else 0.0
