"""Parameters, transformer building blocks, Adam, and the checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from trajcap.tensor import (
    Tensor, add, attention, gelu, layer_norm, matmul, merge_heads, split_heads,
)

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor.  ``frozen`` parameters still carry gradients
    but the optimizer leaves them untouched."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Module:
    """Attribute-walking container, in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def normal_param(rng: np.random.Generator, *shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    """``x @ W + b``; W ~ normal(0, 1/sqrt(d_in)) so activations keep unit scale at d = 64."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.weight = (Parameter(np.zeros((d_in, d_out))) if zero
                       else normal_param(rng, d_in, d_out, std=d_in ** -0.5))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention; ``memory`` defaults to ``x`` (self-attention)."""

    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ValueError(f"d={d} must be divisible by heads={heads}")
        self.heads = heads
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        memory = x if memory is None else memory
        h = self.heads
        q = split_heads(self.wq(x), h)
        k = split_heads(self.wk(memory), h)
        v = split_heads(self.wv(memory), h)
        out = merge_heads(attention(q, k, v, causal=causal), h)
        if x.ndim == 2:
            out = out.reshape(out.shape[1:])
        return self.wo(out)


class SelfAttentionBlock(Module):
    """Pre-LN: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d)

    def __call__(self, x, causal: bool = False):
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(Module):
    """Pre-LN cross-attention: queries from ``x``, keys/values from ``memory``."""

    def __init__(self, rng, d: int, heads: int, mlp_ratio: int = 4):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d)

    def __call__(self, x, memory):
        x = x + self.attn(self.ln_q(x), self.ln_kv(memory))
        return x + self.mlp(self.ln2(x))


class Adam:
    """Adam with bias correction; frozen parameters are skipped entirely."""

    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.frozen:
                continue
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoint -------------------------------------------------------------------
# layout (little-endian):
#   magic b"T2CK", u32 version, u32 count
#   per record: u32 name_len, name utf-8, u32 rank, rank * u32 dims, f64 payload

CKPT_MAGIC = b"T2CK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            state[name] = arr.astype(np.float64)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return state
