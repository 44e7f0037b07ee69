"""Small neural-net layer toolkit on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Truncated normal init at +/- 2 std, resampled."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return vals.astype(np.float32)


def kaiming_fanin(rng, shape):
    """Kaiming fan-in init for conv/linear weights."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(np.float32)


class Module:
    """Base with recursive named-parameter discovery.

    Parameters are Tensor attributes with requires_grad=True; submodules
    are Module attributes or plain lists of Modules. Attribute insertion
    order gives a deterministic parameter ordering.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue  # private attrs (caches, frozen helpers) are not state
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def load_state(self, state: dict, prefix=""):
        params = self.named_parameters(prefix)
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"checkpoint missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def state(self):
        return {k: v.data for k, v in self.named_parameters().items()}


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, bias=True, std=0.02, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        else:
            w = trunc_normal(rng, (in_dim, out_dim), std)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, k, stride=1, padding=None, bias=True,
                 zero_init=False, identity_init=False):
        if padding is None:
            padding = k // 2
        self.stride = stride
        self.padding = padding
        if identity_init:
            w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
            for o in range(min(out_ch, in_ch)):
                w[o, o, k // 2, k // 2] = 1.0
        elif zero_init:
            w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
        else:
            w = kaiming_fanin(rng, (out_ch, in_ch, k, k))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class Mlp(Module):
    def __init__(self, rng, dim, hidden, out_dim=None):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim or dim)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x, heads):
    # [B, N, H*D] -> [B, H, N, D]
    b, n, hd = x.shape
    d = hd // heads
    return T.transpose(T.reshape(x, (b, n, heads, d)), (0, 2, 1, 3))


def merge_heads(x):
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


class MultiHeadAttention(Module):
    """Full softmax attention over token sequences [B, N, C]."""

    def __init__(self, rng, dim, heads=4, linear=False):
        self.heads = heads
        self.linear = linear
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def __call__(self, x, context=None):
        ctx = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(ctx), self.heads)
        v = split_heads(self.v(ctx), self.heads)
        if self.linear:
            y = T.linear_attention(q, k, v)
        else:
            y = T.attention(q, k, v)
        return self.out(merge_heads(y))


class TransformerBlock(Module):
    """Pre-norm self-attention + MLP block; optional cross-attention."""

    def __init__(self, rng, dim, heads=4, mlp_ratio=2, linear=False):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, linear=linear)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, dim * mlp_ratio)

    def __call__(self, x, context=None):
        ctx = None if context is None else self.norm1(context)
        x = T.add(x, self.attn(self.norm1(x), ctx))
        x = T.add(x, self.mlp(self.norm2(x)))
        return x


def sincos_position_encoding(grid_h, grid_w, dim):
    """Fixed 2D sin-cos positions, [grid_h*grid_w, dim].

    First half encodes the x coordinate, second half the y coordinate;
    within each half sin comes before cos, so channel 0 at (0,0) is sin(0)=0.
    """
    if dim % 4 != 0:
        raise ValueError("position dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    xs = xs.reshape(-1, 1) * omega
    ys = ys.reshape(-1, 1) * omega
    pe = np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=1)
    return pe.astype(np.float32)
