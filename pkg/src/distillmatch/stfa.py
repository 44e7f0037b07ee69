"""Semantic and Texture Feature Aggregation.

CAA aligns the semantic map to the texture map and cross-attends along
the channel axis (semantic queries, texture keys/values); SAA projects
with 1x1 convs and attends along the spatial axis, with a zero-initialized
output projection so the residual starts as the pure texture path. A
hierarchical variant serves the high-resolution semantic path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class ConfigurationError(RuntimeError):
    pass


@dataclass
class StfaOutput:
    f_stfa_eighth: Tensor
    f_stfa_half: Tensor | None = None
    f_stfa_quarter: Tensor | None = None


def _to_tokens(grid):
    b, c, h, w = grid.shape
    return T.reshape(T.transpose(grid, (0, 2, 3, 1)), (b, h * w, c))


def _to_grid(tokens, h, w):
    b, n, c = tokens.shape
    return T.transpose(T.reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))


class STFA(nn.Module):
    def __init__(self, rng, c_semantic, c_texture):
        c = c_texture
        self.compress = nn.Conv2d(rng, c_semantic, c, 1, padding=0, bias=False)
        self.mlp_s = nn.Mlp(rng, c, 2 * c)
        self.mlp_t = nn.Mlp(rng, c, 2 * c)
        self.ln_s = nn.LayerNorm(c)
        self.ln_t = nn.LayerNorm(c)
        self.proj_q = nn.Conv2d(rng, c, c, 1, padding=0)
        self.proj_k = nn.Conv2d(rng, c, c, 1, padding=0)
        self.proj_v = nn.Conv2d(rng, c, c, 1, padding=0)
        # zero init: f_stfa == texture input until training moves it
        self.proj_out = nn.Linear(rng, c, c, zero_init=True)

    def caa(self, f_semantic, f_texture, return_attn=False):
        """Channel cross-attention; returns [B, N, C] aggregated texture."""
        b, c, h, w = f_texture.shape
        fs = f_semantic.f if hasattr(f_semantic, "f") else f_semantic
        fs = T.bilinear_resize(fs, h, w)
        fs = self.compress(fs)
        s_tokens = self.ln_s(self.mlp_s(_to_tokens(fs)))
        t_tokens = self.ln_t(self.mlp_t(_to_tokens(f_texture)))
        # channels as attention tokens, spatial extent as their features
        q = T.swapaxes(s_tokens, -1, -2)
        k = T.swapaxes(t_tokens, -1, -2)
        scale = 1.0 / np.sqrt(h * w)
        attn = T.softmax(T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale), axis=-1)
        out = T.swapaxes(T.matmul(attn, k), -1, -2)
        if return_attn:
            return out, attn
        return out

    def saa(self, f_caa, f_texture) -> StfaOutput:
        """Spatial cross-attention with residual back onto the texture map."""
        b, c, h, w = f_texture.shape
        caa_grid = _to_grid(f_caa, h, w)
        q = _to_tokens(self.proj_q(f_texture))
        k = _to_tokens(self.proj_k(caa_grid))
        v = _to_tokens(self.proj_v(caa_grid))
        agg = T.attention(q, k, v)
        out = T.add(f_texture, _to_grid(self.proj_out(agg), h, w))
        return StfaOutput(out)

    def __call__(self, f_semantic, f_texture) -> StfaOutput:
        return self.saa(self.caa(f_semantic, f_texture), f_texture)


class GatedCrossScale(nn.Module):
    """Single-head cross-attention from texture tokens to semantic tokens
    with a learnable scalar gate on the residual (gate starts at zero)."""

    def __init__(self, rng, c_semantic, c_texture):
        self.compress = nn.Conv2d(rng, c_semantic, c_texture, 1, padding=0,
                                  bias=False)
        self.q = nn.Linear(rng, c_texture, c_texture)
        self.k = nn.Linear(rng, c_texture, c_texture)
        self.v = nn.Linear(rng, c_texture, c_texture)
        self.gate = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)

    def __call__(self, f_semantic, f_texture):
        b, c, h, w = f_texture.shape
        fs = T.bilinear_resize(f_semantic, h, w)
        fs = self.compress(fs)
        q = self.q(_to_tokens(f_texture))
        k = self.k(_to_tokens(fs))
        v = self.v(_to_tokens(fs))
        agg = T.attention(q, k, v)
        return T.add(f_texture, _to_grid(T.mul(agg, self.gate), h, w))


class StfaHierarchy(nn.Module):
    """High-resolution semantic path: strided-conv downsampling of the H/2
    semantic map, CAA+SAA at 1/8, gated cross-attention at 1/2 and 1/4."""

    def __init__(self, rng, c_semantic, channels):
        c1, c2, c3 = channels
        self.down_quarter = nn.Conv2d(rng, c_semantic, c_semantic, 3, stride=2)
        self.down_eighth = nn.Conv2d(rng, c_semantic, c_semantic, 3, stride=2)
        self.stfa = STFA(rng, c_semantic, c3)
        self.scale_half = GatedCrossScale(rng, c_semantic, c1)
        self.scale_quarter = GatedCrossScale(rng, c_semantic, c2)

    def __call__(self, f_semantic_half, pyramid) -> StfaOutput:
        fs_half = f_semantic_half.f if hasattr(f_semantic_half, "f") else f_semantic_half
        fs_quarter = self.down_quarter(fs_half)
        fs_eighth = self.down_eighth(fs_quarter)
        base = self.stfa(fs_eighth, pyramid.f_eighth)
        out_half = self.scale_half(fs_half, pyramid.f_half)
        out_quarter = self.scale_quarter(fs_quarter, pyramid.f_quarter)
        return StfaOutput(base.f_stfa_eighth, out_half, out_quarter)
