"""Category-Enhanced Feature Guidance: a learned modality token is
refined alongside shallow texture tokens, classified, cross-injected
into the other modality's deep features, and fused back into the 1/8
texture map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

# Eq-5 label convention: visible -> one-hot [0,1], infrared -> [1,0]
VIS_TARGET = np.array([0.0, 1.0], dtype=np.float32)
IR_TARGET = np.array([1.0, 0.0], dtype=np.float32)


@dataclass
class CefgOutput:
    deep: Tensor           # [B, N, C3]
    enhanced: Tensor       # [B, N, C3]
    fused_eighth: Tensor   # [B, C3, H/8, W/8]
    logits: Tensor         # [B, 2]
    refined_token: Tensor  # [B, 1, C3]


class RestormerBlock(nn.Module):
    """Depthwise conv + transposed (channel) attention + gated feed-forward,
    all with residual connections, on [B, C, H, W] maps."""

    def __init__(self, rng, ch):
        self.dw = nn.Conv2d(rng, ch, ch, 3)
        self.q = nn.Conv2d(rng, ch, ch, 1, padding=0, bias=False)
        self.k = nn.Conv2d(rng, ch, ch, 1, padding=0, bias=False)
        self.v = nn.Conv2d(rng, ch, ch, 1, padding=0, bias=False)
        self.proj = nn.Conv2d(rng, ch, ch, 1, padding=0)
        self.ff_in = nn.Conv2d(rng, ch, 2 * ch, 1, padding=0)
        self.ff_out = nn.Conv2d(rng, ch, ch, 1, padding=0)

    def __call__(self, x):
        b, c, h, w = x.shape
        y = self.dw(x)

        def flat(t):
            return T.reshape(t, (b, c, h * w))

        q, k, v = flat(self.q(y)), flat(self.k(y)), flat(self.v(y))
        scale = 1.0 / np.sqrt(h * w)
        attn = T.softmax(T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale), axis=-1)
        agg = T.reshape(T.matmul(attn, v), (b, c, h, w))
        x = T.add(x, self.proj(agg))
        gate = self.ff_in(x)
        g1 = T.narrow(gate, 1, 0, c)
        g2 = T.narrow(gate, 1, c, c)
        x = T.add(x, self.ff_out(T.mul(T.gelu(g1), g2)))
        return x


class CEFG(nn.Module):
    def __init__(self, rng, c_half, c3):
        self.restormer = RestormerBlock(rng, c_half)
        # stride-4 patch merge: H/2 map -> tokens on the 1/8 grid
        self.merge = nn.Conv2d(rng, c_half, c3, 4, stride=4, padding=0)
        self.token_vis = Tensor(nn.trunc_normal(rng, (1, 1, c3)), requires_grad=True)
        self.token_ir = Tensor(nn.trunc_normal(rng, (1, 1, c3)), requires_grad=True)
        self.encoder = [nn.TransformerBlock(rng, c3) for _ in range(2)]
        self.cls_fc1 = nn.Linear(rng, c3, c3)
        self.cls_fc2 = nn.Linear(rng, c3, 2)
        self.transfer_a = nn.TransformerBlock(rng, c3)
        self.transfer_b = nn.TransformerBlock(rng, c3)
        self.fuse1 = nn.Conv2d(rng, c3, c3, 3)
        # zero-init output conv: fusion starts as the pure texture path
        self.fuse2 = nn.Conv2d(rng, c3, c3, 3, zero_init=True)

    def encode(self, f_half, modality: str):
        """Restormer + patch-merge + class-token transformer encoder.

        Returns (shallow tokens, refined token, deep tokens).
        """
        token = self.token_vis if modality == "vis" else self.token_ir
        b = f_half.shape[0]
        x = self.restormer(f_half)
        x = self.merge(x)
        _, c3, gh, gw = x.shape
        shallow = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, gh * gw, c3))
        tok = T.broadcast_to(token, (b, 1, c3))
        seq = T.concat([shallow, tok], axis=1)
        for blk in self.encoder:
            seq = blk(seq)
        deep = T.narrow(seq, 1, 0, gh * gw)
        refined = T.narrow(seq, 1, gh * gw, 1)
        return shallow, refined, deep

    def classify(self, refined_token):
        """2-layer MLP on the refined token -> [B, 2] logits."""
        x = T.reshape(refined_token, (refined_token.shape[0], refined_token.shape[2]))
        return self.cls_fc2(T.gelu(self.cls_fc1(x)))

    def cross_inject(self, deep_vis, token_ir, deep_ir, token_vis):
        """Inject each modality's refined token into the other modality's
        deep tokens, then run the non-shared Transfer blocks."""
        enh_vis = self.transfer_a(T.add(deep_vis, token_ir))
        enh_ir = self.transfer_b(T.add(deep_ir, token_vis))
        return enh_vis, enh_ir

    def fuse_texture(self, enhanced, f_eighth):
        """Element-wise sum with the 1/8 texture map, then two 3x3 convs
        with a residual connection."""
        b, c3, h8, w8 = f_eighth.shape
        if enhanced.shape[1] != h8 * w8 or enhanced.shape[2] != c3:
            raise T.ShapeError("enhanced tokens do not match the 1/8 grid")
        grid = T.transpose(T.reshape(enhanced, (b, h8, w8, c3)), (0, 3, 1, 2))
        x = T.add(grid, f_eighth)
        y = self.fuse2(T.relu(self.fuse1(x)))
        return T.add(x, y)

    def __call__(self, f_half_vis, f_half_ir, f8_vis, f8_ir):
        _, ref_vis, deep_vis = self.encode(f_half_vis, "vis")
        _, ref_ir, deep_ir = self.encode(f_half_ir, "ir")
        logits_vis = self.classify(ref_vis)
        logits_ir = self.classify(ref_ir)
        enh_vis, enh_ir = self.cross_inject(deep_vis, ref_ir, deep_ir, ref_vis)
        out_vis = CefgOutput(deep_vis, enh_vis,
                             self.fuse_texture(enh_vis, f8_vis),
                             logits_vis, ref_vis)
        out_ir = CefgOutput(deep_ir, enh_ir,
                            self.fuse_texture(enh_ir, f8_ir),
                            logits_ir, ref_ir)
        return out_vis, out_ir


def cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy of [B, K] logits against a fixed one-hot target."""
    logp = T.log_softmax(logits, axis=-1)
    tgt = Tensor(np.broadcast_to(np.asarray(target, dtype=np.float32),
                                 logits.shape).copy())
    return T.mean(T.mul(T.sum_(T.mul(logp, tgt), axis=-1), -1.0))


def loss_ce(logits_vis, logits_ir) -> Tensor:
    """Eq-5 style modality classification loss for both streams."""
    return T.add(cross_entropy(logits_vis, VIS_TARGET),
                 cross_entropy(logits_ir, IR_TARGET))
