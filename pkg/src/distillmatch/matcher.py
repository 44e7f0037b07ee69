"""Coarse-to-fine matching: coarse cell matching on the 1/8 grid with
linear attention and mutual-argmax filtering, fine matching over local
windows with dual softmax, and tanh-bounded subpixel refinement.

Match interchange formats live here too: a line-oriented text format
(``x_a y_a x_b y_b confidence`` per line) and a compact binary variant
(magic b"DMM1", u32 record count, then five little-endian f32 per record
in the same field order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

MATCH_MAGIC = b"DMM1"

# fine grid lives on the 1/2 scale: one fine cell is 2 px
FINE_CELL_PX = 2.0
COARSE_CELL_PX = 8.0
SUBPIXEL_SCALE = FINE_CELL_PX / 2.0  # tanh output scaled to half a fine cell


@dataclass
class MatchThresholds:
    theta_c: float = 0.3
    theta_f: float = 0.1
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class CoarseMatch:
    cell_a: int
    cell_b: int
    confidence: float


@dataclass
class FineMatch:
    pt_a: tuple        # (x, y) pixels
    pt_b: tuple
    p_fine: float
    coarse_index: int


@dataclass
class SubpixelMatch:
    x_a: float
    y_a: float
    x_b: float
    y_b: float
    confidence: float


@dataclass
class MatchResult:
    coarse: list
    fine: list
    subpixel: list
    p0: Tensor | None = None
    p1: Tensor | None = None
    fine_probs: Tensor | None = None     # [M, 25, 25]
    sub_xy_a: Tensor | None = None       # [Mf, 2] differentiable coords
    sub_xy_b: Tensor | None = None
    grid_a: tuple = ()
    grid_b: tuple = ()


def cell_center_px(idx, grid_w, cell=COARSE_CELL_PX):
    r, c = divmod(int(idx), grid_w)
    return ((c + 0.5) * cell, (r + 0.5) * cell)


def mutual_argmax_pairs(scores: np.ndarray):
    """Injective partial matching: (i, j) kept iff j = argmax of row i and
    i = argmax of column j."""
    if scores.size == 0:
        return []
    best_j = scores.argmax(axis=1)
    best_i = scores.argmax(axis=0)
    return [(i, int(j)) for i, j in enumerate(best_j) if best_i[j] == i]


def _l2_normalize(tokens, eps=1e-8):
    norm = T.sqrt(T.add(T.sum_(T.square(tokens), axis=-1, keepdims=True), eps))
    return T.div(tokens, norm)


def match_from_descriptors(tok_a: Tensor, tok_b: Tensor, th: MatchThresholds):
    """Similarity, dual softmax, and mutual-argmax filtering over [N, C]
    descriptor sets; returns (matches, P0, P1, similarity)."""
    sim = T.mul(T.matmul(tok_a, T.swapaxes(tok_b, -1, -2)),
                1.0 / th.temperature)
    p0 = T.softmax(sim, axis=1)
    p1 = T.softmax(sim, axis=0)
    matches = []
    p0d, p1d = p0.data, p1.data
    for i, j in mutual_argmax_pairs(sim.data):
        # min of both directions keeps the match set symmetric under swap
        conf = float(min(p0d[i, j], p1d[i, j]))
        if conf >= th.theta_c:
            matches.append(CoarseMatch(i, j, conf))
    return matches, p0, p1, sim


class CoarseMatcher(nn.Module):
    """Two rounds of linear self/cross attention over both images'
    1/8-grid tokens, a linear projection, temperature-scaled similarity,
    and mutual-argmax filtering with a confidence threshold."""

    def __init__(self, rng, dim, rounds=2):
        self.self_blocks = [nn.TransformerBlock(rng, dim, linear=True)
                            for _ in range(rounds)]
        self.cross_blocks = [nn.TransformerBlock(rng, dim, linear=True)
                             for _ in range(rounds)]
        self.proj = nn.Linear(rng, dim, dim)

    def interact(self, tok_a, tok_b):
        for sblk, cblk in zip(self.self_blocks, self.cross_blocks):
            tok_a = sblk(tok_a)
            tok_b = sblk(tok_b)
            tok_a, tok_b = cblk(tok_a, context=tok_b), cblk(tok_b, context=tok_a)
        # unit-norm descriptors keep the temperature-scaled similarities in
        # a range where the dual softmax cannot saturate at initialization
        return _l2_normalize(self.proj(tok_a)), _l2_normalize(self.proj(tok_b))

    def __call__(self, f8_a, f8_b, th: MatchThresholds):
        """f8_* are [1, C, h, w] maps; returns (matches, P0, P1, similarity)."""
        if f8_a.shape[0] != 1 or f8_b.shape[0] != 1:
            raise T.ShapeError("matching runs per pair (batch size 1)")
        if f8_a.shape[1] != f8_b.shape[1]:
            raise T.ShapeError("feature dims differ between images")
        _, c, ha, wa = f8_a.shape
        _, _, hb, wb = f8_b.shape
        tok_a = T.reshape(T.transpose(f8_a, (0, 2, 3, 1)), (1, ha * wa, c))
        tok_b = T.reshape(T.transpose(f8_b, (0, 2, 3, 1)), (1, hb * wb, c))
        tok_a, tok_b = self.interact(tok_a, tok_b)
        return match_from_descriptors(T.reshape(tok_a, (ha * wa, c)),
                                      T.reshape(tok_b, (hb * wb, c)), th)


def _window_indices(cell_idx, grid_w8, feat_h, feat_w, scale, radius):
    """Flat indices of a (2r+1)^2 window on a finer grid, border-replicated."""
    r, c = divmod(int(cell_idx), grid_w8)
    cy = scale * r + scale // 2
    cx = scale * c + scale // 2
    ys = np.clip(cy + np.arange(-radius, radius + 1), 0, feat_h - 1)
    xs = np.clip(cx + np.arange(-radius, radius + 1), 0, feat_w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return (yy * feat_w + xx).reshape(-1)


class FineMatcher(nn.Module):
    """Window interaction and dual-softmax fine matching plus the
    subpixel-offset head."""

    def __init__(self, rng, c_half, c_quarter, c_coarse, dim=64, heads=4):
        self.pre_half = nn.Conv2d(rng, c_half, c_half, 3)
        self.pre_quarter = nn.Conv2d(rng, c_quarter, c_quarter, 3)
        self.tok_half = nn.Linear(rng, c_half, dim)
        self.tok_quarter = nn.Linear(rng, c_quarter, dim)
        self.tok_coarse = nn.Linear(rng, c_coarse, dim)
        self.self_block = nn.TransformerBlock(rng, dim, heads)
        self.cross_block = nn.TransformerBlock(rng, dim, heads)
        self.dim = dim
        # subpixel head: zero-init output so refinement starts at zero offset
        self.srm_fc1 = nn.Linear(rng, 2 * 25 * dim, 128)
        self.srm_fc2 = nn.Linear(rng, 128, 4, zero_init=True)
        # fixed positions for the 35 window tokens, shared across scales:
        # attention alone is permutation-equivariant, and fine matching is
        # a positional task, so tokens carry where they sit in the window
        pe_half = nn.sincos_position_encoding(5, 5, dim)
        quarter_idx = [0, 2, 4, 10, 12, 14, 20, 22, 24]
        pe35 = np.concatenate([pe_half[12:13], pe_half[quarter_idx], pe_half])
        object.__setattr__(self, "_pe", pe35[None])

    def _windows(self, f_half, f_quarter, f8, cells, grid_w8):
        """Token sequences [M, 35, dim]: [1x1 coarse | 3x3 quarter | 5x5 half]."""
        _, c1, h2, w2 = f_half.shape
        _, c2, h4, w4 = f_quarter.shape
        _, c3, h8, w8 = f8.shape
        m = len(cells)
        half_flat = T.reshape(f_half, (c1, h2 * w2))
        quarter_flat = T.reshape(f_quarter, (c2, h4 * w4))
        coarse_flat = T.reshape(f8, (c3, h8 * w8))

        idx_half = np.concatenate([
            _window_indices(i, grid_w8, h2, w2, 4, 2) for i in cells])
        idx_quarter = np.concatenate([
            _window_indices(i, grid_w8, h4, w4, 2, 1) for i in cells])
        idx_coarse = np.asarray(cells, dtype=np.int64)

        w_half = T.transpose(T.reshape(T.take(half_flat, idx_half, 1),
                                       (c1, m, 25)), (1, 2, 0))
        w_quarter = T.transpose(T.reshape(T.take(quarter_flat, idx_quarter, 1),
                                          (c2, m, 9)), (1, 2, 0))
        w_coarse = T.transpose(T.reshape(T.take(coarse_flat, idx_coarse, 1),
                                         (c3, m, 1)), (1, 2, 0))
        tokens = T.concat([self.tok_coarse(w_coarse),
                           self.tok_quarter(w_quarter),
                           self.tok_half(w_half)], axis=1)
        return T.add(tokens, Tensor(self._pe))

    @staticmethod
    def _half_window_coords(cells, grid_w8, h2, w2):
        """Pixel coordinates of the 5x5 half-scale window positions, [M,25,2]."""
        out = np.zeros((len(cells), 25, 2), dtype=np.float32)
        for mi, cell in enumerate(cells):
            r, c = divmod(int(cell), grid_w8)
            ys = np.clip(4 * r + 2 + np.arange(-2, 3), 0, h2 - 1)
            xs = np.clip(4 * c + 2 + np.arange(-2, 3), 0, w2 - 1)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            out[mi, :, 0] = (xx.reshape(-1) + 0.5) * FINE_CELL_PX
            out[mi, :, 1] = (yy.reshape(-1) + 0.5) * FINE_CELL_PX
        return out

    def interact(self, feats_a, feats_b, cells_a, cells_b):
        """Run window extraction + self/cross attention for matched cells.

        feats_* are (f_half, f_quarter, f8) tuples. Returns the processed
        5x5 window tokens for both images, [M, 25, dim] each.
        """
        f_half_a, f_quarter_a, f8_a = feats_a
        f_half_b, f_quarter_b, f8_b = feats_b
        grid_w8_a = f8_a.shape[3]
        grid_w8_b = f8_b.shape[3]
        f_half_a = self.pre_half(f_half_a)
        f_half_b = self.pre_half(f_half_b)
        f_quarter_a = self.pre_quarter(f_quarter_a)
        f_quarter_b = self.pre_quarter(f_quarter_b)
        tok_a = self._windows(f_half_a, f_quarter_a, f8_a, cells_a, grid_w8_a)
        tok_b = self._windows(f_half_b, f_quarter_b, f8_b, cells_b, grid_w8_b)
        tok_a = self.self_block(tok_a)
        tok_b = self.self_block(tok_b)
        tok_a, tok_b = (self.cross_block(tok_a, context=tok_b),
                        self.cross_block(tok_b, context=tok_a))
        f5_a = T.narrow(tok_a, 1, 10, 25)
        f5_b = T.narrow(tok_b, 1, 10, 25)
        return f5_a, f5_b

    def fine_probs(self, f5_a, f5_b):
        """Dual-softmax probability matrices [M, 25, 25]."""
        sim = T.mul(T.matmul(f5_a, T.swapaxes(f5_b, -1, -2)),
                    1.0 / np.sqrt(self.dim))
        return T.mul(T.softmax(sim, axis=-1), T.softmax(sim, axis=-2))

    def subpixel_offsets(self, f5_a, f5_b):
        """Tanh-bounded offsets, [M, 2] per image, in pixels.

        The window tokens are detached: the refinement loss carries a large
        weight and would otherwise swamp the matching gradient in the
        shared attention trunk, so it trains only this head.
        """
        m = f5_a.shape[0]
        flat = T.concat([T.reshape(f5_a.detach(), (m, 25 * self.dim)),
                         T.reshape(f5_b.detach(), (m, 25 * self.dim))], axis=1)
        raw = T.tanh(self.srm_fc2(T.gelu(self.srm_fc1(flat))))
        delta_a = T.mul(T.narrow(raw, 1, 0, 2), SUBPIXEL_SCALE)
        delta_b = T.mul(T.narrow(raw, 1, 2, 2), SUBPIXEL_SCALE)
        return delta_a, delta_b


def write_matches_text(path, matches):
    with open(path, "w") as fh:
        for m in matches:
            fh.write(f"{m.x_a:.6f} {m.y_a:.6f} {m.x_b:.6f} {m.y_b:.6f} "
                     f"{m.confidence:.6f}\n")


def read_matches_text(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 5:
                raise ValueError(f"{path}: expected 5 fields, got {len(vals)}")
            out.append(SubpixelMatch(*vals))
    return out


def write_matches_binary(path, matches):
    with open(path, "wb") as fh:
        fh.write(MATCH_MAGIC)
        fh.write(struct.pack("<I", len(matches)))
        for m in matches:
            fh.write(struct.pack("<5f", m.x_a, m.y_a, m.x_b, m.y_b,
                                 m.confidence))


def read_matches_binary(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MATCH_MAGIC:
            raise ValueError(f"{path}: bad match-file magic")
        (count,) = struct.unpack("<I", fh.read(4))
        out = []
        for _ in range(count):
            out.append(SubpixelMatch(*struct.unpack("<5f", fh.read(20))))
    return out


def matches_to_array(matches):
    """[N, 5] array of (x_a, y_a, x_b, y_b, confidence)."""
    if not matches:
        return np.zeros((0, 5), dtype=np.float32)
    return np.array([[m.x_a, m.y_a, m.x_b, m.y_b, m.confidence]
                     for m in matches], dtype=np.float32)
