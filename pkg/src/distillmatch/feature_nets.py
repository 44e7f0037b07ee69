"""Three-branch feature extraction: texture pyramid, frozen stand-in
teacher, and the lightweight ViT student.

The teacher is a fixed-seed, frozen instance of the student architecture
at twice the width and depth, with a linear head back down to the student
feature dim. Externally computed semantic features can be supplied as
DMT1 files keyed by image id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from . import tensorio
from .tensor import Tensor


@dataclass
class StudentConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    decoder_depth: int = 2
    use_positions: bool = True


@dataclass
class ModelConfig:
    width_factor: float = 0.25
    semantic_dim: int = 64          # C4 at desk scale
    student: StudentConfig = field(default_factory=StudentConfig)
    teacher_seed: int = 7770
    dinov3_path: bool = False

    @property
    def texture_channels(self):
        # paper-scale widths 128/196/256 scaled by one factor
        return (max(4, int(round(128 * self.width_factor))),
                max(4, int(round(196 * self.width_factor))),
                max(4, int(round(256 * self.width_factor))))


@dataclass
class ImagePair:
    """A visible / pseudo-infrared pair; a is visible, b is infrared."""
    img_a: Tensor
    img_b: Tensor

    def __post_init__(self):
        for img in (self.img_a, self.img_b):
            b, c, h, w = img.shape
            if h < 32 or w < 32 or h % 8 or w % 8:
                raise T.ShapeError("images must be >= 32 px with dims divisible by 8")
            if img.data.min() < 0.0 or img.data.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class TexturePyramid:
    f_half: Tensor      # [B, C1, H/2, W/2]
    f_quarter: Tensor   # [B, C2, H/4, W/4]
    f_eighth: Tensor    # [B, C3, H/8, W/8]


@dataclass
class SemanticFeature:
    f: Tensor           # [B, C4, H/8, W/8]
    source: str         # teacher | student | external-file


class ResidualBlock(nn.Module):
    def __init__(self, rng, ch):
        self.conv1 = nn.Conv2d(rng, ch, ch, 3)
        self.conv2 = nn.Conv2d(rng, ch, ch, 3)

    def __call__(self, x):
        y = self.conv2(T.relu(self.conv1(x)))
        return T.relu(T.add(x, y))


class TextureNet(nn.Module):
    """Multiscale residual extractor: stem (stride 2) then three stages of
    two residual blocks, stride-2 downsampling between stages."""

    def __init__(self, rng, in_ch=3, channels=(32, 49, 64)):
        c1, c2, c3 = channels
        self.stem = nn.Conv2d(rng, in_ch, c1, 3, stride=2)
        self.stage1 = [ResidualBlock(rng, c1) for _ in range(2)]
        self.down1 = nn.Conv2d(rng, c1, c2, 3, stride=2)
        self.stage2 = [ResidualBlock(rng, c2) for _ in range(2)]
        self.down2 = nn.Conv2d(rng, c2, c3, 3, stride=2)
        self.stage3 = [ResidualBlock(rng, c3) for _ in range(2)]

    def __call__(self, img) -> TexturePyramid:
        b, c, h, w = img.shape
        if h % 8 or w % 8:
            raise T.ShapeError("texture_forward requires dims divisible by 8")
        x = self.stem(img)
        for blk in self.stage1:
            x = blk(x)
        f_half = x
        x = self.down1(x)
        for blk in self.stage2:
            x = blk(x)
        f_quarter = x
        x = self.down2(x)
        for blk in self.stage3:
            x = blk(x)
        return TexturePyramid(f_half, f_quarter, x)


def patchify(img, patch):
    """[B,C,H,W] -> [B, N, C*patch*patch] tokens in row-major grid order."""
    b, c, h, w = img.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"dims {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(img, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch * patch)), gh, gw


class StudentViT(nn.Module):
    """Patch embed + fixed 2D sin-cos positions + pre-norm encoder blocks +
    a 2-block decoder, reshaped to a dense [B, C, H/patch, W/patch] map."""

    def __init__(self, rng, cfg: StudentConfig, in_ch=3, out_dim=None):
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Linear(rng, in_ch * cfg.patch_size ** 2, d)
        self.encoder = [nn.TransformerBlock(rng, d, cfg.heads)
                        for _ in range(cfg.depth)]
        self.decoder = [nn.TransformerBlock(rng, d, cfg.heads)
                        for _ in range(cfg.decoder_depth)]
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(rng, d, out_dim) if out_dim else None
        self._pe_cache = {}

    def _positions(self, gh, gw):
        key = (gh, gw)
        if key not in self._pe_cache:
            self._pe_cache[key] = nn.sincos_position_encoding(
                gh, gw, self.cfg.embed_dim)
        return self._pe_cache[key]

    def __call__(self, img) -> Tensor:
        tokens, gh, gw = patchify(img, self.cfg.patch_size)
        x = self.embed(tokens)
        if self.cfg.use_positions:
            x = T.add(x, Tensor(self._positions(gh, gw)))
        for blk in self.encoder:
            x = blk(x)
        for blk in self.decoder:
            x = blk(x)
        x = self.norm(x)
        if self.head is not None:
            x = self.head(x)
        b = img.shape[0]
        d = x.shape[-1]
        return T.transpose(T.reshape(x, (b, gh, gw, d)), (0, 3, 1, 2))


def make_student(cfg: ModelConfig, seed: int):
    rng = np.random.default_rng(seed)
    scfg = cfg.student
    if scfg.embed_dim != cfg.semantic_dim:
        scfg = StudentConfig(**{**vars(scfg), "embed_dim": cfg.semantic_dim})
    return StudentViT(rng, scfg)


def make_teacher(cfg: ModelConfig, patch_size: int | None = None):
    """Frozen stand-in teacher: student architecture, 2x wider and deeper,
    seeded init, linear head down to the student feature dim."""
    rng = np.random.default_rng(cfg.teacher_seed)
    s = cfg.student
    tcfg = StudentConfig(patch_size=patch_size or s.patch_size,
                         embed_dim=2 * cfg.semantic_dim,
                         depth=2 * s.depth, heads=s.heads,
                         decoder_depth=s.decoder_depth)
    net = StudentViT(rng, tcfg, out_dim=cfg.semantic_dim)
    net.freeze()
    return net


class Teacher(nn.Module):
    """Frozen semantic-feature source with an external-file import path."""

    def __init__(self, cfg: ModelConfig, feature_dir=None, patch_size=None):
        self.net = make_teacher(cfg, patch_size)
        self.feature_dir = Path(feature_dir) if feature_dir else None

    def __call__(self, img, image_id=None) -> SemanticFeature:
        if self.feature_dir is not None and image_id is not None:
            path = self.feature_dir / f"{image_id}.dmt"
            if path.exists():
                return SemanticFeature(Tensor(tensorio.read_dmt(path)),
                                       "external-file")
        with T.no_grad():
            return SemanticFeature(self.net(img), "teacher")


def dino_v2_resolution_path(img, teacher: Teacher) -> SemanticFeature:
    """Downsample to 7/8 resolution, run the teacher, and bilinear-resize
    the feature map to exactly (H/8, W/8)."""
    b, c, h, w = img.shape
    down = T.bilinear_resize(img, (7 * h) // 8, (7 * w) // 8)
    feat = teacher(down)
    out = T.bilinear_resize(feat.f, h // 8, w // 8)
    return SemanticFeature(out, feat.source)
