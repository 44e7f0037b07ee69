"""Synthetic multimodal pair generation: procedural textures, homography
or plane-induced-pose warping with validity masks, a deterministic
pseudo-infrared transform, and HSV jitter augmentation.

Dataset directory layout (written by ``save_dataset``):
    pair_<idx>/vis.tensor   DMT1 [3, H, W] visible image
    pair_<idx>/pir.tensor   DMT1 [3, H, W] pseudo-infrared image
    pair_<idx>/gt.json      homography (row-major), optional essential,
                            intrinsics, rotation, translation, seed
    manifest.json           pair list + config hash

Conventions: the homography maps visible-image pixels to pseudo-IR
pixels; the essential matrix satisfies x_pir^T E x_vis = 0 in normalized
coordinates with intrinsics K (focal = image width, principal point at
the image center).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from . import geometry, tensorio
from .supervision import GroundTruth

TEXTURE_KINDS = ("checker", "noise", "blobs")


@dataclass
class SynthPair:
    img_vis: np.ndarray     # [3, H, W] in [0,1]
    img_pir: np.ndarray     # [3, H, W] in [0,1]
    gt: GroundTruth
    seed: int
    valid_mask: np.ndarray = None  # [H, W] bool, pseudo-IR validity
    rotation: np.ndarray = None
    translation: np.ndarray = None


def gen_texture(kind, dims, seed) -> np.ndarray:
    """Procedural RGB texture [3, H, W] in [0,1], deterministic per seed."""
    h, w = dims
    if h % 8 or w % 8:
        raise ValueError("texture dims must be divisible by 8")
    rng = np.random.default_rng(seed)
    if kind == "checker":
        cell = 8
        colors = rng.uniform(0.05, 0.95, size=(h // cell, w // cell, 3))
        img = np.repeat(np.repeat(colors, cell, axis=0), cell, axis=1)
        # low-frequency shading so cells are distinguishable beyond parity
        yy, xx = np.mgrid[0:h, 0:w]
        shade = 0.15 * np.sin(2 * np.pi * xx / w) * np.cos(2 * np.pi * yy / h)
        img = np.clip(img + shade[:, :, None], 0.0, 1.0)
    elif kind == "noise":
        img = np.zeros((h, w, 3))
        for octave, scale in enumerate((8, 16, 32)):
            gh, gw = max(2, h // scale), max(2, w // scale)
            coarse = rng.uniform(0, 1, size=(gh, gw, 3))
            ys = np.linspace(0, gh - 1, h)
            xs = np.linspace(0, gw - 1, w)
            y0 = np.floor(ys).astype(int)
            x0 = np.floor(xs).astype(int)
            y1 = np.minimum(y0 + 1, gh - 1)
            x1 = np.minimum(x0 + 1, gw - 1)
            fy = (ys - y0)[:, None, None]
            fx = (xs - x0)[None, :, None]
            top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
            bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
            img += (top * (1 - fy) + bot * fy) / (2 ** octave)
        img /= img.max()
    elif kind == "blobs":
        yy, xx = np.mgrid[0:h, 0:w]
        img = np.full((h, w, 3), 0.2)
        for _ in range(24):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(3, max(6, h / 6))
            color = rng.uniform(0.1, 1.0, size=3)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img += g[:, :, None] * color[None, None, :] * 0.5
        img = np.clip(img / img.max(), 0.0, 1.0)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def warp(img: np.ndarray, h_mat: np.ndarray):
    """Inverse-warp [C, H, W] by a homography with bilinear sampling.

    Out-of-bounds samples are zero-filled; returns (warped, valid_mask).
    """
    if abs(np.linalg.det(h_mat)) < 1e-12:
        raise ValueError("non-invertible homography")
    c, h, w = img.shape
    h_inv = np.linalg.inv(h_mat)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    src = geometry.apply_homography(h_inv, pts)
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(int)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    out = np.zeros_like(img)
    for ch in range(c):
        plane = img[ch]
        val = (plane[y0, x0] * (1 - fx) * (1 - fy)
               + plane[y0, x1] * fx * (1 - fy)
               + plane[y1, x0] * (1 - fx) * fy
               + plane[y1, x1] * fx * fy)
        out[ch] = np.where(valid, val, 0.0)
    return out.astype(np.float32), valid


def pseudo_ir(img: np.ndarray) -> np.ndarray:
    """Deterministic visible -> pseudo-infrared transform.

    Luminance, tone inversion (1-L)^1.5, Gaussian blur (sigma 1), then a
    per-image affine renormalization to [0,1]. Geometry is preserved while
    intensity statistics shift strongly.
    """
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    tone = np.power(np.clip(1.0 - lum, 0.0, 1.0), 1.5)
    blurred = gaussian_filter(tone, sigma=1.0)
    lo, hi = blurred.min(), blurred.max()
    if hi - lo > 1e-8:
        blurred = (blurred - lo) / (hi - lo)
    out = np.repeat(blurred[None, :, :], 3, axis=0)
    return np.ascontiguousarray(out, dtype=np.float32)


@dataclass
class JitterRanges:
    hue: float = 0.1          # additive, wraps
    saturation: float = 0.2   # multiplicative half-range
    value: float = 0.2


def hsv_jitter(img: np.ndarray, seed, ranges: JitterRanges | None = None):
    """Randomized hue/saturation/value adjustment of a [3, H, W] image."""
    ranges = ranges or JitterRanges()
    rng = np.random.default_rng(seed)
    hsv = rgb_to_hsv(np.clip(img.transpose(1, 2, 0), 0.0, 1.0))
    hsv[:, :, 0] = (hsv[:, :, 0] + rng.uniform(-ranges.hue, ranges.hue)) % 1.0
    hsv[:, :, 1] = np.clip(
        hsv[:, :, 1] * rng.uniform(1 - ranges.saturation, 1 + ranges.saturation),
        0.0, 1.0)
    hsv[:, :, 2] = np.clip(
        hsv[:, :, 2] * rng.uniform(1 - ranges.value, 1 + ranges.value),
        0.0, 1.0)
    return np.ascontiguousarray(hsv_to_rgb(hsv).transpose(2, 0, 1),
                                dtype=np.float32)


def default_intrinsics(dims) -> np.ndarray:
    h, w = dims
    return np.array([[w, 0.0, (w - 1) / 2.0],
                     [0.0, w, (h - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def sample_pose(dims, seed, max_angle_deg=6.0, plane_depth=2.0):
    """Small relative pose viewing a fronto-parallel plane; returns
    (H_pixels, E, K, R, t) with x_b^T E x_a = 0 in normalized coords."""
    rng = np.random.default_rng(seed)
    k_mat = default_intrinsics(dims)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(1.0, max_angle_deg))
    r_mat = _axis_angle(axis, angle)
    t = rng.uniform(-0.12, 0.12, size=3) * plane_depth
    t[2] = rng.uniform(-0.05, 0.05) * plane_depth
    if np.linalg.norm(t) < 1e-3:
        t = np.array([0.1, 0.0, 0.0]) * plane_depth
    n = np.array([0.0, 0.0, 1.0])
    h_norm = r_mat + np.outer(t, n) / plane_depth
    h_pix = k_mat @ h_norm @ np.linalg.inv(k_mat)
    e_mat = skew(t) @ r_mat
    e_mat /= np.linalg.norm(e_mat)
    return geometry.normalize_homography(h_pix), e_mat, k_mat, r_mat, t


def _axis_angle(axis, angle):
    k_mat = skew(axis)
    return np.eye(3) + np.sin(angle) * k_mat + (1 - np.cos(angle)) * (k_mat @ k_mat)


def make_pair(dims, seed, kind="noise", mode="homography",
              jitter: JitterRanges | None = None) -> SynthPair:
    """One deterministic synthetic pair: texture -> HSV jitter -> warp ->
    pseudo-IR, with GT recorded."""
    ss = np.random.SeedSequence([int(seed), 0x51DE])
    s_tex, s_jit, s_h = [int(s) for s in ss.generate_state(3)]
    tex = gen_texture(kind, dims, s_tex)
    vis = hsv_jitter(tex, s_jit, jitter)
    if mode == "pose":
        h_mat, e_mat, k_mat, r_mat, t = sample_pose(dims, s_h)
        gt = GroundTruth(homography=h_mat, essential=e_mat, intrinsics=k_mat)
    elif mode == "homography":
        h_mat = geometry.sample_homography(dims, s_h)
        gt = GroundTruth(homography=h_mat)
        r_mat = t = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    warped, valid = warp(vis, h_mat)
    pir = pseudo_ir(warped)
    return SynthPair(vis, pir, gt, int(seed), valid, r_mat, t)


def make_batch(n, dims, seed, kinds=TEXTURE_KINDS, mode="homography",
               jitter: JitterRanges | None = None):
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        pairs.append(make_pair(dims, seed + i, kind, mode, jitter))
    return pairs


# -- dataset directory io -----------------------------------------------------

def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_dataset(directory, pairs, config: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, pair in enumerate(pairs):
        pdir = directory / f"pair_{i:04d}"
        pdir.mkdir(exist_ok=True)
        tensorio.write_dmt(pdir / "vis.tensor", pair.img_vis)
        tensorio.write_dmt(pdir / "pir.tensor", pair.img_pir)
        gt = {"homography": np.asarray(pair.gt.homography).reshape(-1).tolist(),
              "seed": pair.seed}
        if pair.gt.essential is not None:
            gt["essential"] = np.asarray(pair.gt.essential).reshape(-1).tolist()
            gt["intrinsics"] = np.asarray(pair.gt.intrinsics).reshape(-1).tolist()
        if pair.rotation is not None:
            gt["rotation"] = np.asarray(pair.rotation).reshape(-1).tolist()
            gt["translation"] = np.asarray(pair.translation).reshape(-1).tolist()
        with open(pdir / "gt.json", "w") as fh:
            json.dump(gt, fh, indent=1, sort_keys=True)
        names.append(pdir.name)
    manifest = {"pairs": names, "config": config,
                "config_hash": _config_hash(config)}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    pairs = []
    for name in manifest["pairs"]:
        pdir = directory / name
        vis = tensorio.read_dmt(pdir / "vis.tensor")
        pir = tensorio.read_dmt(pdir / "pir.tensor")
        with open(pdir / "gt.json") as fh:
            raw = json.load(fh)
        gt = GroundTruth(homography=np.array(raw["homography"]).reshape(3, 3))
        rot = trans = None
        if "essential" in raw:
            gt.essential = np.array(raw["essential"]).reshape(3, 3)
            gt.intrinsics = np.array(raw["intrinsics"]).reshape(3, 3)
        if "rotation" in raw:
            rot = np.array(raw["rotation"]).reshape(3, 3)
            trans = np.array(raw["translation"])
        pairs.append(SynthPair(vis, pir, gt, raw["seed"], None, rot, trans))
    return pairs, manifest
