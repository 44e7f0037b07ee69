"""End-to-end model assembly: shared texture and student encoders over
both modalities, a frozen teacher for distillation, category-token
guidance, semantic/texture aggregation, and the coarse-to-fine matcher.

All weights are shared between the visible and infrared streams except
the modality tokens and the per-modality transfer blocks inside the
guidance module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cefg as cefg_mod
from . import distill, nn, supervision
from . import matcher as matcher_mod
from . import tensor as T
from .feature_nets import (ImagePair, ModelConfig, Teacher, TextureNet,
                           make_student)
from .matcher import (CoarseMatcher, FineMatcher, FineMatch, MatchResult,
                      MatchThresholds, SubpixelMatch)
from .stfa import STFA, StfaHierarchy
from .supervision import (CoarseLossWeights, GroundTruth, LossWeights,
                          build_fine_gt, build_gt_assignment)
from .tensor import Tensor


@dataclass
class TrainOutput:
    total: Tensor
    parts: dict                      # loss-name -> float
    match: MatchResult
    gt_assignment: supervision.GtAssignment
    modality_correct: int            # out of 2 (one vis, one ir stream)
    skipped_subpixel: int = 0


class DistillMatchModel(nn.Module):
    """The full matching network. The frozen teacher is deliberately not a
    Module attribute so checkpoints and the optimizer only ever see
    trainable weights; it is reconstructed from its seed."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = self.cfg.texture_channels
        self.texture = TextureNet(rng, 3, (c1, c2, c3))
        self.student = make_student(self.cfg, seed + 1)
        self.cefg = cefg_mod.CEFG(rng, c1, c3)
        if self.cfg.dinov3_path:
            self.stfa = StfaHierarchy(rng, self.cfg.semantic_dim, (c1, c2, c3))
        else:
            self.stfa = STFA(rng, self.cfg.semantic_dim, c3)
        self.coarse = CoarseMatcher(rng, c3)
        self.fine = FineMatcher(rng, c1, c2, c3, dim=64)
        object.__setattr__(self, "_teacher", Teacher(self.cfg))

    @property
    def teacher(self) -> Teacher:
        return self._teacher

    # -- feature extraction ---------------------------------------------------

    def extract(self, img, modality):
        """Per-image features: texture pyramid and student semantic map."""
        pyramid = self.texture(img)
        semantic = self.student(img)
        return pyramid, semantic

    def _aggregate(self, semantic, fused_eighth, pyramid):
        """STFA over the guided 1/8 map; returns (f8, f_half, f_quarter)."""
        if self.cfg.dinov3_path:
            b, c, h8, w8 = semantic.shape
            sem_half = T.bilinear_resize(semantic, 4 * h8, 4 * w8)
            class _P:  # pyramid view with the guided 1/8 map swapped in
                f_half = pyramid.f_half
                f_quarter = pyramid.f_quarter
                f_eighth = fused_eighth
            out = self.stfa(sem_half, _P)
            return out.f_stfa_eighth, out.f_stfa_half, out.f_stfa_quarter
        out = self.stfa(semantic, fused_eighth)
        return out.f_stfa_eighth, pyramid.f_half, pyramid.f_quarter

    def forward_features(self, pair: ImagePair):
        """Shared forward up to the matchable feature maps.

        Returns a dict with per-modality pyramids, student/teacher semantic
        maps, guidance outputs, and aggregated (f8, f_half, f_quarter).
        """
        pyr_a, sem_a = self.extract(pair.img_a, "vis")
        pyr_b, sem_b = self.extract(pair.img_b, "ir")
        out_vis, out_ir = self.cefg(pyr_a.f_half, pyr_b.f_half,
                                    pyr_a.f_eighth, pyr_b.f_eighth)
        feats_a = self._aggregate(sem_a, out_vis.fused_eighth, pyr_a)
        feats_b = self._aggregate(sem_b, out_ir.fused_eighth, pyr_b)
        return {"pyr_a": pyr_a, "pyr_b": pyr_b,
                "sem_a": sem_a, "sem_b": sem_b,
                "cefg_vis": out_vis, "cefg_ir": out_ir,
                "feats_a": feats_a, "feats_b": feats_b}

    # -- inference ------------------------------------------------------------

    def match_pair(self, pair: ImagePair,
                   th: MatchThresholds | None = None) -> MatchResult:
        th = th or MatchThresholds()
        feats = self.forward_features(pair)
        f8_a, f_half_a, f_quarter_a = feats["feats_a"]
        f8_b, f_half_b, f_quarter_b = feats["feats_b"]
        matches, p0, p1, _ = self.coarse(f8_a, f8_b, th)
        _, _, ha, wa = f8_a.shape
        _, _, hb, wb = f8_b.shape
        result = MatchResult(matches, [], [], p0, p1,
                             grid_a=(ha, wa), grid_b=(hb, wb))
        if not matches:
            return result
        cells_a = [m.cell_a for m in matches]
        cells_b = [m.cell_b for m in matches]
        f5_a, f5_b = self.fine.interact(
            (f_half_a, f_quarter_a, f8_a), (f_half_b, f_quarter_b, f8_b),
            cells_a, cells_b)
        probs = self.fine.fine_probs(f5_a, f5_b)
        result.fine_probs = probs
        coords_a = FineMatcher._half_window_coords(
            cells_a, wa, f_half_a.shape[2], f_half_a.shape[3])
        coords_b = FineMatcher._half_window_coords(
            cells_b, wb, f_half_b.shape[2], f_half_b.shape[3])
        delta_a, delta_b = self.fine.subpixel_offsets(f5_a, f5_b)
        for mi, cm in enumerate(matches):
            pm = probs.data[mi]
            i, j = np.unravel_index(pm.argmax(), pm.shape)
            if pm[i, j] < th.theta_f:
                continue
            pa = coords_a[mi, i]
            pb = coords_b[mi, j]
            result.fine.append(FineMatch(tuple(pa), tuple(pb),
                                         float(pm[i, j]), mi))
            result.subpixel.append(SubpixelMatch(
                float(pa[0] + delta_a.data[mi, 0]),
                float(pa[1] + delta_a.data[mi, 1]),
                float(pb[0] + delta_b.data[mi, 0]),
                float(pb[1] + delta_b.data[mi, 1]),
                cm.confidence))
        return result

    # -- training forward -----------------------------------------------------

    def forward_train(self, pair: ImagePair, gt: GroundTruth,
                      th: MatchThresholds | None = None,
                      weights: LossWeights | None = None,
                      coarse_weights: CoarseLossWeights | None = None,
                      valid_b: np.ndarray | None = None) -> TrainOutput:
        """Full training pass. Fine and subpixel supervision run on the GT
        coarse cells (teacher forcing) so those heads receive gradient even
        before coarse matching is reliable."""
        th = th or MatchThresholds()
        weights = weights or LossWeights()
        cw = coarse_weights or CoarseLossWeights()
        feats = self.forward_features(pair)
        f8_a, f_half_a, f_quarter_a = feats["feats_a"]
        f8_b, f_half_b, f_quarter_b = feats["feats_b"]

        tea_a = self.teacher(pair.img_a)
        tea_b = self.teacher(pair.img_b)
        l_kd = T.mul(T.add(distill.loss_kd(tea_a, feats["sem_a"]),
                           distill.loss_kd(tea_b, feats["sem_b"])), 0.5)
        l_ce = cefg_mod.loss_ce(feats["cefg_vis"].logits,
                                feats["cefg_ir"].logits)
        modality_correct = (
            int(feats["cefg_vis"].logits.data[0].argmax() == 1)
            + int(feats["cefg_ir"].logits.data[0].argmax() == 0))

        matches, p0, p1, _ = self.coarse(f8_a, f8_b, th)
        _, _, ha, wa = f8_a.shape
        _, _, hb, wb = f8_b.shape
        assignment = build_gt_assignment(gt, (ha, wa), (hb, wb),
                                         valid_b=valid_b)
        l_c = supervision.loss_coarse(p0, p1, assignment, cw)

        result = MatchResult(matches, [], [], p0, p1,
                             grid_a=(ha, wa), grid_b=(hb, wb))
        parts = {"kd": float(l_kd.data), "ce": float(l_ce.data),
                 "coarse": float(l_c.data)}
        skipped = 0
        if assignment.pairs:
            cells_a = [i for i, _ in assignment.pairs]
            cells_b = [j for _, j in assignment.pairs]
            f5_a, f5_b = self.fine.interact(
                (f_half_a, f_quarter_a, f8_a), (f_half_b, f_quarter_b, f8_b),
                cells_a, cells_b)
            probs = self.fine.fine_probs(f5_a, f5_b)
            result.fine_probs = probs
            coords_a = FineMatcher._half_window_coords(
                cells_a, wa, f_half_a.shape[2], f_half_a.shape[3])
            coords_b = FineMatcher._half_window_coords(
                cells_b, wb, f_half_b.shape[2], f_half_b.shape[3])
            fine_gt = build_fine_gt(gt, coords_a, coords_b)
            l_f = supervision.loss_fine(probs, fine_gt, cw)

            delta_a, delta_b = self.fine.subpixel_offsets(f5_a, f5_b)
            l_sub, skipped = self._subpixel_loss(
                gt, fine_gt, coords_a, coords_b, delta_a, delta_b, pair)
        else:
            l_f = supervision.loss_fine(None, np.zeros((0, 25, 25)), cw)
            l_sub = Tensor(0.0)
        parts["fine"] = float(l_f.data)
        parts["subpixel"] = float(l_sub.data)

        total = supervision.total_loss(l_kd, l_ce, l_c, l_f, l_sub, weights)
        parts["total"] = float(total.data)
        return TrainOutput(total, parts, result, assignment,
                           modality_correct, skipped)

    def _subpixel_loss(self, gt, fine_gt, coords_a, coords_b,
                       delta_a, delta_b, pair):
        """Geometric loss on refined point pairs at GT fine positions.

        Works in normalized camera coordinates when an essential matrix is
        available, otherwise in focal-normalized units under the GT
        homography, so one loss weight fits both supervision modes.
        """
        rows = []
        base_a, base_b = [], []
        m = fine_gt.shape[0]
        for mi in range(m):
            flat = fine_gt[mi].reshape(-1)
            if not flat.any():
                continue
            i, j = np.unravel_index(int(flat.argmax()), fine_gt[mi].shape)
            rows.append(mi)
            base_a.append(coords_a[mi, i])
            base_b.append(coords_b[mi, j])
        if not rows:
            return Tensor(0.0), 0
        idx = np.asarray(rows, dtype=np.int64)
        xy_a = T.add(Tensor(np.asarray(base_a, dtype=np.float32)),
                     T.take(delta_a, idx, 0))
        xy_b = T.add(Tensor(np.asarray(base_b, dtype=np.float32)),
                     T.take(delta_b, idx, 0))
        if gt.essential is not None:
            k_mat = gt.intrinsics
            xy_a = _pixels_to_normalized(xy_a, k_mat)
            xy_b = _pixels_to_normalized(xy_b, k_mat)
            return supervision.loss_subpixel(xy_a, xy_b, gt.essential)
        focal = float(pair.img_a.shape[3])
        l_rep = supervision.loss_reprojection(xy_a, xy_b, gt.homography)
        return T.mul(l_rep, 1.0 / focal ** 2), 0


def _pixels_to_normalized(xy: Tensor, k_mat: np.ndarray) -> Tensor:
    center = Tensor(np.array([k_mat[0, 2], k_mat[1, 2]], dtype=np.float32))
    inv_f = Tensor(np.array([1.0 / k_mat[0, 0], 1.0 / k_mat[1, 1]],
                            dtype=np.float32))
    return T.mul(T.sub(xy, center), inv_f)


def image_to_tensor(img: np.ndarray) -> Tensor:
    """[3, H, W] float array in [0,1] -> batched input Tensor."""
    return Tensor(np.asarray(img, dtype=np.float32)[None])


def pair_from_arrays(img_vis: np.ndarray, img_pir: np.ndarray) -> ImagePair:
    return ImagePair(image_to_tensor(img_vis), image_to_tensor(img_pir))
