"""Matching supervision: ground-truth assignment construction from a
homography or essential matrix, focal coarse/fine losses, the symmetric
epipolar subpixel loss, and the total training objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class CoarseLossWeights:
    alpha_c: float = 1.0
    beta_c: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class LossWeights:
    lambda_c: float = 0.5
    lambda_f: float = 0.3
    lambda_sub: float = 1e4
    lambda_kd: float = 0.1
    lambda_ce: float = 0.1


@dataclass
class GroundTruth:
    homography: np.ndarray | None = None    # 3x3, pixels a -> pixels b
    essential: np.ndarray | None = None     # 3x3
    intrinsics: np.ndarray | None = None    # 3x3 camera matrix


class DegenerateInputError(ValueError):
    pass


@dataclass
class GtAssignment:
    p0: np.ndarray      # [Na, Nb] one-hot rows (a -> b direction)
    p1: np.ndarray      # [Na, Nb] one-hot columns (b -> a direction)
    pairs: list         # [(cell_a, cell_b)]
    grid_a: tuple
    grid_b: tuple


def warp_points(points: np.ndarray, h_mat: np.ndarray) -> np.ndarray:
    """Apply a homography to [N, 2] pixel points."""
    pts = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    out = pts @ h_mat.T
    return out[:, :2] / out[:, 2:3]


def build_gt_assignment(gt: GroundTruth, grid_a, grid_b, cell=8.0,
                        valid_b: np.ndarray | None = None) -> GtAssignment:
    """Cell-level GT matching by warping 1/8-cell centers.

    A pair (i, j) is positive iff the warped center of cell i lands inside
    cell j of image b and the reverse warp of cell j's center lands within
    half a cell of cell i's center (mutual consistency).
    """
    h_mat = gt.homography
    if h_mat is None:
        raise DegenerateInputError("GT homography required for assignment")
    if abs(np.linalg.det(h_mat)) < 1e-12:
        raise DegenerateInputError("non-invertible GT homography")
    h_inv = np.linalg.inv(h_mat)
    ha, wa = grid_a
    hb, wb = grid_b
    na, nb = ha * wa, hb * wb

    ra, ca = np.divmod(np.arange(na), wa)
    centers_a = np.stack([(ca + 0.5) * cell, (ra + 0.5) * cell], axis=1)
    warped = warp_points(centers_a, h_mat)
    cb = np.floor(warped[:, 0] / cell).astype(np.int64)
    rb = np.floor(warped[:, 1] / cell).astype(np.int64)
    inside = (cb >= 0) & (cb < wb) & (rb >= 0) & (rb < hb)

    p0 = np.zeros((na, nb), dtype=np.float32)
    pairs = []
    for i in np.nonzero(inside)[0]:
        j = rb[i] * wb + cb[i]
        if valid_b is not None and not valid_b[rb[i], cb[i]]:
            continue
        center_j = np.array([(cb[i] + 0.5) * cell, (rb[i] + 0.5) * cell])
        back = warp_points(center_j[None], h_inv)[0]
        if np.linalg.norm(back - centers_a[i]) <= 0.5 * cell:
            p0[i, j] = 1.0
            pairs.append((int(i), int(j)))
    # mutual consistency with a 0.5-cell radius makes columns unique too,
    # but guard against boundary double-hits anyway
    for j in np.nonzero(p0.sum(axis=0) > 1)[0]:
        rows = np.nonzero(p0[:, j])[0]
        center_j = np.array([((j % wb) + 0.5) * cell, ((j // wb) + 0.5) * cell])
        dists = [np.linalg.norm(warped[i] - center_j) for i in rows]
        keep = rows[int(np.argmin(dists))]
        for i in rows:
            if i != keep:
                p0[i, j] = 0.0
        pairs = [(i, jj) for (i, jj) in pairs if jj != j or i == keep]
    return GtAssignment(p0, p0.copy(), pairs, grid_a, grid_b)


def build_fine_gt(gt: GroundTruth, coords_a: np.ndarray, coords_b: np.ndarray,
                  cell=2.0) -> np.ndarray:
    """Per-window fine GT matrices [M, K, K] from window position grids
    [M, K, 2] (pixel coordinates), by nearest-position warp with a
    half-cell acceptance radius."""
    h_mat = gt.homography
    m, k, _ = coords_a.shape
    out = np.zeros((m, k, k), dtype=np.float32)
    for mi in range(m):
        warped = warp_points(coords_a[mi], h_mat)
        d = np.linalg.norm(warped[:, None, :] - coords_b[mi][None, :, :], axis=2)
        j = d.argmin(axis=1)
        ok = d[np.arange(k), j] <= 0.5 * cell * np.sqrt(2.0)
        for i in np.nonzero(ok)[0]:
            out[mi, i, j[i]] = 1.0
    return out


def focal_loss(p: Tensor, gt: np.ndarray, w: CoarseLossWeights) -> Tensor:
    """Focal loss on a probability matrix against a one-hot GT matrix.

    Positive entries get -alpha (1-p)^gamma log p. Rows without any positive
    entry are supervised through the complement: each of their entries is
    treated as a negative with -(1-alpha) p^gamma log(1-p).
    """
    gt = np.asarray(gt, dtype=np.float32)
    pos_mask = gt > 0
    neg_rows = ~pos_mask.any(axis=-1)
    # log(p + eps) instead of clipping: clipping would zero the gradient for
    # saturated probabilities, exactly the entries that most need correction
    eps = 1e-6
    terms = []
    if pos_mask.any():
        mask = Tensor(pos_mask.astype(np.float32))
        one_minus = T.sub(1.0, p)
        pos = T.mul(T.mul(T.pow_(T.clip(one_minus, 0.0, 1.0), w.focal_gamma),
                          T.log(T.add(p, eps))), mask)
        terms.append(T.mul(T.sum_(pos), -w.focal_alpha / max(1, pos_mask.sum())))
    if neg_rows.any():
        nmask = np.zeros_like(gt)
        nmask[neg_rows] = 1.0
        nmask_t = Tensor(nmask)
        neg = T.mul(T.mul(T.pow_(T.clip(p, 0.0, 1.0), w.focal_gamma),
                          T.log(T.add(T.sub(1.0, p), eps))),
                    nmask_t)
        terms.append(T.mul(T.sum_(neg),
                           -(1.0 - w.focal_alpha) / max(1, int(nmask.sum()))))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def loss_coarse(p0: Tensor, p1: Tensor, gt: GtAssignment,
                w: CoarseLossWeights | None = None) -> Tensor:
    """alpha_c FL(P0, GT0) + beta_c FL(P1, GT1); P1 is supervised columnwise
    (transpose both so rows are distributions)."""
    w = w or CoarseLossWeights()
    term0 = T.mul(focal_loss(p0, gt.p0, w), w.alpha_c)
    term1 = T.mul(focal_loss(T.swapaxes(p1, -1, -2), gt.p1.T, w), w.beta_c)
    return T.add(term0, term1)


def loss_fine(fine_probs: Tensor | None, fine_gt: np.ndarray,
              w: CoarseLossWeights | None = None) -> Tensor:
    """Mean over coarse matches of FL(P^f, GT^f)."""
    w = w or CoarseLossWeights()
    if fine_probs is None or fine_probs.shape[0] == 0:
        log.warning("loss_fine: empty coarse match set, contributing 0")
        return Tensor(0.0)
    m = fine_probs.shape[0]
    total = None
    for mi in range(m):
        term = focal_loss(T.narrow(fine_probs, 0, mi, 1), fine_gt[mi][None],
                          w)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / m)


def _to_homogeneous(xy: Tensor) -> Tensor:
    ones = Tensor(np.ones((xy.shape[0], 1), dtype=np.float32))
    return T.concat([xy, ones], axis=1)


def loss_subpixel(xy_a: Tensor, xy_b: Tensor, essential: np.ndarray):
    """Symmetric epipolar distance under the GT essential (or fundamental)
    matrix, mean over matches. The matrix convention is x_b^T E x_a = 0,
    i.e. E maps image-a points to epipolar lines in image b. Matches whose
    epipolar-line norms both vanish are skipped; the skip count is returned
    alongside the loss."""
    if xy_a.shape[0] == 0:
        return Tensor(0.0), 0
    e_mat = Tensor(np.asarray(essential, dtype=np.float32))
    xa = _to_homogeneous(xy_a)
    xb = _to_homogeneous(xy_b)
    line_b = T.matmul(xa, T.transpose(e_mat))     # rows: E x_a, lines in b
    line_a = T.matmul(xb, e_mat)                  # rows: E^T x_b, lines in a
    residual = T.sum_(T.mul(line_b, xb), axis=1)  # x_b^T E x_a per match
    # ||.||_{0:2}^2: first two components of each epipolar line
    na = T.sum_(T.square(T.narrow(line_b, 1, 0, 2)), axis=1)
    nb = T.sum_(T.square(T.narrow(line_a, 1, 0, 2)), axis=1)
    na_d, nb_d = na.data, nb.data
    keep = ~((na_d < 1e-12) & (nb_d < 1e-12))
    skipped = int((~keep).sum())
    if skipped:
        log.warning("loss_subpixel: skipped %d degenerate matches", skipped)
    if not keep.any():
        return Tensor(0.0), skipped
    kept_idx = np.nonzero(keep)[0]
    r2 = T.take(T.square(residual), kept_idx, 0)
    na_k = T.take(na, kept_idx, 0)
    nb_k = T.take(nb, kept_idx, 0)
    weight = T.add(T.div(1.0, T.add(na_k, 1e-12)), T.div(1.0, T.add(nb_k, 1e-12)))
    return T.mean(T.mul(r2, weight)), skipped


def loss_reprojection(xy_a: Tensor, xy_b: Tensor, homography: np.ndarray) -> Tensor:
    """Symmetric squared reprojection distance under a GT homography, in
    pixels; the training substitute for the epipolar loss when only H is
    available."""
    if xy_a.shape[0] == 0:
        return Tensor(0.0)
    h_mat = np.asarray(homography, dtype=np.float32)
    h_inv = np.linalg.inv(h_mat).astype(np.float32)

    def project(xy, mat):
        pts = _to_homogeneous(xy)
        out = T.matmul(pts, Tensor(mat.T))
        z = T.narrow(out, 1, 2, 1)
        return T.div(T.narrow(out, 1, 0, 2), z)

    fwd = T.sum_(T.square(T.sub(project(xy_a, h_mat), xy_b)), axis=1)
    bwd = T.sum_(T.square(T.sub(project(xy_b, h_inv), xy_a)), axis=1)
    return T.mean(T.mul(T.add(fwd, bwd), 0.5))


def total_loss(l_kd, l_ce, l_c, l_f, l_sub, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    out = T.mul(l_kd, w.lambda_kd)
    out = T.add(out, T.mul(l_ce, w.lambda_ce))
    out = T.add(out, T.mul(l_c, w.lambda_c))
    out = T.add(out, T.mul(l_f, w.lambda_f))
    return T.add(out, T.mul(l_sub, w.lambda_sub))
