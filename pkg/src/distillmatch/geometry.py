"""Evaluation geometry: RANSAC model fitting, pose and homography error
metrics, AUC over cumulative error curves, and the GT homography sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares


class EstimationError(RuntimeError):
    pass


# -- basic transforms ---------------------------------------------------------

def normalize_homography(h_mat: np.ndarray) -> np.ndarray:
    h_mat = np.asarray(h_mat, dtype=np.float64)
    if abs(h_mat[2, 2]) > 1e-12:
        h_mat = h_mat / h_mat[2, 2]
    return h_mat


def apply_homography(h_mat, pts):
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(h_mat).T
    return hom[:, :2] / hom[:, 2:3]


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t_mat = np.array([[s, 0, -s * centroid[0]],
                      [0, s, -s * centroid[1]],
                      [0, 0, 1.0]])
    return t_mat


def fit_homography_dlt(pts_a, pts_b) -> np.ndarray:
    """Normalized DLT from >= 4 correspondences."""
    pts_a, pts_b = np.asarray(pts_a, float), np.asarray(pts_b, float)
    if len(pts_a) < 4:
        raise EstimationError("homography needs >= 4 correspondences")
    ta = _hartley_normalization(pts_a)
    tb = _hartley_normalization(pts_b)
    na = apply_homography(ta, pts_a)
    nb = apply_homography(tb, pts_b)
    rows = []
    for (x, y), (u, v) in zip(na, nb):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_norm = vt[-1].reshape(3, 3)
    h_mat = np.linalg.inv(tb) @ h_norm @ ta
    if abs(np.linalg.det(h_mat)) < 1e-12:
        raise EstimationError("degenerate homography sample")
    return normalize_homography(h_mat)


def fit_essential_8pt(pts_a, pts_b, intrinsics) -> np.ndarray:
    """8-point essential estimate with rank-2 projection; points in pixels."""
    pts_a, pts_b = np.asarray(pts_a, float), np.asarray(pts_b, float)
    if len(pts_a) < 8:
        raise EstimationError("essential matrix needs >= 8 correspondences")
    k_inv = np.linalg.inv(intrinsics)
    na = (np.concatenate([pts_a, np.ones((len(pts_a), 1))], axis=1) @ k_inv.T)[:, :2]
    nb = (np.concatenate([pts_b, np.ones((len(pts_b), 1))], axis=1) @ k_inv.T)[:, :2]
    ta = _hartley_normalization(na)
    tb = _hartley_normalization(nb)
    qa = apply_homography(ta, na)
    qb = apply_homography(tb, nb)
    rows = []
    for (x, y), (u, v) in zip(qa, qb):
        # epipolar constraint x_b^T E x_a = 0 with x_a = (x,y,1), x_b = (u,v,1)
        rows.append([u * x, u * y, u, v * x, v * y, v, x, y, 1.0])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    e_norm = vt[-1].reshape(3, 3)
    e_mat = tb.T @ e_norm @ ta
    u_m, s, vt_m = np.linalg.svd(e_mat)
    s_avg = (s[0] + s[1]) / 2.0
    e_mat = u_m @ np.diag([s_avg, s_avg, 0.0]) @ vt_m
    return e_mat / np.linalg.norm(e_mat)


def homography_residuals(h_mat, pts_a, pts_b):
    return np.linalg.norm(apply_homography(h_mat, pts_a) - pts_b, axis=1)


def epipolar_residuals_px(e_mat, pts_a, pts_b, intrinsics):
    """Symmetric epipolar distance in pixels via F = K^-T E K^-1."""
    k_inv = np.linalg.inv(intrinsics)
    f_mat = k_inv.T @ e_mat @ k_inv
    xa = np.concatenate([pts_a, np.ones((len(pts_a), 1))], axis=1)
    xb = np.concatenate([pts_b, np.ones((len(pts_b), 1))], axis=1)
    fx_a = xa @ f_mat.T        # lines in image b
    ftx_b = xb @ f_mat         # lines in image a
    num = np.abs(np.sum(xb * fx_a, axis=1))
    da = num / np.maximum(np.linalg.norm(fx_a[:, :2], axis=1), 1e-12)
    db = num / np.maximum(np.linalg.norm(ftx_b[:, :2], axis=1), 1e-12)
    return 0.5 * (da + db)


# -- RANSAC -------------------------------------------------------------------

def ransac_fit(pts_a, pts_b, model="homography", inlier_threshold=3.0,
               confidence=0.999, max_iters=1000, seed=0, intrinsics=None):
    """RANSAC with least-squares refinement on the final inlier set.

    Returns (model matrix, boolean inlier mask). Deterministic per seed.
    """
    pts_a, pts_b = np.asarray(pts_a, float), np.asarray(pts_b, float)
    n = len(pts_a)
    sample_size = 4 if model == "homography" else 8
    if model == "essential" and intrinsics is None:
        raise EstimationError("essential estimation requires intrinsics")
    if n < sample_size:
        raise EstimationError(
            f"{model} needs >= {sample_size} matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    iters = max_iters
    it = 0
    while it < iters:
        it += 1
        idx = rng.choice(n, sample_size, replace=False)
        try:
            if model == "homography":
                cand = fit_homography_dlt(pts_a[idx], pts_b[idx])
                res = homography_residuals(cand, pts_a, pts_b)
            else:
                cand = fit_essential_8pt(pts_a[idx], pts_b[idx], intrinsics)
                res = epipolar_residuals_px(cand, pts_a, pts_b, intrinsics)
        except (EstimationError, np.linalg.LinAlgError):
            continue  # degenerate sample: resample
        mask = res < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            ratio = max(count / n, 1e-9)
            denom = np.log(max(1.0 - ratio ** sample_size, 1e-12))
            needed = int(np.ceil(np.log(1.0 - confidence) / denom))
            iters = min(max_iters, max(needed, 1))
    if best_mask is None or best_count < sample_size:
        raise EstimationError("RANSAC failed to find a valid model")
    if model == "homography":
        final = fit_homography_dlt(pts_a[best_mask], pts_b[best_mask])
        res = homography_residuals(final, pts_a, pts_b)
    else:
        final = fit_essential_8pt(pts_a[best_mask], pts_b[best_mask], intrinsics)
        res = epipolar_residuals_px(final, pts_a, pts_b, intrinsics)
    return final, res < inlier_threshold


# -- pose metrics -------------------------------------------------------------

def decompose_essential(e_mat, pts_a, pts_b, intrinsics):
    """Pick the (R, t) candidate with the best cheirality support.

    Points are pixel correspondences used only for the cheirality vote;
    t is returned unit-norm.
    """
    u_m, _, vt_m = np.linalg.svd(e_mat)
    if np.linalg.det(u_m) < 0:
        u_m = -u_m
    if np.linalg.det(vt_m) < 0:
        vt_m = -vt_m
    w_mat = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    t_vec = u_m[:, 2]
    candidates = [(u_m @ w_mat @ vt_m, t_vec), (u_m @ w_mat @ vt_m, -t_vec),
                  (u_m @ w_mat.T @ vt_m, t_vec), (u_m @ w_mat.T @ vt_m, -t_vec)]
    k_inv = np.linalg.inv(intrinsics)
    xa = np.concatenate([pts_a, np.ones((len(pts_a), 1))], axis=1) @ k_inv.T
    xb = np.concatenate([pts_b, np.ones((len(pts_b), 1))], axis=1) @ k_inv.T
    best = None
    best_votes = -1
    for r_mat, t in candidates:
        votes = 0
        for qa, qb in zip(xa, xb):
            # triangulate depth along ray a: qb x (R qa) z = -qb x t
            lhs = np.cross(qb, r_mat @ qa)
            rhs = -np.cross(qb, t)
            denom = lhs @ lhs
            if denom < 1e-14:
                continue
            za = (lhs @ rhs) / denom
            pb = r_mat @ (qa * za) + t
            if za > 0 and pb[2] > 0:
                votes += 1
        if votes > best_votes:
            best_votes = votes
            best = (r_mat, t / np.linalg.norm(t))
    return best


def rotation_angle_deg(r_a, r_b):
    if np.array_equal(r_a, r_b):
        return 0.0  # arccos near 1 would otherwise round away from zero
    cos = (np.trace(r_a @ r_b.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def direction_angle_deg(t_a, t_b):
    if np.array_equal(t_a, t_b):
        return 0.0
    cos = (t_a @ t_b) / max(np.linalg.norm(t_a) * np.linalg.norm(t_b), 1e-12)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def pose_error(e_est, gt, pts_a, pts_b, intrinsics):
    """Angular rotation and translation-direction errors, degrees.

    ``gt`` is either (R, t) or a GT essential matrix (decomposed with the
    same correspondences). Decomposition failure reports (180, 180).
    """
    try:
        est = decompose_essential(e_est, pts_a, pts_b, intrinsics)
        if est is None:
            return 180.0, 180.0
        if isinstance(gt, tuple):
            r_gt, t_gt = gt
        else:
            r_gt, t_gt = decompose_essential(gt, pts_a, pts_b, intrinsics)
        r_est, t_est = est
        return (rotation_angle_deg(r_est, r_gt),
                direction_angle_deg(t_est, t_gt))
    except np.linalg.LinAlgError:
        return 180.0, 180.0


def corner_reprojection_error(h_est, h_gt, dims) -> float:
    """Mean displacement of the four image corners, estimated vs GT warp."""
    h, w = dims
    if abs(np.linalg.det(h_est)) < 1e-12:
        return float("inf")
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]],
                       dtype=np.float64)
    d = np.linalg.norm(apply_homography(h_est, corners)
                       - apply_homography(h_gt, corners), axis=1)
    return float(d.mean())


# -- aggregate metrics --------------------------------------------------------

def auc(errors, thresholds):
    """Normalized area under the cumulative recall curve, per threshold.

    recall(e) = fraction of errors <= e (a right-continuous step function);
    AUC@t = (1/t) * integral of recall over [0, t], computed exactly from
    the sorted error sequence. Infinite errors count in the denominator.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("auc requires at least one error value")
    if (errors < 0).any():
        raise ValueError("errors must be non-negative")
    n = errors.size
    finite = np.sort(errors[np.isfinite(errors)])
    out = []
    for t in thresholds:
        within = finite[finite <= t]
        area = 0.0
        prev = 0.0
        for k, e in enumerate(within):
            area += (k / n) * (e - prev)
            prev = e
        area += (len(within) / n) * (t - prev)
        out.append(area / t)
    return out


def ncm_rmse(matches_xy, gt_homography, tol=5.0):
    """Number of correct matches (residual strictly below tol) and the
    RMSE of all residuals; RMSE is None for an empty match set."""
    matches_xy = np.asarray(matches_xy, dtype=np.float64)
    if matches_xy.size == 0:
        return 0, None
    res = np.linalg.norm(
        apply_homography(gt_homography, matches_xy[:, 0:2]) - matches_xy[:, 2:4],
        axis=1)
    ncm = int((res < tol).sum())
    return ncm, float(np.sqrt(np.mean(res ** 2)))


# -- GT homography sampling ---------------------------------------------------

@dataclass
class HomographyRanges:
    translation: float = 0.10      # fraction of each dimension
    rotation_deg: float = 20.0
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    shear: float = 0.1
    perspective: float = 0.003


def compose_homography(params, dims):
    """Build H = T * C * R * S * Shear * P * C^-1 from explicit parameters
    (tx_frac, ty_frac, theta_deg, scale, shear_x, shear_y, px, py)."""
    h, w = dims
    tx, ty, theta, scale, shx, shy, px, py = params
    th = np.radians(theta)
    rot = np.array([[np.cos(th), -np.sin(th), 0],
                    [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    sh = np.array([[1.0, shx, 0], [shy, 1.0, 0], [0, 0, 1.0]])
    pe = np.array([[1.0, 0, 0], [0, 1.0, 0], [px, py, 1.0]])
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    center_inv = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    trans = np.array([[1, 0, tx * w], [0, 1, ty * h], [0, 0, 1.0]])
    return normalize_homography(
        trans @ center @ rot @ sc @ sh @ pe @ center_inv)


def sample_homography(dims, seed, ranges: HomographyRanges | None = None):
    """Random GT homography within the configured parameter box."""
    h, w = dims
    if h < 32 or w < 32:
        raise ValueError("image dims must be >= 32")
    ranges = ranges or HomographyRanges()
    rng = np.random.default_rng(seed)
    for _ in range(16):
        params = (
            rng.uniform(-ranges.translation, ranges.translation),
            rng.uniform(-ranges.translation, ranges.translation),
            rng.uniform(-ranges.rotation_deg, ranges.rotation_deg),
            rng.uniform(ranges.scale_lo, ranges.scale_hi),
            rng.uniform(-ranges.shear, ranges.shear),
            rng.uniform(-ranges.shear, ranges.shear),
            rng.uniform(-ranges.perspective, ranges.perspective),
            rng.uniform(-ranges.perspective, ranges.perspective),
        )
        h_mat = compose_homography(params, dims)
        if abs(np.linalg.det(h_mat)) > 1e-12:
            return h_mat
    raise EstimationError("could not sample an invertible homography")


def decompose_sampled_homography(h_mat, dims):
    """Recover the sampler's parameters from a composed homography by
    nonlinear least squares on the known composition structure."""
    h_mat = normalize_homography(h_mat)

    def residual(params):
        return (compose_homography(params, dims) - h_mat).reshape(-1)

    init = np.array([h_mat[0, 2] / dims[1], h_mat[1, 2] / dims[0],
                     np.degrees(np.arctan2(h_mat[1, 0], h_mat[0, 0])),
                     1.0, 0.0, 0.0, 0.0, 0.0])
    sol = least_squares(residual, init, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return sol.x
