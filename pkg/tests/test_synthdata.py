"""Synthetic pair generation: textures, warping, pseudo-infrared
transform, pose sampling, and dataset directory round-trips."""

import numpy as np
import pytest

from distillmatch import geometry as geo
from distillmatch import synthdata as sd

DIMS = (64, 64)


class TestTextures:
    @pytest.mark.parametrize("kind", sd.TEXTURE_KINDS)
    def test_shape_range_dtype(self, kind):
        img = sd.gen_texture(kind, DIMS, 0)
        assert img.shape == (3, 64, 64)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("kind", sd.TEXTURE_KINDS)
    def test_deterministic(self, kind):
        assert np.array_equal(sd.gen_texture(kind, DIMS, 3),
                              sd.gen_texture(kind, DIMS, 3))
        assert not np.array_equal(sd.gen_texture(kind, DIMS, 3),
                                  sd.gen_texture(kind, DIMS, 4))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sd.gen_texture("plaid", DIMS, 0)

    def test_dims_multiple_of_eight(self):
        with pytest.raises(ValueError):
            sd.gen_texture("noise", (63, 64), 0)


class TestWarp:
    def test_identity_is_noop(self):
        img = sd.gen_texture("noise", DIMS, 1)
        out, valid = sd.warp(img, np.eye(3))
        assert np.allclose(out, img, atol=1e-6)
        assert valid.all()

    def test_integer_translation_shifts_pixels(self):
        img = sd.gen_texture("noise", DIMS, 2)
        h = np.eye(3)
        h[0, 2] = 5.0
        out, valid = sd.warp(img, h)
        assert np.allclose(out[:, :, 5:], img[:, :, :-5], atol=1e-6)
        assert not valid[:, :5].any() and valid[:, 5:].all()

    def test_point_correspondence(self):
        """The warped image at H(x) equals the source at x (bilinear)."""
        img = sd.gen_texture("blobs", DIMS, 3)
        h = geo.sample_homography(DIMS, 4)
        out, valid = sd.warp(img, h)
        src = np.array([[20.0, 30.0], [40.0, 15.0], [31.0, 41.0]])
        dst = geo.apply_homography(h, src)
        for (sx, sy), (dx, dy) in zip(src, dst):
            if not (0 <= dx <= 62 and 0 <= dy <= 62):
                continue
            x0, y0 = int(dx), int(dy)
            patch = out[0, y0:y0 + 2, x0:x0 + 2]
            lo, hi = patch.min(), patch.max()
            val = img[0, int(round(sy)), int(round(sx))]
            assert lo - 0.15 <= val <= hi + 0.15

    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            sd.warp(sd.gen_texture("noise", DIMS, 5), np.zeros((3, 3)))


class TestPseudoIr:
    def test_shape_and_range(self):
        out = sd.pseudo_ir(sd.gen_texture("checker", DIMS, 6))
        assert out.shape == (3, 64, 64)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[0],
                                                                 out[2])

    def test_tone_inversion(self):
        """Bright regions map darker than dark regions."""
        img = np.zeros((3, 64, 64), dtype=np.float32)
        img[:, :, :32] = 1.0  # left half bright
        out = sd.pseudo_ir(img)
        assert out[0, :, 4:28].mean() < out[0, :, 36:60].mean()

    def test_constant_image_stable(self):
        img = np.full((3, 64, 64), 0.5, dtype=np.float32)
        out = sd.pseudo_ir(img)
        assert np.isfinite(out).all()

    def test_statistics_shift(self):
        """Pseudo-IR correlates weakly with the visible luminance, so the
        modality gap is real."""
        img = sd.gen_texture("noise", DIMS, 7)
        lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        out = sd.pseudo_ir(img)
        corr = np.corrcoef(lum.ravel(), out[0].ravel())[0, 1]
        assert corr < 0.0  # tone inversion flips the correlation sign


class TestJitter:
    def test_preserves_shape_range(self):
        img = sd.gen_texture("blobs", DIMS, 8)
        out = sd.hsv_jitter(img, 9)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6

    def test_changes_colors_deterministically(self):
        img = sd.gen_texture("blobs", DIMS, 10)
        a = sd.hsv_jitter(img, 11)
        b = sd.hsv_jitter(img, 11)
        c = sd.hsv_jitter(img, 12)
        assert np.array_equal(a, b)
        assert np.abs(a - img).max() > 1e-3
        assert not np.array_equal(a, c)

    def test_zero_ranges_identity(self):
        img = sd.gen_texture("checker", DIMS, 13)
        out = sd.hsv_jitter(img, 14, sd.JitterRanges(0.0, 0.0, 0.0))
        assert np.abs(out - img).max() < 1e-5


class TestPose:
    @pytest.mark.parametrize("seed", range(10))
    def test_epipolar_consistency(self, seed):
        """Points under the plane-induced homography satisfy the epipolar
        constraint of the returned essential matrix."""
        h, e, k, r, t = sd.sample_pose(DIMS, seed)
        rng = np.random.default_rng(seed)
        pts_a = rng.uniform(4, 59, size=(30, 2))
        pts_b = geo.apply_homography(h, pts_a)
        res = geo.epipolar_residuals_px(e, pts_a, pts_b, k)
        assert res.max() < 1e-9

    def test_rotation_is_orthonormal(self):
        _, _, _, r, _ = sd.sample_pose(DIMS, 3)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_essential_unit_norm(self):
        _, e, _, _, _ = sd.sample_pose(DIMS, 4)
        assert abs(np.linalg.norm(e) - 1.0) < 1e-12

    def test_rotation_angle_bounded(self):
        for seed in range(10):
            _, _, _, r, _ = sd.sample_pose(DIMS, seed, max_angle_deg=6.0)
            assert geo.rotation_angle_deg(r, np.eye(3)) <= 6.0 + 1e-9


class TestMakePair:
    def test_deterministic(self):
        a = sd.make_pair(DIMS, 21, kind="checker")
        b = sd.make_pair(DIMS, 21, kind="checker")
        assert np.array_equal(a.img_vis, b.img_vis)
        assert np.array_equal(a.img_pir, b.img_pir)
        assert np.array_equal(a.gt.homography, b.gt.homography)

    def test_homography_mode_fields(self):
        p = sd.make_pair(DIMS, 22)
        assert p.gt.essential is None
        assert p.valid_mask.shape == DIMS
        assert p.img_vis.shape == p.img_pir.shape == (3, 64, 64)

    def test_pose_mode_fields(self):
        p = sd.make_pair(DIMS, 23, mode="pose")
        assert p.gt.essential is not None
        assert p.gt.intrinsics is not None
        assert p.rotation is not None and p.translation is not None

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            sd.make_pair(DIMS, 24, mode="affine")

    def test_pir_is_warped_not_aligned(self):
        p = sd.make_pair(DIMS, 25, kind="blobs")
        unwarped = sd.pseudo_ir(p.img_vis)
        assert np.abs(p.img_pir - unwarped).max() > 0.1


class TestBatchAndDataset:
    def test_batch_cycles_kinds(self):
        pairs = sd.make_batch(4, DIMS, 30)
        assert len(pairs) == 4
        assert not np.array_equal(pairs[0].img_vis, pairs[3].img_vis)

    def test_batch_size_validated(self):
        with pytest.raises(ValueError):
            sd.make_batch(0, DIMS, 0)

    def test_dataset_roundtrip(self, tmp_path):
        pairs = sd.make_batch(3, DIMS, 31, mode="pose")
        cfg = {"n": 3, "dims": [64, 64], "seed": 31, "mode": "pose"}
        sd.save_dataset(tmp_path / "ds", pairs, cfg)
        loaded, manifest = sd.load_dataset(tmp_path / "ds")
        assert manifest["config"] == cfg
        assert manifest["config_hash"] == sd._config_hash(cfg)
        assert len(loaded) == 3
        for orig, back in zip(pairs, loaded):
            assert np.array_equal(orig.img_vis, back.img_vis)
            assert np.array_equal(orig.img_pir, back.img_pir)
            assert np.allclose(orig.gt.homography, back.gt.homography)
            assert np.allclose(orig.gt.essential, back.gt.essential)
            assert np.allclose(orig.rotation, back.rotation)

    def test_config_hash_sensitive(self):
        assert sd._config_hash({"a": 1}) != sd._config_hash({"a": 2})
        assert len(sd._config_hash({})) == 16
