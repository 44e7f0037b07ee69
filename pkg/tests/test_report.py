"""Metric aggregation over pair sets and figure rendering."""

import numpy as np

from distillmatch import geometry as geo
from distillmatch import report

DIMS = (64, 64)


def gt_matches(seed, n=30):
    rng = np.random.default_rng(seed)
    h = geo.sample_homography(DIMS, seed)
    pts_a = rng.uniform(6, 57, size=(n, 2))
    pts_b = geo.apply_homography(h, pts_a)
    arr = np.c_[pts_a, pts_b, np.ones(n)]
    return arr, h


class TestEvaluatePairs:
    def test_perfect_matches(self):
        arrays, gts = zip(*[gt_matches(s) for s in range(4)])
        rep = report.evaluate_pairs(arrays, gts, DIMS)
        assert all(a > 0.999 for a in rep.auc)
        assert rep.ncm == 120
        assert rep.rmse < 1e-6
        assert max(rep.per_pair_errors) < 1e-3

    def test_failed_pair_counts_as_infinite(self):
        good, h = gt_matches(9)
        bad = np.zeros((2, 5))  # too few matches for RANSAC
        rep = report.evaluate_pairs([good, bad], [h, np.eye(3)], DIMS)
        assert rep.per_pair_errors[1] == float("inf")
        # one of two pairs succeeds: AUC saturates at 0.5
        assert abs(rep.auc[-1] - 0.5) < 0.01

    def test_empty_matches_pair(self):
        good, h = gt_matches(10)
        rep = report.evaluate_pairs([good, np.zeros((0, 5))],
                                    [h, np.eye(3)], DIMS)
        assert rep.ncm == 30
        assert rep.per_pair_errors[1] == float("inf")


class TestFigures:
    def test_cumulative_error_svg(self, tmp_path):
        path = tmp_path / "cum.svg"
        report.plot_cumulative_errors(path, [0.5, 2.0, 7.0, float("inf")],
                                      [3.0, 5.0, 10.0])
        text = path.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "svg" in text[:400]

    def test_cumulative_error_all_infinite(self, tmp_path):
        path = tmp_path / "inf.svg"
        report.plot_cumulative_errors(path, [float("inf")] * 3, [10.0])
        assert path.exists()

    def test_loss_curves_svg(self, tmp_path):
        hist = [{"step": i, "loss_total": 10.0 / (i + 1),
                 "loss_coarse": 5.0 / (i + 1), "loss_fine": 1.0,
                 "loss_kd": 0.5, "loss_ce": 0.2} for i in range(10)]
        path = tmp_path / "loss.svg"
        report.plot_loss_curves(path, hist)
        assert path.read_text().lstrip().startswith("<?xml")
