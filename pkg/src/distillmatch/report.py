"""Evaluation reporting: metric aggregation over pair sets, JSON
serialization, and rendered figures (cumulative error curves, training
loss curves) written next to the delimited outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import geometry

DEFAULT_THRESHOLDS = (3.0, 5.0, 10.0)


@dataclass
class MetricReport:
    thresholds: list
    auc: list
    ncm: int
    rmse: float | None
    per_pair_errors: list

    def to_dict(self) -> dict:
        # non-finite errors serialize as the string "inf" (strict JSON has
        # no Infinity literal); float("inf") restores them on read
        return {"thresholds": [float(t) for t in self.thresholds],
                "auc": [float(a) for a in self.auc],
                "ncm": int(self.ncm),
                "rmse": None if self.rmse is None else float(self.rmse),
                "per_pair_errors": [float(e) if np.isfinite(e) else "inf"
                                    for e in self.per_pair_errors]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True,
                          allow_nan=False)


def evaluate_pairs(match_arrays, gt_homographies, dims,
                   thresholds=DEFAULT_THRESHOLDS, seed=0) -> MetricReport:
    """Homography evaluation over pairs: per-pair corner reprojection error
    of the RANSAC estimate, AUC over those errors, plus NCM/RMSE pooled
    over all matches.

    ``match_arrays`` holds [N, 5] arrays (x_a, y_a, x_b, y_b, confidence).
    Pairs where estimation fails contribute an infinite error.
    """
    errors = []
    ncm_total = 0
    sq_sum, res_count = 0.0, 0
    for k, (arr, h_gt) in enumerate(zip(match_arrays, gt_homographies)):
        arr = np.asarray(arr, dtype=np.float64)
        try:
            h_est, _ = geometry.ransac_fit(arr[:, 0:2], arr[:, 2:4],
                                           "homography", seed=seed + k)
            errors.append(geometry.corner_reprojection_error(h_est, h_gt, dims))
        except geometry.EstimationError:
            errors.append(float("inf"))
        ncm, rmse = geometry.ncm_rmse(arr, h_gt)
        ncm_total += ncm
        if rmse is not None:
            sq_sum += rmse ** 2 * len(arr)
            res_count += len(arr)
    auc_vals = geometry.auc(errors, thresholds)
    rmse_all = float(np.sqrt(sq_sum / res_count)) if res_count else None
    return MetricReport(list(thresholds), auc_vals, ncm_total, rmse_all,
                        errors)


def write_report(path, report: MetricReport) -> None:
    Path(path).write_text(report.to_json() + "\n")


def read_report(path) -> MetricReport:
    raw = json.loads(Path(path).read_text())
    return MetricReport(raw["thresholds"], raw["auc"], raw["ncm"],
                        raw["rmse"],
                        [float(e) for e in raw["per_pair_errors"]])


def plot_cumulative_errors(path, per_pair_errors, thresholds) -> None:
    """Cumulative recall-vs-error curve with threshold markers, as SVG."""
    errors = np.asarray(per_pair_errors, dtype=np.float64)
    finite = np.sort(errors[np.isfinite(errors)])
    n = max(len(errors), 1)
    fig, ax = plt.subplots(figsize=(5, 4))
    if len(finite):
        k = len(finite)
        right = max(list(thresholds) + [float(finite[-1])]) * 1.1
        xs = np.concatenate([[0.0], np.repeat(finite, 2), [right]])
        ys = np.concatenate([[0.0],
                             np.repeat(np.arange(0, k + 1) / n, 2)[1:-1],
                             [k / n]])
        ax.plot(xs, ys, lw=1.5)
    for t in thresholds:
        ax.axvline(t, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("corner reprojection error (px)")
    ax.set_ylabel("recall")
    ax.set_xlim(0, max(list(thresholds) + [1.0]) * 1.1)
    ax.set_ylim(0, 1.02)
    ax.set_title("cumulative error")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_loss_curves(path, history) -> None:
    """Per-step loss components from trainer metric dicts, as SVG."""
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss_total", "loss_coarse", "loss_fine", "loss_kd",
                "loss_ce"):
        vals = [h[key] for h in history if key in h]
        if vals:
            ax.plot(steps[:len(vals)], vals, lw=1.0,
                    label=key.replace("loss_", ""))
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
