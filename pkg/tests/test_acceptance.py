"""End-to-end acceptance gate.

Each test covers one acceptance criterion and prints a single PASS/FAIL
line (the pytest -v status line doubles as the machine-readable verdict).
The toy training run is the long pole (~10 min); everything else is fast.
"""

import json
import time

import numpy as np
import pytest

from distillmatch import cefg, distill, geometry as geo, matcher, report
from distillmatch import supervision as sup
from distillmatch import synthdata as sd
from distillmatch import tensor as T
from distillmatch import tensorio, trainer
from distillmatch.matcher import MatchThresholds, match_from_descriptors
from distillmatch.pipeline import DistillMatchModel, pair_from_arrays
from distillmatch.tensor import Tensor

DIMS = (64, 64)


def verdict(n, passed, detail):
    line = f"ACCEPTANCE CRITERION {n}: {'PASS' if passed else 'FAIL'} — {detail}"
    print(line)
    assert passed, line


def rand(shape, seed, scale=1.0):
    return (np.random.default_rng(seed).normal(0, scale, size=shape)
            .astype(np.float32))


def test_criterion_1_gradient_suite():
    """Every differentiable op family and each composite loss passes
    central finite-difference checks (rel. tol 1e-3, >= 5 seeds) in < 2 min."""
    t0 = time.time()
    failures = []

    def check(name, fn, x):
        ok, err = T.finite_diff_check(fn, Tensor(x))
        if not ok:
            failures.append(f"{name}: rel err {err}")

    w_mat = rand((5, 4), 999)
    conv_w = rand((3, 2, 3, 3), 998)
    for seed in range(5):
        x = rand((3, 4), seed, scale=0.8)
        for name, fn in [
            ("exp", lambda t: T.sum_(T.exp(t))),
            ("log", lambda t: T.sum_(T.log(T.add(T.square(t), 1.0)))),
            ("sqrt", lambda t: T.sum_(T.sqrt(T.add(T.square(t), 0.5)))),
            ("tanh", lambda t: T.sum_(T.tanh(t))),
            ("gelu", lambda t: T.sum_(T.gelu(t))),
            ("pow", lambda t: T.sum_(T.pow_(T.add(T.square(t), 1.0), 1.7))),
            ("mean", lambda t: T.mean(T.mul(t, t))),
            ("softmax", lambda t: T.sum_(T.square(T.softmax(t, axis=-1)))),
            ("reshape", lambda t: T.sum_(T.square(T.reshape(t, (4, 3))))),
            ("concat", lambda t: T.sum_(T.square(T.concat([t, t], 0)))),
            ("take", lambda t: T.sum_(T.square(
                T.take(t, np.array([0, 2, 2]), 0)))),
        ]:
            check(name, fn, x)
        check("matmul", lambda t: T.sum_(T.square(T.matmul(t, Tensor(
            rand((4, 3), seed + 10))))), x)
        check("conv2d", lambda t: T.sum_(T.square(
            T.conv2d(t, Tensor(conv_w), None, 1, 1))), rand((1, 2, 6, 6), seed))
        check("resize", lambda t: T.sum_(T.square(
            T.bilinear_resize(t, 4, 9))), rand((1, 2, 6, 6), seed))
        check("layer_norm", lambda t: T.sum_(T.square(T.layer_norm(
            t, Tensor(np.ones(4, np.float32)),
            Tensor(np.zeros(4, np.float32))))), x)

        # composite losses
        tea = rand((1, 4, 3, 3), seed + 100)
        check("loss_kd", lambda t: distill.loss_kd(Tensor(tea), t),
              rand((1, 4, 3, 3), seed))
        check("loss_ce", lambda t: cefg.cross_entropy(t, cefg.VIS_TARGET),
              rand((2, 2), seed))
        gt = np.zeros((3, 4), np.float32)
        gt[0, 1] = gt[2, 3] = 1.0
        check("focal", lambda t: sup.focal_loss(
            T.softmax(t, axis=-1), gt, sup.CoarseLossWeights()), x)
        h = geo.sample_homography(DIMS, seed + 30)
        pts_a = np.random.default_rng(seed).uniform(10, 50, (5, 2)) \
            .astype(np.float32)
        pts_b = (geo.apply_homography(h, pts_a) + 0.5).astype(np.float32)
        check("reprojection", lambda t: sup.loss_reprojection(
            t, Tensor(pts_b), h), pts_a)
        _, e_mat, k_mat, _, _ = sd.sample_pose(DIMS, seed)
        na = ((np.c_[pts_a, np.ones(5)] @ np.linalg.inv(k_mat).T)[:, :2]
              .astype(np.float32))
        check("subpixel", lambda t: sup.loss_subpixel(
            Tensor(na), t, e_mat)[0], na + np.float32(0.01))

    elapsed = time.time() - t0
    verdict(1, not failures and elapsed < 120,
            f"{'all gradient checks pass' if not failures else failures[:3]}"
            f", {elapsed:.1f}s (< 120s)")


def test_criterion_2_distillation():
    f = Tensor(rand((2, 6, 4, 4), 0))
    zeros_ok = (float(distill.loss_mse(f, f).data) < 1e-10
                and float(distill.loss_gram(f, f).data) < 1e-10
                and float(distill.loss_kl(f, f).data) < 1e-10)

    a, b = Tensor(rand((2, 6, 4, 4), 1)), Tensor(rand((2, 6, 4, 4), 2))
    mse_inv = abs(float(distill.loss_mse(a, b).data)
                  - float(distill.loss_mse(T.mul(a, 7.5),
                                           T.mul(b, 0.3)).data)) < 1e-6
    shift = Tensor(np.full((2, 6, 4, 4), 2.5, np.float32))
    kl_inv = abs(float(distill.loss_kl(a, b).data)
                 - float(distill.loss_kl(T.add(a, shift), b).data)) < 1e-5
    arr = a.data.copy()
    arr[:, 0] *= -1.0
    gram_sign = float(distill.loss_gram(a, Tensor(arr)).data) > 1e-6

    tea = Tensor(rand((1, 8, 4, 4), 20))
    stu = Tensor(rand((1, 8, 4, 4), 21), requires_grad=True)
    first = float(distill.loss_kd(tea, stu).data)
    for _ in range(200):
        loss = distill.loss_kd(tea, stu)
        T.backward(loss)
        stu = Tensor(stu.data - 0.1 * stu.grad, requires_grad=True)
    last = float(distill.loss_kd(tea, stu).data)
    reduced = last <= 0.5 * first

    verdict(2, zeros_ok and mse_inv and kl_inv and gram_sign and reduced,
            f"zero-at-alignment {zeros_ok}, invariances "
            f"{mse_inv and kl_inv and gram_sign}, "
            f"200-step KD {first:.3f}->{last:.3f} ({last / first:.1%})")


def test_criterion_3_matching_oracle():
    perm_ok = True
    for grid in range(2, 9):
        n = grid * grid
        perm = np.random.default_rng(grid).permutation(n)
        desc_a = np.eye(n, dtype=np.float32)
        desc_b = desc_a[np.argsort(perm)]
        matches, _, _, _ = match_from_descriptors(
            Tensor(desc_a), Tensor(desc_b), MatchThresholds(theta_c=0.3))
        found = {(m.cell_a, m.cell_b) for m in matches}
        expected = {(i, int(perm[i])) for i in range(n)}
        precision = len(found & expected) / max(len(found), 1)
        recall = len(found & expected) / len(expected)
        perm_ok = perm_ok and precision >= 0.99 and recall >= 0.99

    inj_ok = True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=(rng.integers(2, 12), rng.integers(2, 12)))
        pairs = matcher.mutual_argmax_pairs(scores)
        rows = [i for i, _ in pairs]
        cols = [j for _, j in pairs]
        inj_ok = inj_ok and len(set(rows)) == len(rows) \
            and len(set(cols)) == len(cols)

    verdict(3, perm_ok and inj_ok,
            f"planted permutations up to 8x8 {perm_ok}, "
            f"1000-matrix injectivity {inj_ok}")


def test_criterion_4_geometry_oracle():
    noise_free = 0
    for seed in range(100):
        rng = np.random.default_rng(seed + 500)
        h_gt = geo.sample_homography(DIMS, seed + 500)
        pts_a = rng.uniform(4, 59, size=(60, 2))
        pts_b = geo.apply_homography(h_gt, pts_a)
        h_est, _ = geo.ransac_fit(pts_a, pts_b, seed=seed)
        if geo.corner_reprojection_error(h_est, h_gt, DIMS) < 1e-3:
            noise_free += 1

    recovered = 0
    for seed in range(100):
        rng = np.random.default_rng(seed + 900)
        h_gt = geo.sample_homography(DIMS, seed + 900)
        pts_a = rng.uniform(4, 59, size=(80, 2))
        pts_b = geo.apply_homography(h_gt, pts_a)
        idx = rng.choice(80, 40, replace=False)
        pts_b[idx] = rng.uniform(0, 63, size=(40, 2))
        try:
            h_est, _ = geo.ransac_fit(pts_a, pts_b, seed=seed)
            if geo.corner_reprojection_error(h_est, h_gt, DIMS) < 1.0:
                recovered += 1
        except geo.EstimationError:
            pass

    auc_ok = True
    xs_grid = None
    for seed in range(100):
        rng = np.random.default_rng(seed)
        errors = rng.exponential(3.0, size=40)
        errors[rng.random(40) < 0.1] = np.inf
        for t in (5.0, 10.0):
            exact = geo.auc(errors, [t])[0]
            if xs_grid is None or len(xs_grid) != 400000:
                xs_grid = (np.arange(400000) + 0.5) / 400000
            recall = (errors[:, None] <= xs_grid * t).mean(axis=0)
            if abs(exact - float(recall.mean())) > 1e-4:
                auc_ok = False

    rng = np.random.default_rng(1)
    h_gt, e_gt, k_mat, _, _ = sd.sample_pose(DIMS, 21)
    pts_a = rng.uniform(4, 59, size=(30, 2))
    pts_b = geo.apply_homography(h_gt, pts_a)
    r_err, t_err = geo.pose_error(e_gt, e_gt, pts_a, pts_b, k_mat)
    pose_ok = r_err == 0.0 and t_err == 0.0

    verdict(4, noise_free == 100 and recovered >= 99 and auc_ok and pose_ok,
            f"noise-free {noise_free}/100, 50%-outlier recovery "
            f"{recovered}/100, AUC-oracle {auc_ok}, "
            f"pose_error(E,E)=({r_err},{t_err})")


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    pairs = sd.make_batch(8, DIMS, 42)
    t0 = time.time()
    model = DistillMatchModel(seed=0)
    history = trainer.train(model, pairs, trainer.TrainConfig(steps=300,
                                                              seed=1), out)
    elapsed = time.time() - t0
    return model, history, elapsed


def _auc10(model, held):
    arrays, gts = [], []
    for rec in held:
        res = model.match_pair(pair_from_arrays(rec.img_vis, rec.img_pir))
        arrays.append(np.array([[s.x_a, s.y_a, s.x_b, s.y_b, s.confidence]
                                for s in res.subpixel]).reshape(-1, 5))
        gts.append(rec.gt.homography)
    rep = report.evaluate_pairs(arrays, gts, DIMS, thresholds=[10.0])
    return rep.auc[0]


def test_criterion_5_toy_run(toy_run):
    model, history, elapsed = toy_run
    time_ok = elapsed < 900.0
    first = float(np.mean([h["loss_total"] for h in history[:10]]))
    last = float(np.mean([h["loss_total"] for h in history[-10:]]))
    loss_ok = last <= 0.7 * first
    modality_ok = all(h["modality_correct"] == 2 for h in history[-20:])

    held = sd.make_batch(50, DIMS, 9000)
    auc_trained = _auc10(model, held)
    auc_untrained = _auc10(DistillMatchModel(seed=0), held)
    auc_ok = auc_trained > auc_untrained

    verdict(5, time_ok and loss_ok and modality_ok and auc_ok,
            f"{elapsed:.0f}s (< 900s), loss {first:.2f}->{last:.2f} "
            f"({1 - last / first:.0%} drop), modality-100% {modality_ok}, "
            f"AUC@10px trained {auc_trained:.4f} > untrained "
            f"{auc_untrained:.4f}")


def test_criterion_6_subpixel_loss():
    rng = np.random.default_rng(0)
    h_mat, e_mat, k_mat, _, _ = sd.sample_pose(DIMS, 0)
    pts_a = rng.uniform(5, 58, size=(40, 2))
    pts_b = geo.apply_homography(h_mat, pts_a)
    k_inv = np.linalg.inv(k_mat)
    na = ((np.c_[pts_a, np.ones(40)] @ k_inv.T)[:, :2]).astype(np.float32)
    nb = ((np.c_[pts_b, np.ones(40)] @ k_inv.T)[:, :2]).astype(np.float32)
    exact = float(sup.loss_subpixel(Tensor(na), Tensor(nb), e_mat)[0].data)
    perturbed = float(sup.loss_subpixel(
        Tensor(na), Tensor(nb + np.float32(1.0 / k_mat[0, 0])),
        e_mat)[0].data)
    verdict(6, exact < 1e-10 and np.isfinite(perturbed) and perturbed > 0,
            f"exact {exact:.2e} (< 1e-10), 1-px perturbation {perturbed:.2e} "
            f"(finite, nonzero)")


def test_criterion_7_determinism(tmp_path):
    ds_ok = True
    for sub in ("d1", "d2"):
        sd.save_dataset(tmp_path / sub, sd.make_batch(2, DIMS, 5),
                        {"seed": 5})
    for pair in ("pair_0000", "pair_0001"):
        for f in ("vis.tensor", "pir.tensor", "gt.json"):
            ds_ok = ds_ok and (tmp_path / "d1" / pair / f).read_bytes() == \
                (tmp_path / "d2" / pair / f).read_bytes()

    ckpt_ok = True
    pairs = sd.make_batch(2, DIMS, 7)
    for sub in ("r1", "r2"):
        trainer.train(DistillMatchModel(seed=0), pairs,
                      trainer.TrainConfig(steps=5, seed=3), tmp_path / sub)
    c1, c2 = tmp_path / "r1" / "checkpoint", tmp_path / "r2" / "checkpoint"
    for name in sorted(f.name for f in c1.iterdir()):
        ckpt_ok = ckpt_ok and (c1 / name).read_bytes() == \
            (c2 / name).read_bytes()
    metrics_ok = (tmp_path / "r1" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "r2" / "metrics.jsonl").read_bytes()

    rep_ok = True
    rng = np.random.default_rng(11)
    h_mat = geo.sample_homography(DIMS, 11)
    pts_a = rng.uniform(6, 57, size=(20, 2))
    arr = np.c_[pts_a, geo.apply_homography(h_mat, pts_a), np.ones(20)]
    for sub in ("rep1.json", "rep2.json"):
        rep = report.evaluate_pairs([arr], [h_mat], DIMS)
        report.write_report(tmp_path / sub, rep)
    rep_ok = (tmp_path / "rep1.json").read_bytes() == \
        (tmp_path / "rep2.json").read_bytes()

    verdict(7, ds_ok and ckpt_ok and metrics_ok and rep_ok,
            f"datasets {ds_ok}, checkpoints {ckpt_ok}, metrics {metrics_ok}, "
            f"reports {rep_ok}")


def test_criterion_8_format_roundtrips(tmp_path):
    tensors_ok = True
    for i, shape in enumerate([(), (3,), (2, 3, 4), (1, 2, 3, 4, 5)]):
        arr = rand(shape, i)
        tensorio.write_dmt(tmp_path / f"t{i}.tensor", arr)
        back = tensorio.read_dmt(tmp_path / f"t{i}.tensor")
        tensors_ok = tensors_ok and back.shape == arr.shape \
            and np.array_equal(back, arr)

    ms = [matcher.SubpixelMatch(1.25, 2.5, 3.75, 4.0, 0.875),
          matcher.SubpixelMatch(0.0, 63.0, 31.5, 16.25, 1.0)]
    matcher.write_matches_text(tmp_path / "m.txt", ms)
    matcher.write_matches_binary(tmp_path / "m.bin", ms)
    t_back = matcher.read_matches_text(tmp_path / "m.txt")
    b_back = matcher.read_matches_binary(tmp_path / "m.bin")
    match_ok = t_back == ms and b_back == ms

    model = DistillMatchModel(seed=2)
    trainer.save_model(tmp_path / "ckpt", model)
    loaded = trainer.load_model(tmp_path / "ckpt")
    ckpt_ok = all(np.array_equal(loaded.named_parameters()[n].data, p.data)
                  for n, p in model.named_parameters().items())

    rep = report.MetricReport([3.0, 10.0], [0.5, 0.75], 12, 1.5,
                              [0.3, float("inf"), 2.0])
    report.write_report(tmp_path / "rep.json", rep)
    back = report.read_report(tmp_path / "rep.json")
    rep_ok = (back.thresholds == rep.thresholds and back.auc == rep.auc
              and back.ncm == rep.ncm and back.rmse == rep.rmse
              and back.per_pair_errors == rep.per_pair_errors)

    verdict(8, tensors_ok and match_ok and ckpt_ok and rep_ok,
            f"tensors {tensors_ok}, matches {match_ok}, checkpoints "
            f"{ckpt_ok}, reports {rep_ok}")
