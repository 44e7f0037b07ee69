"""Command-line entry point.

Subcommands: gen-data, train, match, eval, distill-check, selftest.
Every command is deterministic under --seed. Exit codes: 0 success,
1 invalid input, 2 internal failure. With --json, stdout is a single
JSON document; otherwise it is human-readable text. A plain key=value
config file can seed any command's flags; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import distill, geometry, pipeline, report, synthdata, tensorio, trainer
from . import matcher as matcher_mod
from . import tensor as T
from .feature_nets import ModelConfig
from .matcher import MatchThresholds


class InvalidInput(ValueError):
    pass


def _load_config_file(path) -> dict:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInput(f"{path}:{ln}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _apply_config_file(args):
    """key=value file values fill in flags the user did not set."""
    if not getattr(args, "config", None):
        return args
    values = _load_config_file(args.config)
    defaults = {a.dest: a.default for a in args._subparser._actions}
    for key, raw in values.items():
        if key not in defaults:
            raise InvalidInput(f"unknown config key: {key}")
        if getattr(args, key) == defaults[key]:  # flag not given: file wins
            typ = type(defaults[key]) if defaults[key] is not None else str
            setattr(args, key, typ(raw) if typ is not bool
                    else raw.lower() in ("1", "true", "yes"))
    return args


def _emit(args, payload: dict, text_lines):
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _parse_dims(value) -> tuple:
    parts = [int(v) for v in str(value).lower().replace("x", ",").split(",")]
    if len(parts) == 1:
        parts = parts * 2
    h, w = parts
    if h < 32 or w < 32 or h % 8 or w % 8:
        raise InvalidInput(
            f"dims {h}x{w} invalid: images must be >= 32 px and divisible by 8")
    return h, w


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args):
    dims = _parse_dims(args.dims)
    if args.texture not in synthdata.TEXTURE_KINDS + ("all",):
        raise InvalidInput(f"unknown texture kind {args.texture!r}")
    kinds = (synthdata.TEXTURE_KINDS if args.texture == "all"
             else (args.texture,))
    pairs = synthdata.make_batch(args.n, dims, args.seed, kinds=kinds,
                                 mode=args.mode)
    config = {"n": args.n, "dims": list(dims), "seed": args.seed,
              "texture": args.texture, "mode": args.mode}
    try:
        synthdata.save_dataset(args.out, pairs, config)
    except OSError as exc:
        raise InvalidInput(f"cannot write dataset to {args.out}: {exc}")
    payload = {"out": str(args.out), "pairs": args.n, "config": config}
    _emit(args, payload, [f"wrote {args.n} pairs to {args.out}"])
    return 0


def cmd_train(args):
    dataset = Path(args.dataset)
    if not (dataset / "manifest.json").exists():
        raise InvalidInput(f"no dataset manifest under {dataset}")
    pairs, _ = synthdata.load_dataset(dataset)
    model = pipeline.DistillMatchModel(
        ModelConfig(width_factor=args.width_factor), seed=args.seed)
    cfg = trainer.TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    history = trainer.train(model, pairs, cfg, args.out)
    report.plot_loss_curves(Path(args.out) / "loss_curves.svg", history)
    last = history[-1] if history else {}
    payload = {"out": str(args.out), "steps": args.steps,
               "final": last}
    _emit(args, payload,
          [f"trained {args.steps} steps; checkpoint at {args.out}/checkpoint",
           f"final total loss: {last.get('loss_total', 'n/a')}"])
    return 0


def _load_model_arg(args):
    if args.ckpt:
        if not (Path(args.ckpt) / "manifest.json").exists():
            raise InvalidInput(f"no checkpoint manifest under {args.ckpt}")
        try:
            return trainer.load_model(args.ckpt)
        except (KeyError, ValueError, tensorio.FormatError) as exc:
            raise InvalidInput(f"checkpoint mismatch: {exc}")
    return pipeline.DistillMatchModel(ModelConfig(), seed=args.seed)


def cmd_match(args):
    model = _load_model_arg(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs, manifest = synthdata.load_dataset(args.dataset)
    th = MatchThresholds(theta_c=args.theta_c, theta_f=args.theta_f)
    rows = []
    for name, rec in zip(manifest["pairs"], pairs):
        t0 = time.time()
        pair = pipeline.pair_from_arrays(rec.img_vis, rec.img_pir)
        res = model.match_pair(pair, th)
        elapsed = time.time() - t0
        pdir = out_dir / name
        pdir.mkdir(exist_ok=True)
        grid_w = res.grid_a[1] if res.grid_a else 1
        grid_wb = res.grid_b[1] if res.grid_b else 1
        coarse_pts = [matcher_mod.SubpixelMatch(
            *matcher_mod.cell_center_px(m.cell_a, grid_w),
            *matcher_mod.cell_center_px(m.cell_b, grid_wb),
            m.confidence) for m in res.coarse]
        fine_pts = [matcher_mod.SubpixelMatch(*f.pt_a, *f.pt_b, f.p_fine)
                    for f in res.fine]
        matcher_mod.write_matches_text(pdir / "matches_coarse.txt", coarse_pts)
        matcher_mod.write_matches_text(pdir / "matches_fine.txt", fine_pts)
        matcher_mod.write_matches_text(pdir / "matches_sub.txt", res.subpixel)
        matcher_mod.write_matches_binary(pdir / "matches_sub.bin", res.subpixel)
        rows.append({"pair": name, "coarse": len(res.coarse),
                     "fine": len(res.fine), "subpixel": len(res.subpixel),
                     "seconds": round(elapsed, 4)})
    payload = {"out": str(out_dir), "pairs": rows}
    _emit(args, payload,
          [f"{r['pair']}: coarse={r['coarse']} fine={r['fine']} "
           f"sub={r['subpixel']} ({r['seconds']}s)" for r in rows])
    return 0


def cmd_eval(args):
    pairs, manifest = synthdata.load_dataset(args.dataset)
    match_dir = Path(args.matches)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    names = manifest["pairs"]
    missing = [n for n in names
               if not (match_dir / n / "matches_sub.txt").exists()]
    if missing:
        raise InvalidInput(f"missing match files for pairs: {missing}")
    arrays, gts = [], []
    dims = None
    for name, rec in zip(names, pairs):
        matches = matcher_mod.read_matches_text(
            match_dir / name / "matches_sub.txt")
        arrays.append(matcher_mod.matches_to_array(matches))
        gts.append(rec.gt.homography)
        dims = rec.img_vis.shape[1:]
    rep = report.evaluate_pairs(arrays, gts, dims, thresholds, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_report(out_dir / "report.json", rep)
    report.plot_cumulative_errors(out_dir / "cumulative_error.svg",
                                  rep.per_pair_errors, thresholds)
    table = "  ".join(f"AUC@{t:g}px={a:.4f}"
                      for t, a in zip(rep.thresholds, rep.auc))
    _emit(args, rep.to_dict(),
          [table, f"NCM={rep.ncm} RMSE={rep.rmse}",
           f"report: {out_dir/'report.json'}"])
    return 0


def cmd_distill_check(args):
    model = _load_model_arg(args)
    rng_pairs = synthdata.make_batch(2, (64, 64), args.seed)
    vals = {"mse": 0.0, "gram": 0.0, "kl": 0.0}
    with T.no_grad():
        for rec in rng_pairs:
            pair = pipeline.pair_from_arrays(rec.img_vis, rec.img_pir)
            for img in (pair.img_a, pair.img_b):
                stu = model.student(img)
                tea = model.teacher(img).f
                vals["mse"] += float(distill.loss_mse(tea, stu).data)
                vals["gram"] += float(distill.loss_gram(tea, stu).data)
                vals["kl"] += float(distill.loss_kl(tea, stu).data)
    n = 2 * len(rng_pairs)
    vals = {k: v / n for k, v in vals.items()}
    w = distill.DistillWeights()
    vals["kd"] = w.alpha * vals["mse"] + w.beta * vals["gram"] + w.gamma * vals["kl"]
    _emit(args, vals, [f"L_MSE={vals['mse']:.6f}  L_Gram={vals['gram']:.6f}  "
                       f"L_KL={vals['kl']:.6f}  L_KD={vals['kd']:.6f}"])
    return 0


def cmd_selftest(args):
    """Fast wired-up sanity pass over every stage."""
    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            checks.append((name, False, f"{type(exc).__name__}: {exc}"))

    def _grad():
        rng = np.random.default_rng(args.seed)
        x = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32),
                     requires_grad=True)
        ok, err = T.finite_diff_check(
            lambda t: T.sum_(T.square(T.tanh(t))), x)
        assert ok, f"finite-difference mismatch {err}"

    def _formats():
        import tempfile
        arr = np.random.default_rng(args.seed).normal(
            size=(2, 3, 4)).astype(np.float32)
        path = Path(tempfile.mkdtemp()) / "t.dmt"
        tensorio.write_dmt(path, arr)
        assert np.array_equal(tensorio.read_dmt(path), arr)

    def _pipeline():
        rec = synthdata.make_pair((64, 64), args.seed)
        model = pipeline.DistillMatchModel(ModelConfig(), seed=args.seed)
        pair = pipeline.pair_from_arrays(rec.img_vis, rec.img_pir)
        out = model.forward_train(pair, rec.gt)
        assert np.isfinite(out.total.data)
        T.backward(out.total)

    def _geometry():
        h = geometry.sample_homography((64, 64), args.seed)
        pts = np.random.default_rng(args.seed).uniform(5, 58, (30, 2))
        est, mask = geometry.ransac_fit(
            pts, geometry.apply_homography(h, pts), seed=args.seed)
        err = geometry.corner_reprojection_error(est, h, (64, 64))
        assert err < 1e-3, f"corner error {err}"

    check("gradients", _grad)
    check("formats", _formats)
    check("geometry", _geometry)
    check("pipeline", _pipeline)
    payload = {"checks": [{"name": n, "ok": ok, "detail": d}
                          for n, ok, d in checks],
               "passed": all(ok for _, ok, _ in checks)}
    _emit(args, payload, [f"[{'PASS' if ok else 'FAIL'}] {n}" +
                          (f"  {d}" if d else "")
                          for n, ok, d in checks])
    return 0 if payload["passed"] else 2


# -- argument wiring ------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="distillmatch",
        description="multimodal image matching: data, training, matching, "
                    "evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.set_defaults(_subparser=sp)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--json", action="store_true",
                        help="emit a single JSON document on stdout")
        sp.add_argument("--config", default=None,
                        help="key=value config file; explicit flags win")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--dims", default="64x64")
    sp.add_argument("--texture", default="all",
                    choices=list(synthdata.TEXTURE_KINDS) + ["all"])
    sp.add_argument("--mode", default="homography",
                    choices=["homography", "pose"])
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train on a generated dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=6e-3)
    sp.add_argument("--width-factor", type=float, default=0.25,
                    dest="width_factor")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("match", help="match dataset pairs")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--theta-c", type=float, default=0.3, dest="theta_c")
    sp.add_argument("--theta-f", type=float, default=0.1, dest="theta_f")
    common(sp)
    sp.set_defaults(fn=cmd_match)

    sp = sub.add_parser("eval", help="evaluate match files against GT")
    sp.add_argument("--matches", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metric", default="homography",
                    choices=["homography", "pose", "ncm"])
    sp.add_argument("--thresholds", default="3,5,10")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("distill-check",
                        help="teacher/student alignment diagnostics")
    sp.add_argument("--ckpt", default=None)
    common(sp)
    sp.set_defaults(fn=cmd_distill_check)

    sp = sub.add_parser("selftest", help="fast end-to-end sanity checks")
    common(sp)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args)
        return args.fn(args)
    except (InvalidInput, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, T.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - contract: internal failure = 2
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
