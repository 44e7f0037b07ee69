"""Command-line interface: exit codes, JSON mode, config-file precedence,
and the gen-data -> match -> eval flow with GT and shuffled matches."""

import json

import numpy as np
import pytest

from distillmatch import cli
from distillmatch import geometry as geo
from distillmatch import matcher as matcher_mod
from distillmatch import synthdata as sd


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["gen-data", "--out", str(path), "--n", "3",
                     "--seed", "11"]) == 0
    return path


class TestGenData:
    def test_deterministic(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _ = run(capsys, "gen-data", "--out",
                          str(tmp_path / sub), "--n", "2", "--seed", "5")
            assert code == 0
        for pair in ("pair_0000", "pair_0001"):
            for f in ("vis.tensor", "pir.tensor", "gt.json"):
                assert (tmp_path / "a" / pair / f).read_bytes() == \
                    (tmp_path / "b" / pair / f).read_bytes()

    def test_bad_dims_exit_1(self, tmp_path, capsys):
        code, _ = run(capsys, "gen-data", "--out", str(tmp_path / "x"),
                      "--dims", "20x20")
        assert code == 1

    def test_bad_texture_rejected(self, tmp_path, capsys):
        # argparse choice validation rejects before the command runs
        with pytest.raises(SystemExit):
            cli.main(["gen-data", "--out", str(tmp_path / "x"),
                      "--texture", "plaid"])

    def test_json_single_document(self, tmp_path, capsys):
        code, out = run(capsys, "gen-data", "--out", str(tmp_path / "x"),
                        "--n", "1", "--json")
        assert code == 0
        doc = json.loads(out)  # raises if stdout is not one JSON document
        assert doc["pairs"] == 1


class TestMatch:
    def test_match_writes_consistent_files(self, dataset, tmp_path, capsys):
        out = tmp_path / "matches"
        code, text = run(capsys, "match", "--dataset", str(dataset),
                         "--out", str(out), "--json")
        assert code == 0
        doc = json.loads(text)
        for row in doc["pairs"]:
            pdir = out / row["pair"]
            coarse = matcher_mod.read_matches_text(pdir / "matches_coarse.txt")
            fine = matcher_mod.read_matches_text(pdir / "matches_fine.txt")
            sub = matcher_mod.read_matches_text(pdir / "matches_sub.txt")
            sub_bin = matcher_mod.read_matches_binary(pdir / "matches_sub.bin")
            assert len(coarse) == row["coarse"]
            assert len(fine) == row["fine"] == row["subpixel"] == len(sub)
            assert len(sub_bin) == len(sub)

    def test_missing_dataset_exit_1(self, tmp_path, capsys):
        code, _ = run(capsys, "match", "--dataset",
                      str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
        assert code == 1


class TestEval:
    def write_matches(self, dataset, out, shuffle=False):
        pairs, manifest = sd.load_dataset(dataset)
        rng = np.random.default_rng(0)
        for name, rec in zip(manifest["pairs"], pairs):
            pdir = out / name
            pdir.mkdir(parents=True, exist_ok=True)
            pts_a = rng.uniform(6, 57, size=(30, 2))
            pts_b = geo.apply_homography(rec.gt.homography, pts_a)
            if shuffle:
                pts_b = pts_b[rng.permutation(30)]
            ms = [matcher_mod.SubpixelMatch(*a, *b, 1.0)
                  for a, b in zip(pts_a, pts_b)]
            matcher_mod.write_matches_text(pdir / "matches_sub.txt", ms)

    def test_gt_matches_give_full_auc(self, dataset, tmp_path, capsys):
        mdir = tmp_path / "gtm"
        self.write_matches(dataset, mdir)
        code, text = run(capsys, "eval", "--matches", str(mdir),
                         "--dataset", str(dataset),
                         "--out", str(tmp_path / "rep"), "--json")
        assert code == 0
        doc = json.loads(text)
        assert doc["auc"][-1] > 0.999
        assert doc["ncm"] == 90
        assert (tmp_path / "rep" / "report.json").exists()
        assert (tmp_path / "rep" / "cumulative_error.svg").exists()

    def test_shuffled_matches_score_zero(self, dataset, tmp_path, capsys):
        mdir = tmp_path / "shuf"
        self.write_matches(dataset, mdir, shuffle=True)
        code, text = run(capsys, "eval", "--matches", str(mdir),
                         "--dataset", str(dataset),
                         "--out", str(tmp_path / "rep2"), "--json")
        assert code == 0
        doc = json.loads(text)
        # a permutation leaves a few near-fixed points; far below the 90
        # correct matches the unshuffled set yields
        assert doc["ncm"] <= 15

    def test_missing_matches_exit_1(self, dataset, tmp_path, capsys):
        code, _ = run(capsys, "eval", "--matches", str(tmp_path / "empty"),
                      "--dataset", str(dataset),
                      "--out", str(tmp_path / "rep3"))
        assert code == 1


class TestConfigFile:
    def test_file_fills_unset_flags(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nn = 2\nseed = 9\n")
        code, out = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                        "--config", str(cfg), "--json")
        assert code == 0
        doc = json.loads(out)
        assert doc["config"]["n"] == 2 and doc["config"]["seed"] == 9

    def test_explicit_flag_wins(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("n = 2\n")
        code, out = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                        "--config", str(cfg), "--n", "1", "--json")
        assert code == 0
        assert json.loads(out)["config"]["n"] == 1

    def test_unknown_key_exit_1(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("bogus = 1\n")
        code, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"),
                      "--config", str(cfg))
        assert code == 1


class TestDistillCheck:
    def test_reports_component_losses(self, capsys):
        code, out = run(capsys, "distill-check", "--json")
        assert code == 0
        doc = json.loads(out)
        for key in ("mse", "gram", "kl", "kd"):
            assert key in doc and np.isfinite(doc[key])
        assert doc["kd"] > 0


class TestSelftest:
    def test_selftest_passes(self, capsys):
        code, out = run(capsys, "selftest")
        assert code == 0
        assert "FAIL" not in out
        assert "PASS" in out
