#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import csv
import os

import numpy as np
import openpyxl
import pytest

from app.cli import main
from app.services import formats


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    values = dict(line.split("=", 1) for line in captured.out.splitlines() if "=" in line)
    return code, values, captured.err


@pytest.fixture
def identity_pair(tmp_path, capsys):
    out = tmp_path / "identity"
    code, values, _ = run(capsys, "synth", "--out", out, "--n-clutter", 0, "--noise", 0, "--seed", 3)
    assert code == 0
    return values


@pytest.fixture
def translation_pair(tmp_path, capsys):
    out = tmp_path / "translation"
    code, values, _ = run(capsys, "synth", "--out", out, "--n-clutter", 0, "--noise", 0, "--seed", 5,
                          "--transform", 1, 0, 12, 0, 1, -8)
    assert code == 0
    return values


class TestSynth:
    def test_outputs(self, identity_pair):
        for key in ("image1", "image2", "proposals1", "proposals2", "keypoints", "truth"):
            assert os.path.exists(identity_pair[key])
        assert os.path.exists(identity_pair["proposals1"].replace(".json", ".pfft"))
        assert formats.read_truth(identity_pair["truth"]) == {i: i for i in range(30)}

    def test_suite_deterministic(self, tmp_path, capsys):
        run(capsys, "synth", "--suite", "--seed", 7, "--out", tmp_path / "a")
        run(capsys, "synth", "--suite", "--seed", 7, "--out", tmp_path / "b")
        for name in ("proposals1.pfft", "proposals2.pfft", "image2.pgm", "keypoints.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


    def test_decoys_exceeding_clutter(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "d", "--n-clutter", 3, "--n-decoys", 4)
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error=ConfigError")

    def test_decoys_copy_features(self, tmp_path, capsys):
        code, values, _ = run(capsys, "synth", "--out", tmp_path / "d", "--n-clutter", 4, "--n-decoys", 4,
                              "--noise", 0)
        assert code == 0
        feats = formats.load_proposals(values["proposals2"]).features
        for c in range(4):
            assert np.any(np.all(feats[:30] == feats[30 + c], axis=1))


class TestMatch:
    def test_identity_flow_is_zero(self, tmp_path, capsys, identity_pair):
        matches = tmp_path / "m.csv"
        code, values, _ = run(capsys, "match", identity_pair["proposals1"], identity_pair["proposals2"],
                              "--out", matches, "--matcher", "nam")
        assert code == 0
        assert values["count"] == "30"
        assert [e.dst_id for e in formats.read_matches(str(matches)).entries] == list(range(30))

        flo = tmp_path / "f.flo"
        code, values, _ = run(capsys, "flow", identity_pair["proposals1"], identity_pair["proposals2"], matches,
                              "--out", flo)
        assert code == 0
        assert (values["width"], values["height"]) == ("200", "160")
        flow = formats.read_flo(str(flo))
        assert np.max(np.abs(flow.u)) < 1e-9
        assert np.max(np.abs(flow.v)) < 1e-9

    @pytest.mark.parametrize("matcher", ["nam", "phm", "lom"])
    def test_byte_identical_reruns(self, tmp_path, capsys, identity_pair, matcher):
        outputs = []
        for name in ("a.csv", "b.csv"):
            run(capsys, "match", identity_pair["proposals1"], identity_pair["proposals2"],
                "--out", tmp_path / name, "--matcher", matcher, "--threads", 2)
            outputs.append((tmp_path / name).read_bytes())
        assert outputs[0] == outputs[1]

    def test_max_proposals(self, tmp_path, capsys, identity_pair):
        out = tmp_path / "m.csv"
        code, values, _ = run(capsys, "match", identity_pair["proposals1"], identity_pair["proposals2"],
                              "--out", out, "--max-proposals", 10)
        assert code == 0
        with open(out, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 11
        assert all(int(r[1]) < 10 for r in rows[1:])

    def test_missing_file(self, tmp_path, capsys):
        code, values, err = run(capsys, "match", tmp_path / "none.json", tmp_path / "none.json",
                                "--out", tmp_path / "m.csv")
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error=FileNotFound")
        assert values == {}

    def test_directory_as_manifest(self, tmp_path, capsys, identity_pair):
        code, values, err = run(capsys, "match", tmp_path, identity_pair["proposals2"],
                                "--out", tmp_path / "m.csv")
        assert code == 1
        last = err.strip().splitlines()[-1]
        assert last.startswith("error=IO message=")
        assert "Traceback" not in err
        assert values == {}

    def test_manifest_not_utf8(self, tmp_path, capsys, identity_pair):
        bad = tmp_path / "bad.json"
        bad.write_bytes(b"\xff\xfe\x00\x01garbage")
        code, _, err = run(capsys, "match", bad, identity_pair["proposals2"], "--out", tmp_path / "m.csv")
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error=FormatError")

    def test_bad_option(self, tmp_path, capsys, identity_pair):
        code, _, err = run(capsys, "match", identity_pair["proposals1"], identity_pair["proposals2"],
                           "--out", tmp_path / "m.csv", "--max-proposals", 0)
        assert code == 1
        assert "error=ConfigError" in err

    def test_chi2_on_signed_features(self, tmp_path, capsys, identity_pair):
        code, _, err = run(capsys, "match", identity_pair["proposals1"], identity_pair["proposals2"],
                           "--out", tmp_path / "m.csv", "--similarity", "chi2_kernel")
        assert code == 1
        assert "error=NegativeFeature" in err


class TestPipeline:
    def test_translation_end_to_end(self, tmp_path, capsys, translation_pair):
        p1, p2, kp = translation_pair["proposals1"], translation_pair["proposals2"], translation_pair["keypoints"]
        matches, flo, warped = tmp_path / "m.csv", tmp_path / "f.flo", tmp_path / "warp.pgm"
        assert run(capsys, "match", p1, p2, "--out", matches)[0] == 0
        code, values, _ = run(capsys, "flow", p1, p2, matches, "--out", flo, "--warp", warped)
        assert code == 0
        assert values["warped"] == str(warped)
        assert formats.read_image(str(warped)).width == 200

        code, values, _ = run(capsys, "eval-pck", flo, kp)
        assert code == 0
        assert float(values["pck"]) == 1.0
        assert values["total"] == "15"

        gt = tmp_path / "gt.csv"
        code, values, _ = run(capsys, "gtgen", kp, p1, "--out", gt)
        assert code == 0
        assert int(values["count"]) == 30

        code, values, _ = run(capsys, "eval-pcr", matches, p2, gt, "--out", tmp_path / "curves")
        assert code == 0
        assert float(values["pcr_auc"]) == pytest.approx(1.0, abs=0.02)
        assert (tmp_path / "curves" / "pcr.csv").exists()
        assert (tmp_path / "curves" / "pcr.svg").exists()

        code, values, _ = run(capsys, "eval-miou", matches, p2, gt, "--out", tmp_path / "curves")
        assert code == 0
        assert float(values["miou_auc"]) > 0.9

        code, values, _ = run(capsys, "leave-n-out", kp, "--n", 2, "--trials", 20)
        assert code == 0
        assert float(values["pck"]) == pytest.approx(1.0)

    def test_guided_flow(self, tmp_path, capsys, translation_pair):
        p1, p2 = translation_pair["proposals1"], translation_pair["proposals2"]
        matches, flo = tmp_path / "m.csv", tmp_path / "f.flo"
        run(capsys, "match", p1, p2, "--out", matches, "--matcher", "nam", "--max-proposals", 10)
        code, _, _ = run(capsys, "flow", p1, p2, matches, "--out", flo, "--guide", translation_pair["image1"],
                         "--max-proposals", 10)
        assert code == 0
        flow = formats.read_flo(str(flo))
        np.testing.assert_allclose(flow.u, 12.0, atol=1e-4)
        np.testing.assert_allclose(flow.v, -8.0, atol=1e-4)

    def test_match_ids_out_of_range(self, tmp_path, capsys, identity_pair):
        matches = tmp_path / "m.csv"
        matches.write_text("src_id,dst_id,score\n0,99,1.0\n", encoding="utf-8")
        code, _, err = run(capsys, "flow", identity_pair["proposals1"], identity_pair["proposals2"], matches,
                           "--out", tmp_path / "f.flo")
        assert code == 1
        assert "error=FormatError" in err

    def test_leave_n_out_too_many(self, capsys, identity_pair):
        code, _, err = run(capsys, "leave-n-out", identity_pair["keypoints"], "--n", 13)
        assert code == 1
        assert "error=TooFewKeypoints" in err


class TestSlidingWindows:
    def test_manifest_with_hog(self, tmp_path, capsys, identity_pair):
        out = tmp_path / "windows" / "p.json"
        code, values, _ = run(capsys, "sliding-windows", identity_pair["image1"], "--out", out,
                              "--scales", 60, 120, "--aspects", 1)
        assert code == 0
        R = formats.load_proposals(str(out))
        assert len(R) == int(values["count"])
        assert R.descriptor_id == "hog"

        code, values, _ = run(capsys, "match", out, out, "--out", tmp_path / "m.csv", "--matcher", "nam")
        assert code == 0

    def test_bad_stride(self, tmp_path, capsys, identity_pair):
        code, _, err = run(capsys, "sliding-windows", identity_pair["image1"], "--out", tmp_path / "p.json",
                           "--stride-frac", 2)
        assert code == 1
        assert "error=ConfigError" in err


class TestBenchmark:
    def test_two_seeds(self, tmp_path, capsys):
        code, values, _ = run(capsys, "benchmark", "--seeds", 2, "--out", tmp_path, "--threads", 2)
        assert code == 0
        for name in ("nam", "phm", "lom"):
            assert 0 <= float(values[f"{name}_mean_correct"]) <= 30
        with open(values["csv"], encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [r["seed"] for r in rows] == ["0", "1"]
        wb = openpyxl.load_workbook(values["xlsx"])
        assert wb.sheetnames == ["明细", "汇总", "参数"]
        assert wb["明细"].max_row == 3

    def test_zero_seeds(self, tmp_path, capsys):
        code, _, err = run(capsys, "benchmark", "--seeds", 0, "--out", tmp_path)
        assert code == 1
        assert "error=ConfigError" in err
