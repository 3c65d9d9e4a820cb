#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json

import numpy as np
import pytest

from app.core.errors import FormatError, InvalidBox
from app.services import formats
from app.services.features import RasterImage
from app.services.flowfield import FlowField
from app.services.geometry import Box
from app.services.matching import MatchEntry, MatchSet
from app.services.tps import GtCorrespondence, KeypointPair
from tests.conftest import make_set, random_boxes


def write_manifest(path, **overrides):
    data = {"image": "", "width": 64, "height": 48, "descriptor_id": "test",
            "boxes": [[0, 0, 10, 10], [5, 5, 20, 10]], "features": [[1, 0], [0, 1]]}
    data.update(overrides)
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestImages:
    def test_gray_round_trip(self, tmp_path, rng):
        img = RasterImage.from_array(rng.integers(0, 256, size=(7, 11)))
        path = str(tmp_path / "a.pgm")
        formats.write_image(path, img)
        assert open(path, "rb").read(2) == b"P5"
        back = formats.read_image(path)
        assert (back.width, back.height, back.channels) == (11, 7, 1)
        assert np.array_equal(back.pixels, img.pixels)

    def test_rgb_round_trip(self, tmp_path, rng):
        img = RasterImage.from_array(rng.integers(0, 256, size=(5, 6, 3)))
        path = str(tmp_path / "a.ppm")
        formats.write_image(path, img)
        assert open(path, "rb").read(2) == b"P6"
        assert np.array_equal(formats.read_image(path).pixels, img.pixels)

    def test_garbage(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"not an image")
        with pytest.raises(FormatError):
            formats.read_image(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            formats.read_image(str(tmp_path / "none.pgm"))


class TestPfft:
    def test_round_trip(self, tmp_path, rng):
        feats = rng.normal(size=(5, 3)).astype(np.float32)
        path = str(tmp_path / "f.pfft")
        formats.write_pfft(path, feats)
        raw = open(path, "rb").read()
        assert raw[:4] == b"PFFT"
        assert len(raw) == 12 + 5 * 3 * 4
        back = formats.read_pfft(path)
        assert back.dtype == np.float64
        assert np.array_equal(back, feats.astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.pfft"
        path.write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError):
            formats.read_pfft(str(path))

    def test_truncated(self, tmp_path, rng):
        path = str(tmp_path / "f.pfft")
        formats.write_pfft(path, rng.normal(size=(4, 4)))
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-4])
        with pytest.raises(FormatError):
            formats.read_pfft(path)


class TestProposals:
    def test_inline_round_trip(self, tmp_path, rng):
        R = make_set(random_boxes(rng, 6), rng.normal(size=(6, 4)), scores=rng.random(6))
        path = str(tmp_path / "p.json")
        formats.save_proposals(path, R)
        back = formats.load_proposals(path)
        assert np.array_equal(back.boxes, R.boxes)
        assert np.array_equal(back.features, R.features)
        assert np.array_equal(back.scores, R.scores)
        assert back.descriptor_id == "test"

    def test_sidecar(self, tmp_path, rng):
        R = make_set(random_boxes(rng, 4), rng.normal(size=(4, 8)).astype(np.float32))
        path = str(tmp_path / "p.json")
        formats.save_proposals(path, R, feature_file="p.pfft")
        assert (tmp_path / "p.pfft").exists()
        assert "features" not in json.loads((tmp_path / "p.json").read_text(encoding="utf-8"))
        assert np.array_equal(formats.load_proposals(path).features, R.features)

    def test_invalid_box_reports_index(self, tmp_path):
        path = write_manifest(tmp_path / "p.json", boxes=[[0, 0, 10, 10], [0, 0, -1, 5]])
        with pytest.raises(InvalidBox, match=r"boxes\[1\]"):
            formats.load_proposals(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"width": 10, "height": 10, "boxes": []}), encoding="utf-8")
        with pytest.raises(FormatError):
            formats.load_proposals(str(path))

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('{\n"width": 10,\n oops\n}', encoding="utf-8")
        with pytest.raises(FormatError, match=r"p\.json:3"):
            formats.load_proposals(str(path))

    def test_not_utf8(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_bytes(b"\xff\xfe{\x00\"\x00w\x00")
        with pytest.raises(FormatError, match="UTF-8"):
            formats.load_proposals(str(path))

    def test_feature_count_mismatch(self, tmp_path):
        path = write_manifest(tmp_path / "p.json", features=[[1, 0]])
        with pytest.raises(FormatError):
            formats.load_proposals(path)

    def test_no_features(self, tmp_path):
        path = write_manifest(tmp_path / "p.json", features=None)
        with pytest.raises(FormatError):
            formats.load_proposals(path)

    def test_hog_from_image(self, tmp_path, rng):
        formats.write_image(str(tmp_path / "img.pgm"), RasterImage.from_array(rng.integers(0, 256, size=(48, 64))))
        path = write_manifest(tmp_path / "p.json", image="img.pgm", descriptor_id="hog", features=None)
        R = formats.load_proposals(path)
        assert R.descriptor_id == "hog"
        assert R.features.shape == (2, 1764)
        assert R.image_path == str(tmp_path / "img.pgm")


class TestCsv:
    def test_matches_round_trip(self, tmp_path):
        matches = MatchSet([MatchEntry(0, 3, 0.1 + 0.2), MatchEntry(1, 0, 1e-300), MatchEntry(2, 2, 0.0)])
        path = str(tmp_path / "m.csv")
        formats.write_matches(path, matches)
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "src_id,dst_id,score"
        assert lines[1] == "0,3,0.30000000000000004"
        assert formats.read_matches(path).entries == matches.entries

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c\n0,0,1\n", encoding="utf-8")
        with pytest.raises(FormatError, match=":1:"):
            formats.read_matches(str(path))

    def test_header_not_utf8(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_bytes(b"\xff\xfesrc_id,dst_id,score\n")
        with pytest.raises(FormatError, match="UTF-8"):
            formats.read_matches(str(path))

    def test_bad_row_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("src_id,dst_id,score\n0,0,1\n1,x,0.5\n", encoding="utf-8")
        with pytest.raises(FormatError, match=":3:"):
            formats.read_matches(str(path))

    def test_gt_round_trip(self, tmp_path):
        gts = [GtCorrespondence(4, Box(1.5, 2.25, 3.0, 4.125)), GtCorrespondence(9, Box(0, 0, 1, 1))]
        path = str(tmp_path / "gt.csv")
        formats.write_gt(path, gts)
        assert formats.read_gt(path) == gts

    def test_truth_round_trip(self, tmp_path):
        path = str(tmp_path / "truth.csv")
        formats.write_truth(path, {2: 5, 0: 1})
        assert formats.read_truth(path) == {0: 1, 2: 5}

    def test_curve(self, tmp_path):
        path = str(tmp_path / "miou.csv")
        formats.write_curve_csv(path, "k", np.array([1, 2, 3]), np.array([1.0, 0.5, 0.25]))
        assert open(path, encoding="utf-8").read().splitlines()[1] == "1,1.0"
        xs, ys = formats.read_curve_csv(path)
        assert xs.tolist() == [1, 2, 3]
        assert ys.tolist() == [1.0, 0.5, 0.25]

    def test_curve_svg(self, tmp_path):
        path = str(tmp_path / "pcr.svg")
        formats.write_curve_svg(path, "tau", np.linspace(0.01, 1, 10), np.linspace(0, 1, 10), "pcr")
        assert "<svg" in open(path, encoding="utf-8").read()


class TestFlo:
    def test_round_trip(self, tmp_path, rng):
        flow = FlowField.zeros(7, 5)
        flow.u[:] = rng.normal(size=(5, 7)).astype(np.float32)
        flow.v[:] = rng.normal(size=(5, 7)).astype(np.float32)
        path = str(tmp_path / "f.flo")
        formats.write_flo(path, flow)
        raw = open(path, "rb").read()
        assert raw[:4] == b"PIEH"
        assert len(raw) == 12 + 7 * 5 * 8
        back = formats.read_flo(path)
        assert (back.width, back.height) == (7, 5)
        assert np.array_equal(back.u, flow.u)
        assert np.array_equal(back.v, flow.v)
        assert np.all(back.valid)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.flo"
        path.write_bytes(bytes(20))
        with pytest.raises(FormatError):
            formats.read_flo(str(path))

    def test_short(self, tmp_path):
        path = str(tmp_path / "f.flo")
        formats.write_flo(path, FlowField.zeros(4, 4))
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-8])
        with pytest.raises(FormatError):
            formats.read_flo(path)


class TestKeypoints:
    def test_round_trip(self, tmp_path):
        pairs = [KeypointPair((1.0, 2.0), (3.0, 4.5)), KeypointPair((5.0, 6.0), (7.0, 8.0))]
        path = str(tmp_path / "kp.json")
        formats.save_keypoints(path, pairs, Box(0, 0, 10, 10), Box(1, 1, 12, 12), "a.pgm", "b.pgm")
        kp = formats.load_keypoints(path)
        assert kp.keypoint_pairs == pairs
        assert kp.src_box == Box(0, 0, 10, 10)
        assert kp.dst_box == Box(1, 1, 12, 12)
        assert kp.dst_image == "b.pgm"

    def test_bad_pair(self, tmp_path):
        path = tmp_path / "kp.json"
        path.write_text(json.dumps({"pairs": [[1, 2, 3]], "src_bbox": [0, 0, 1, 1], "dst_bbox": [0, 0, 1, 1]}),
                        encoding="utf-8")
        with pytest.raises(FormatError):
            formats.load_keypoints(str(path))
