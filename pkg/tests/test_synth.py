#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import dataclasses
import math

import numpy as np
import pytest

from app.core.errors import ConfigError
from app.services.evaluation import pcr
from app.services.features import SimilarityFn
from app.services.geometry import KernelParams, iou
from app.services.matching import appearance_table, hough_exact, match_nam
from app.services.synth import (
    SplitMix64,
    SynthConfig,
    default_scales,
    generate,
    score_against_truth,
    sliding_window_proposals,
    suite_config,
)
from app.services.tps import GtCorrespondence

SIM = SimilarityFn()


class TestSplitMix64:
    def test_reference_value(self):
        assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF

    def test_ranges(self):
        rng = SplitMix64(99)
        values = [rng.random() for _ in range(1000)]
        assert min(values) >= 0.0 and max(values) < 1.0
        assert all(0 <= rng.randint(7) < 7 for _ in range(200))
        assert sorted(rng.permutation(10).tolist()) == list(range(10))

    def test_normal_moments(self):
        samples = SplitMix64(5).normals(20000)
        assert abs(samples.mean()) < 0.05
        assert abs(samples.std() - 1.0) < 0.05


class TestConfig:
    def test_defaults(self):
        cfg = SynthConfig()
        assert cfg.image_size == (200, 160)
        assert cfg.n_objects * cfg.proposals_per_object == 30

    def test_suite(self):
        cfg = suite_config(4)
        total = cfg.n_objects * cfg.proposals_per_object + cfg.n_clutter
        assert cfg.n_clutter / total == pytest.approx(0.3, abs=0.01)
        assert cfg.feature_noise_sigma == 0.1
        assert cfg.seed == 4

    @pytest.mark.parametrize("kwargs", [
        {"feature_noise_sigma": -0.1},
        {"n_objects": 0},
        {"image_size": (0, 10)},
        {"global_transform": [[1, 0, 0], [2, 0, 0]]},
        {"global_transform": [[1, 0], [0, 1]]},
        {"geometric_jitter": {"trans_sigma": -1.0}},
        {"n_clutter": 2, "n_decoys": 3},
        {"n_decoys": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SynthConfig.build(**kwargs)

    def test_impossible_packing(self):
        with pytest.raises(ConfigError):
            generate(SynthConfig.build(image_size=(30, 30), n_objects=10))


class TestGenerate:
    def test_deterministic(self):
        a, b = generate(suite_config(1)), generate(suite_config(1))
        assert np.array_equal(a.image1.pixels, b.image1.pixels)
        assert np.array_equal(a.proposals1.features, b.proposals1.features)
        assert np.array_equal(a.proposals2.boxes, b.proposals2.boxes)
        assert a.keypoints == b.keypoints
        c = generate(suite_config(2))
        assert not np.array_equal(a.proposals1.boxes, c.proposals1.boxes)

    def test_layout(self):
        cfg = suite_config(0)
        pair = generate(cfg)
        n_true = cfg.n_objects * cfg.proposals_per_object
        assert len(pair.proposals1) == len(pair.proposals2) == n_true + cfg.n_clutter
        assert pair.true_match == {i: i for i in range(n_true)}
        assert len(pair.keypoints) == 5 * cfg.n_objects
        assert pair.image1.width == pair.image2.width == 200
        for box in pair.proposals1.boxes:
            assert box[0] >= 0 and box[1] >= 0
            assert box[0] + box[2] <= 200 + 1e-9 and box[1] + box[3] <= 160 + 1e-9

    def test_objects_separated(self):
        pair = generate(suite_config(3))
        objs = pair.object_boxes
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                assert iou(objs[i], objs[j]) == 0.0

    def test_keypoints_follow_transform(self):
        pair = generate(suite_config(0))
        A = pair.transform
        for kp in pair.keypoints:
            expected = A[:, :2] @ np.array(kp.src) + A[:, 2]
            np.testing.assert_allclose(kp.dst, expected, atol=1e-9)

    def test_identity_zero_noise(self, identity_config):
        pair = generate(identity_config)
        np.testing.assert_allclose(pair.proposals1.boxes, pair.proposals2.boxes, atol=1e-9)
        assert np.array_equal(pair.proposals1.features, pair.proposals2.features)
        matches = match_nam(pair.proposals1, pair.proposals2, SIM)
        assert matches.dst_ids.tolist() == list(range(len(pair.proposals1)))
        assert np.array_equal(pair.image1.pixels, pair.image2.pixels)

    def test_translation_geo_scores(self):
        cfg = SynthConfig.build(seed=8, feature_noise_sigma=0.0,
                                global_transform=[[1.0, 0.0, 10.0], [0.0, 1.0, -6.0]])
        pair = generate(cfg)
        table = appearance_table(pair.proposals1, pair.proposals2, SIM)
        geo = hough_exact(pair.proposals1, pair.proposals2, table, KernelParams(1.0, 0.05))
        n_true = len(pair.true_match)
        true_geo = np.array([geo[i, i] for i in range(n_true)])
        clutter_geo = np.concatenate([geo[n_true:, :].ravel(), geo[:, n_true:].ravel()])
        assert true_geo.min() > clutter_geo.max()

    def test_noise_degrades_monotonically(self):
        counts, pcr_half = [], []
        for sigma in (0.0, 0.05, 0.1, 0.2):
            pair = generate(SynthConfig.build(seed=6, feature_noise_sigma=sigma))
            matches = match_nam(pair.proposals1, pair.proposals2, SIM)
            counts.append(score_against_truth(matches, pair))
            gts = [GtCorrespondence(i, pair.proposals2.box(j)) for i, j in pair.true_match.items()]
            pcr_half.append(float(pcr(matches, pair.proposals2, gts, taus=[0.5]).values[0]))
        assert counts[0] == len(pair.true_match)
        assert pcr_half[0] == 1.0
        assert all(pcr_half[0] >= v for v in pcr_half[1:])
        for a, b in zip(counts, counts[1:]):
            assert b <= a + 1

    def test_default_clutter_independent_of_objects(self):
        pair = generate(SynthConfig.build(seed=9, feature_noise_sigma=0.0))
        n_true = len(pair.true_match)
        feats = pair.proposals2.features
        clutter, objects = feats[n_true:], feats[:n_true]
        cos = (clutter @ objects.T) / np.outer(np.linalg.norm(clutter, axis=1), np.linalg.norm(objects, axis=1))
        assert cos.shape == (13, n_true)
        assert np.abs(cos).max() < 0.9

    def test_decoys_copy_object_latents(self):
        pair = generate(SynthConfig.build(seed=9, feature_noise_sigma=0.0, n_decoys=5))
        n_true = len(pair.true_match)
        feats = pair.proposals2.features
        for c in range(13):
            copies = np.all(np.isclose(feats[:n_true], feats[n_true + c], atol=1e-12), axis=1)
            assert copies.any() == (c < 5)

    def test_suite_clutter_is_all_decoys(self):
        cfg = suite_config(0)
        assert cfg.n_decoys == cfg.n_clutter

    def test_true_flow(self):
        pair = generate(suite_config(0))
        u, v, mask = pair.true_flow()
        assert u.shape == v.shape == mask.shape == (160, 200)
        assert u[0, 0] == pytest.approx(12.0)
        assert v[0, 0] == pytest.approx(-8.0)
        assert np.any(mask)


class TestScoring:
    def test_truth_is_perfect(self):
        pair = generate(suite_config(0))
        assert score_against_truth(pair.truth_matches(), pair) == len(pair.true_match)

    def test_no_true_pairs(self):
        pair = generate(suite_config(0))
        empty = dataclasses.replace(pair, true_match={})
        assert score_against_truth(pair.truth_matches(), empty) == 0

    def test_oracle(self):
        pair = generate(suite_config(2))
        matches = match_nam(pair.proposals1, pair.proposals2, SIM)
        by_src = matches.as_dict()
        expected = sum(
            1 for i, j in pair.true_match.items()
            if iou(pair.proposals2.box(by_src[i].dst_id), pair.proposals2.box(j)) >= 0.5
        )
        assert score_against_truth(matches, pair) == expected

    def test_truth_matches_clutter_entries(self):
        pair = generate(suite_config(0))
        entries = pair.truth_matches().entries
        n_true = len(pair.true_match)
        assert all(e.score == 0.0 and e.dst_id == 0 for e in entries[n_true:])


class TestSlidingWindows:
    def test_whole_image(self):
        boxes = sliding_window_proposals((50, 40), scales=[1000], aspects=[1.0])
        assert len(boxes) == 1
        assert boxes[0].as_list() == [0.0, 0.0, 50.0, 40.0]

    def test_grid_count(self):
        boxes = sliding_window_proposals((100, 100), scales=[50], aspects=[1.0], stride_frac=0.5)
        assert len(boxes) == 9
        assert {(b.x, b.y) for b in boxes} == {(x, y) for x in (0, 25, 50) for y in (0, 25, 50)}

    def test_default_deterministic(self):
        a = sliding_window_proposals((200, 160))
        b = sliding_window_proposals((200, 160))
        assert [x.as_list() for x in a] == [x.as_list() for x in b]
        assert all(x.x2 <= 200 + 1e-9 and x.y2 <= 160 + 1e-9 for x in a)
        assert len({tuple(x.as_list()) for x in a}) == len(a)

    def test_default_scales(self):
        scales = default_scales((200, 160))
        assert scales[0] == pytest.approx(16.0)
        assert scales[-1] == pytest.approx(144.0)
        assert len(scales) == 5

    def test_aspect(self):
        boxes = sliding_window_proposals((100, 100), scales=[20], aspects=[4.0])
        assert boxes[0].w == pytest.approx(40.0)
        assert boxes[0].h == pytest.approx(10.0)
        assert math.isclose(boxes[0].w * boxes[0].h, 400.0)

    @pytest.mark.parametrize("stride", [0.0, 1.5, -0.2])
    def test_bad_stride(self, stride):
        with pytest.raises(ConfigError):
            sliding_window_proposals((100, 100), stride_frac=stride)

    def test_empty_lists(self):
        with pytest.raises(ConfigError):
            sliding_window_proposals((100, 100), scales=[])
