#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""测试公共夹具"""

from typing import Optional, Sequence

import numpy as np
import pytest

from app.services.features import FeatureVec
from app.services.geometry import Box
from app.services.matching import ProposalSet, Region
from app.services.synth import SynthConfig


def make_set(boxes: Sequence[Sequence[float]], feats: np.ndarray, width: int = 200, height: int = 160,
             descriptor_id: str = "test", scores: Optional[Sequence[float]] = None) -> ProposalSet:
    """由框列表与特征矩阵构造候选集合"""
    regions = [
        Region(i, Box(*b), FeatureVec(np.asarray(f, dtype=np.float64), descriptor_id))
        for i, (b, f) in enumerate(zip(boxes, feats))
    ]
    return ProposalSet(width, height, regions, scores)


def random_boxes(rng: np.random.Generator, n: int, width: float = 200, height: float = 160):
    w = rng.uniform(10, 60, n)
    h = rng.uniform(10, 60, n)
    x = rng.uniform(0, width - w)
    y = rng.uniform(0, height - h)
    return [(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(x, y, w, h)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_config():
    """零噪声、恒等变换、无杂波"""
    return SynthConfig.build(seed=3, n_clutter=0, feature_noise_sigma=0.0)


@pytest.fixture
def translation_config():
    return SynthConfig.build(
        seed=5, n_clutter=0, feature_noise_sigma=0.0,
        global_transform=[[1.0, 0.0, 12.0], [0.0, 1.0, -8.0]],
    )
