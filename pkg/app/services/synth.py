#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成场景生成
带已知真值对应关系的图像对 / 候选区域 / 特征 / 关键点，作为各匹配算法的校验基准，
同时提供滑动窗口候选框生成
随机数使用固定算法的 SplitMix64，保证跨平台、跨语言可复现
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy import ndimage

from app.core.errors import ConfigError
from app.services.features import FeatureVec, RasterImage
from app.services.geometry import Box, iou
from app.services.matching import MatchEntry, MatchSet, ProposalSet, Region
from app.services.tps import KeypointPair

MASK64 = (1 << 64) - 1
SYNTH_DESCRIPTOR_ID = "synth"
MAX_PLACEMENT_ATTEMPTS = 500
DEFAULT_ASPECTS = (0.5, 1.0 / math.sqrt(2.0), 1.0, math.sqrt(2.0), 2.0)


# ==================== 随机数 ====================
class SplitMix64:
    """
    SplitMix64：
        state += 0x9E3779B97F4A7C15
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)
    浮点数取高 53 位；正态分布用 Box-Muller（每个样本消耗两个均匀数）
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """[0, 1) 均匀分布"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """[0, n) 整数"""
        return min(int(self.random() * n), n - 1)

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, count: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(count)], dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates 洗牌"""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return np.array(items, dtype=np.int64)


# ==================== 配置 ====================
class GeometricJitter(BaseModel):
    trans_sigma: float = Field(0.0, ge=0, description="中心平移噪声（像素）")
    logscale_sigma: float = Field(0.0, ge=0, description="对数尺度噪声")


class SynthConfig(BaseModel):
    """合成场景参数"""
    seed: int = Field(0, ge=0)
    image_size: Tuple[int, int] = Field((200, 160), description="(宽, 高)")
    n_objects: int = Field(3, ge=1)
    proposals_per_object: int = Field(10, ge=1)
    n_clutter: int = Field(13, ge=0)
    n_decoys: int = Field(0, ge=0, description="第二张图杂波中复制物体潜在特征的诱饵个数")
    feature_dim: int = Field(32, ge=1)
    feature_noise_sigma: float = Field(0.1, ge=0)
    geometric_jitter: GeometricJitter = Field(default_factory=GeometricJitter)
    global_transform: List[List[float]] = Field(default_factory=lambda: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @field_validator("image_size")
    @classmethod
    def _positive_size(cls, value):
        if value[0] <= 0 or value[1] <= 0:
            raise ValueError("图像尺寸必须为正")
        return value

    @field_validator("global_transform")
    @classmethod
    def _affine_2x3(cls, value):
        if len(value) != 2 or any(len(row) != 3 for row in value):
            raise ValueError("global_transform 必须为 2x3 仿射矩阵")
        det = value[0][0] * value[1][1] - value[0][1] * value[1][0]
        if abs(det) < 1e-12:
            raise ValueError("global_transform 线性部分奇异")
        return value

    @model_validator(mode="after")
    def _decoys_within_clutter(self):
        if self.n_decoys > self.n_clutter:
            raise ValueError(f"n_decoys ({self.n_decoys}) 不能超过 n_clutter ({self.n_clutter})")
        return self

    @classmethod
    def build(cls, **kwargs) -> "SynthConfig":
        """校验失败统一转换为 ConfigError"""
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ConfigError(f"合成参数无效: {e.errors()[0].get('loc')} {e.errors()[0].get('msg')}")

    @property
    def affine(self) -> np.ndarray:
        return np.asarray(self.global_transform, dtype=np.float64)


def suite_config(seed: int) -> SynthConfig:
    """固定的杂波测试集：30% 杂波候选（第二张图的杂波全部为诱饵）、特征噪声 0.1、平移 + 缩放变换"""
    return SynthConfig.build(
        seed=seed,
        image_size=(200, 160),
        n_objects=3,
        proposals_per_object=10,
        n_clutter=13,
        n_decoys=13,
        feature_dim=32,
        feature_noise_sigma=0.1,
        geometric_jitter=GeometricJitter(trans_sigma=1.0, logscale_sigma=0.02),
        global_transform=[[1.15, 0.0, 12.0], [0.0, 1.15, -8.0]],
    )


# ==================== 合成结果 ====================
@dataclass
class SynthPair:
    image1: RasterImage
    image2: RasterImage
    proposals1: ProposalSet
    proposals2: ProposalSet
    true_match: Dict[int, int]
    keypoints: List[KeypointPair]
    bbox1: Box
    bbox2: Box
    transform: np.ndarray = field(repr=False)
    object_boxes: List[Box] = field(default_factory=list)

    def truth_matches(self) -> MatchSet:
        """真值匹配：真对得分 1，杂波源区域得分 0 且指向 0 号目标"""
        return MatchSet([
            MatchEntry(i, self.true_match[i], 1.0) if i in self.true_match else MatchEntry(i, 0, 0.0)
            for i in range(len(self.proposals1))
        ])

    def true_flow(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """全局仿射给出的真实光流 (u, v) 及物体像素掩码"""
        h, w = self.image1.height, self.image1.width
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        A = self.transform
        u = A[0, 0] * xs + A[0, 1] * ys + A[0, 2] - xs
        v = A[1, 0] * xs + A[1, 1] * ys + A[1, 2] - ys
        mask = np.zeros((h, w), dtype=bool)
        for box in self.object_boxes:
            mask |= (xs >= box.x) & (xs < box.x2) & (ys >= box.y) & (ys < box.y2)
        return u, v, mask


# ==================== 生成 ====================
def _transform_box(A: np.ndarray, box: Box) -> Box:
    corners = np.array([[box.x, box.y], [box.x2, box.y], [box.x, box.y2], [box.x2, box.y2]])
    mapped = corners @ A[:, :2].T + A[:, 2]
    x1, y1 = mapped.min(axis=0)
    x2, y2 = mapped.max(axis=0)
    return Box.from_corners(float(x1), float(y1), float(x2), float(y2))


def _inside(box: Box, width: int, height: int) -> bool:
    return box.x >= 0 and box.y >= 0 and box.x2 <= width and box.y2 <= height


def _random_box(rng: SplitMix64, width: int, height: int, lo: float, hi: float) -> Box:
    w = width * rng.uniform(lo, hi)
    h = height * rng.uniform(lo, hi)
    return Box(rng.uniform(0.0, width - w), rng.uniform(0.0, height - h), w, h)


def _place_objects(rng: SplitMix64, cfg: SynthConfig) -> List[Box]:
    width, height = cfg.image_size
    A = cfg.affine
    boxes: List[Box] = []
    for idx in range(cfg.n_objects):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = _random_box(rng, width, height, 0.18, 0.32)
            if not _inside(_transform_box(A, candidate), width, height):
                continue
            grown = Box(candidate.x - 4, candidate.y - 4, candidate.w + 8, candidate.h + 8)
            if all(iou(grown, other) == 0.0 for other in boxes):
                boxes.append(candidate)
                break
        else:
            raise ConfigError(f"无法放置第 {idx} 个物体：图像 {width}x{height} 内空间不足")
    return boxes


def _render(width: int, height: int, objects: Sequence[Box], textures: Sequence[Tuple[float, float, float]]) -> np.ndarray:
    """背景为平滑纹理，物体为棋盘格 + 斜条纹"""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 110.0 + 20.0 * np.sin(xs / 13.0) * np.cos(ys / 17.0)
    for box, (period, angle, base) in zip(objects, textures):
        inside = (xs >= box.x) & (xs < box.x2) & (ys >= box.y) & (ys < box.y2)
        lx, ly = xs - box.x, ys - box.y
        checker = (np.floor(lx / period) + np.floor(ly / period)) % 2
        stripe = np.sin(2.0 * np.pi * (lx * math.cos(angle) + ly * math.sin(angle)) / (0.7 * period))
        pattern = base + 50.0 * (checker - 0.5) + 15.0 * stripe
        img = np.where(inside, pattern, img)
    return np.clip(img, 0, 255)


def _warp_affine(img: np.ndarray, A: np.ndarray) -> np.ndarray:
    """第二张图 = 第一张图经仿射变换：out(q) = img(A^-1 (q - t))"""
    height, width = img.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    inv = np.linalg.inv(A[:, :2])
    qx, qy = xs - A[0, 2], ys - A[1, 2]
    px = inv[0, 0] * qx + inv[0, 1] * qy
    py = inv[1, 0] * qx + inv[1, 1] * qy
    return ndimage.map_coordinates(img, [py, px], order=1, mode="nearest")


def _object_keypoints(A: np.ndarray, boxes: Sequence[Box]) -> List[KeypointPair]:
    """每个物体取内缩 15% 的四角与中心"""
    pairs = []
    for box in boxes:
        for fx, fy in ((0.15, 0.15), (0.85, 0.15), (0.15, 0.85), (0.85, 0.85), (0.5, 0.5)):
            p = np.array([box.x + fx * box.w, box.y + fy * box.h])
            q = A[:, :2] @ p + A[:, 2]
            pairs.append(KeypointPair((float(p[0]), float(p[1])), (float(q[0]), float(q[1]))))
    return pairs


def _union(boxes: Sequence[Box]) -> Box:
    return Box.from_corners(min(b.x for b in boxes), min(b.y for b in boxes),
                            max(b.x2 for b in boxes), max(b.y2 for b in boxes))


def generate(cfg: SynthConfig) -> SynthPair:
    """
    随机数消耗顺序固定：
    物体位置 -> 纹理参数 -> 物体内候选框 -> 源图杂波框 -> 目标框扰动 -> 目标图杂波框
    -> 潜在特征 -> 诱饵来源 -> 源图杂波特征 -> 目标图独立杂波特征 -> 特征噪声
    第二张图的前 n_decoys 个杂波复制随机物体候选的潜在特征，其余杂波特征独立
    """
    rng = SplitMix64(cfg.seed)
    width, height = cfg.image_size
    A = cfg.affine
    jitter = cfg.geometric_jitter
    sigma = cfg.feature_noise_sigma
    dim = cfg.feature_dim

    objects = _place_objects(rng, cfg)
    textures = [(rng.uniform(4.0, 10.0), rng.uniform(0.0, math.pi), rng.uniform(60.0, 200.0)) for _ in objects]

    src_boxes: List[Box] = []
    for obj in objects:
        src_boxes.append(obj)
        for _ in range(cfg.proposals_per_object - 1):
            fw, fh = rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0)
            fx, fy = rng.uniform(0.0, 1.0 - fw), rng.uniform(0.0, 1.0 - fh)
            src_boxes.append(Box(obj.x + fx * obj.w, obj.y + fy * obj.h, fw * obj.w, fh * obj.h))
    n_true = len(src_boxes)
    src_clutter = [_random_box(rng, width, height, 0.1, 0.5) for _ in range(cfg.n_clutter)]

    dst_boxes: List[Box] = []
    for box in src_boxes:
        mapped = _transform_box(A, box)
        dx, dy, ds = rng.normal(), rng.normal(), rng.normal()
        scale = math.exp(jitter.logscale_sigma * ds)
        cx = mapped.x + mapped.w / 2.0 + jitter.trans_sigma * dx
        cy = mapped.y + mapped.h / 2.0 + jitter.trans_sigma * dy
        w, h = mapped.w * scale, mapped.h * scale
        dst_boxes.append(Box(cx - w / 2.0, cy - h / 2.0, w, h))
    dst_clutter = [_random_box(rng, width, height, 0.1, 0.5) for _ in range(cfg.n_clutter)]

    latent = np.stack([rng.normals(dim) for _ in range(n_true)]) if n_true else np.zeros((0, dim))
    decoy_of = [rng.randint(n_true) for _ in range(cfg.n_decoys)]
    clutter_latent = [rng.normals(dim) for _ in range(cfg.n_clutter)]
    dst_clutter_latent = [latent[i] for i in decoy_of]
    dst_clutter_latent += [rng.normals(dim) for _ in range(cfg.n_clutter - cfg.n_decoys)]

    src_feats = [latent[i] + sigma * rng.normals(dim) for i in range(n_true)]
    src_feats += [clutter_latent[c] + sigma * rng.normals(dim) for c in range(cfg.n_clutter)]
    dst_feats = [latent[i] + sigma * rng.normals(dim) for i in range(n_true)]
    dst_feats += [dst_clutter_latent[c] + sigma * rng.normals(dim) for c in range(cfg.n_clutter)]

    def _proposals(boxes: Sequence[Box], feats: Sequence[np.ndarray]) -> ProposalSet:
        regions = [Region(i, b, FeatureVec(f, SYNTH_DESCRIPTOR_ID)) for i, (b, f) in enumerate(zip(boxes, feats))]
        return ProposalSet(width, height, regions)

    img1 = _render(width, height, objects, textures)
    img2 = _warp_affine(img1, A)
    return SynthPair(
        image1=RasterImage.from_array(img1),
        image2=RasterImage.from_array(img2),
        proposals1=_proposals(src_boxes + src_clutter, src_feats),
        proposals2=_proposals(dst_boxes + dst_clutter, dst_feats),
        true_match={i: i for i in range(n_true)},
        keypoints=_object_keypoints(A, objects),
        bbox1=_union(objects),
        bbox2=_union([_transform_box(A, o) for o in objects]),
        transform=A,
        object_boxes=list(objects),
    )


# ==================== 滑动窗口 ====================
def default_scales(image_size: Tuple[int, int]) -> List[float]:
    """短边的 0.1 到 0.9 之间对数均匀取 5 个尺度"""
    return list(np.geomspace(0.1, 0.9, 5) * min(image_size))


def _positions(extent: float, limit: float, stride: float) -> List[float]:
    if extent >= limit:
        return [0.0]
    count = int(math.floor((limit - extent) / stride + 1e-9)) + 1
    return [i * stride for i in range(count)]


def sliding_window_proposals(image_size: Tuple[int, int], scales: Optional[Sequence[float]] = None,
                             aspects: Sequence[float] = DEFAULT_ASPECTS, stride_frac: float = 0.5) -> List[Box]:
    """
    尺度 s、宽高比 a 的窗口为 (s*sqrt(a)) x (s/sqrt(a))，步长为窗口尺寸的 stride_frac 倍，
    裁剪到图像内并去重，顺序固定
    """
    if not (0 < stride_frac <= 1):
        raise ConfigError(f"stride_frac 必须在 (0, 1]: {stride_frac}")
    width, height = image_size
    scales = default_scales(image_size) if scales is None else list(scales)
    if not scales or not aspects:
        raise ConfigError("scales 和 aspects 不能为空")

    seen = set()
    boxes: List[Box] = []
    for s in scales:
        for a in aspects:
            w, h = s * math.sqrt(a), s / math.sqrt(a)
            for y in _positions(h, height, stride_frac * h):
                for x in _positions(w, width, stride_frac * w):
                    x2, y2 = min(x + w, width), min(y + h, height)
                    key = (round(x, 9), round(y, 9), round(x2, 9), round(y2, 9))
                    if key in seen:
                        continue
                    seen.add(key)
                    boxes.append(Box.from_corners(x, y, x2, y2))
    return boxes


# ==================== 评分 ====================
def score_against_truth(matches: MatchSet, truth: SynthPair, iou_thresh: float = 0.5) -> int:
    """非杂波源区域中，分配到的目标框与真值目标框 IoU >= iou_thresh 的数量"""
    by_src = matches.as_dict()
    correct = 0
    for src_id, true_dst in truth.true_match.items():
        entry = by_src.get(src_id)
        if entry is None:
            continue
        if iou(truth.proposals2.box(entry.dst_id), truth.proposals2.box(true_dst)) >= iou_thresh:
            correct += 1
    return correct
