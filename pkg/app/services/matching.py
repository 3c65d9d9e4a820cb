#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
区域匹配
p(r -> r' | D) = p(f -> f') * p(s -> s' | D)，每个源区域取得分最高的目标区域
- NAM：几何项为均匀分布，仅比较外观
- PHM：所有候选对在偏移空间投票（精确求和 / 分箱 Hough 累加两种实现）
- LOM：每个区域用邻居初始偏移的几何中位数作为局部偏移
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from app.core.errors import ConfigError, DescriptorMismatch, EmptyInput, EmptyProposalSet, FormatError
from app.services.features import FeatureVec, SimilarityFn, similarity_matrix
from app.services.geometry import (
    Box,
    KernelParams,
    OffsetVector,
    boxes_to_array,
    gamma_array,
    intersection_matrix,
    pairwise_offsets,
)

MATCHERS = ("nam", "phm", "lom")
PHM_MODES = ("exact", "binned")
COINCIDE_EPS = 1e-9


# ==================== 数据类型 ====================
@dataclass(frozen=True)
class Region:
    id: int
    box: Box
    feature: FeatureVec


@dataclass
class ProposalSet:
    """一张图像的候选区域集合，id 必须为 0..n-1"""
    image_width: int
    image_height: int
    regions: List[Region]
    scores: Optional[np.ndarray] = None  # 候选框自身的置信度（可选）
    image_path: str = ""

    def __post_init__(self):
        for idx, region in enumerate(self.regions):
            if region.id != idx:
                raise FormatError(f"区域 id 必须按顺序为 0..n-1，第 {idx} 个为 {region.id}")
        ids = {r.feature.descriptor_id for r in self.regions}
        if len(ids) > 1:
            raise DescriptorMismatch(f"同一集合内描述子不一致: {sorted(ids)}")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape[0] != len(self.regions):
                raise FormatError(f"scores 数量 {self.scores.shape[0]} 与区域数 {len(self.regions)} 不符")

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def descriptor_id(self) -> str:
        return self.regions[0].feature.descriptor_id if self.regions else ""

    @property
    def boxes(self) -> np.ndarray:
        return boxes_to_array(r.box for r in self.regions)

    @property
    def features(self) -> np.ndarray:
        if not self.regions:
            return np.zeros((0, 0))
        return np.stack([r.feature.values for r in self.regions])

    def box(self, region_id: int) -> Box:
        return self.regions[region_id].box

    def truncate(self, k: int) -> "ProposalSet":
        """保留前 k 个候选：有 scores 时按分数降序（稳定排序），否则按文件顺序"""
        if k >= len(self.regions):
            return self
        if self.scores is not None:
            keep = np.sort(np.argsort(-self.scores, kind="stable")[:k])
        else:
            keep = np.arange(k)
        regions = [
            Region(new_id, self.regions[old].box, self.regions[old].feature)
            for new_id, old in enumerate(keep)
        ]
        scores = self.scores[keep] if self.scores is not None else None
        return ProposalSet(self.image_width, self.image_height, regions, scores, self.image_path)


@dataclass(frozen=True)
class MatchEntry:
    src_id: int
    dst_id: int
    score: float


@dataclass
class MatchSet:
    """每个源区域恰好一条匹配"""
    entries: List[MatchEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dst_ids(self) -> np.ndarray:
        return np.array([e.dst_id for e in self.entries], dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    def as_dict(self) -> Dict[int, MatchEntry]:
        return {e.src_id: e for e in self.entries}

    @classmethod
    def from_score_table(cls, scores: np.ndarray) -> "MatchSet":
        """逐行取最大值；np.argmax 返回第一个最大值，即平局时取最小的 dst_id"""
        best = np.argmax(scores, axis=1)
        return cls([
            MatchEntry(int(i), int(j), float(scores[i, j]))
            for i, j in enumerate(best)
        ])


@dataclass
class NeighborGraph:
    """N(r)：与 r 交集面积为正的区域（包含自身）"""
    adjacency: List[np.ndarray]
    matrix: np.ndarray = field(repr=False)

    def neighbors(self, region_id: int) -> np.ndarray:
        return self.adjacency[region_id]


@dataclass(frozen=True)
class PhmConfig:
    mode: str
    bin_xy: float
    bin_ls: float
    kernel: KernelParams

    def __post_init__(self):
        if self.mode not in PHM_MODES:
            raise ConfigError(f"未知 PHM 模式: {self.mode}")
        if not (self.bin_xy > 0 and self.bin_ls > 0):
            raise ConfigError(f"分箱尺寸必须为正: bin_xy={self.bin_xy}, bin_ls={self.bin_ls}")

    @classmethod
    def default(cls, kernel: KernelParams, mode: str = "binned") -> "PhmConfig":
        """默认分箱为核带宽的一半"""
        return cls(mode, kernel.sigma_xy / 2.0, kernel.sigma_ls / 2.0, kernel)


# ==================== 外观 ====================
def _check_nonempty(R: ProposalSet, R_prime: ProposalSet):
    if len(R) == 0 or len(R_prime) == 0:
        raise EmptyProposalSet(f"候选集合为空: |R|={len(R)}, |R'|={len(R_prime)}")


def appearance_table(R: ProposalSet, R_prime: ProposalSet, sim: SimilarityFn) -> np.ndarray:
    """table[i][j] = similarity(f_i, f'_j)"""
    if R.descriptor_id != R_prime.descriptor_id and len(R) and len(R_prime):
        raise DescriptorMismatch(f"描述子不一致: {R.descriptor_id} vs {R_prime.descriptor_id}")
    if len(R) == 0 or len(R_prime) == 0:
        return np.zeros((len(R), len(R_prime)))
    return similarity_matrix(R.features, R_prime.features, sim)


def match_nam(R: ProposalSet, R_prime: ProposalSet, sim: SimilarityFn) -> MatchSet:
    _check_nonempty(R, R_prime)
    return MatchSet.from_score_table(appearance_table(R, R_prime, sim))


# ==================== PHM ====================
def hough_exact(R: ProposalSet, R_prime: ProposalSet, table: np.ndarray, k: KernelParams,
                chunk: int = 2048) -> np.ndarray:
    """
    geo[i][j] = sum_{a,b} table[a][b] * K(offset(s_i, s'_j), offset(s_a, s'_b))
    复杂度 O(n^2 m^2)，作为参照实现
    """
    n, m = table.shape
    offsets = pairwise_offsets(R.boxes, R_prime.boxes).reshape(n * m, 3) * k.scale
    votes = table.reshape(n * m)
    geo = np.empty(n * m, dtype=np.float64)
    for start in range(0, n * m, chunk):
        sq = cdist(offsets[start:start + chunk], offsets, "sqeuclidean")
        geo[start:start + chunk] = np.exp(-0.5 * sq) @ votes
    return geo.reshape(n, m)


def _gauss_taps(sigma_bins: float) -> np.ndarray:
    """非归一化的一维高斯核，截断于 3 sigma"""
    radius = max(1, int(np.ceil(3.0 * sigma_bins)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (x / sigma_bins) ** 2)


def hough_binned(R: ProposalSet, R_prime: ProposalSet, table: np.ndarray, cfg: PhmConfig) -> np.ndarray:
    """
    分箱 Hough：投票以三线性权重分配到三维直方图，逐轴高斯平滑后三线性插值读取
    bincount 的累加顺序固定，结果与执行顺序无关
    """
    n, m = table.shape
    k = cfg.kernel
    bins = np.array([cfg.bin_xy, cfg.bin_xy, cfg.bin_ls])
    sigmas = np.array([k.sigma_xy, k.sigma_xy, k.sigma_ls]) / bins
    taps = [_gauss_taps(s) for s in sigmas]
    pad = np.array([(len(t) // 2) + 2 for t in taps])

    offsets = pairwise_offsets(R.boxes, R_prime.boxes).reshape(n * m, 3)
    lo = offsets.min(axis=0)
    coords = (offsets - lo) / bins + pad
    shape = tuple(int(v) for v in np.floor(coords.max(axis=0)).astype(np.int64) + pad + 2)

    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    votes = table.reshape(n * m)
    hist = np.zeros(int(np.prod(shape)), dtype=np.float64)
    for corner in range(8):
        step = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        weight = np.prod(np.where(step == 1, frac, 1.0 - frac), axis=1)
        idx = np.ravel_multi_index((base + step).T, shape)
        hist += np.bincount(idx, weights=votes * weight, minlength=hist.size)
    hist = hist.reshape(shape)

    for axis, kernel in enumerate(taps):
        hist = ndimage.convolve1d(hist, kernel, axis=axis, mode="constant", cval=0.0)

    geo = ndimage.map_coordinates(hist, coords.T, order=1, mode="constant", cval=0.0)
    return geo.reshape(n, m)


def match_phm(R: ProposalSet, R_prime: ProposalSet, sim: SimilarityFn, cfg: PhmConfig) -> MatchSet:
    _check_nonempty(R, R_prime)
    table = appearance_table(R, R_prime, sim)
    if cfg.mode == "exact":
        geo = hough_exact(R, R_prime, table, cfg.kernel)
    else:
        geo = hough_binned(R, R_prime, table, cfg)
    return MatchSet.from_score_table(table * geo)


# ==================== LOM ====================
def neighbor_graph(R: ProposalSet) -> NeighborGraph:
    boxes = R.boxes
    overlap = intersection_matrix(boxes, boxes) > 0
    np.fill_diagonal(overlap, True)
    adjacency = [np.flatnonzero(row) for row in overlap]
    return NeighborGraph(adjacency, overlap)


def geometric_median_array(points: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """
    Weiszfeld 迭代重加权最小二乘，从坐标均值出发
    迭代点与数据点重合时使用修正步（Vardi-Zhang）
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyInput("几何中位数的输入点集为空")
    if points.shape[0] == 1:
        return points[0].copy()

    y = points.mean(axis=0)
    for _ in range(max_iter):
        dist = np.sqrt(np.sum((points - y) ** 2, axis=1))
        coincide = dist < COINCIDE_EPS
        inv = np.zeros_like(dist)
        inv[~coincide] = 1.0 / dist[~coincide]
        if not np.any(~coincide):
            return y
        t = (inv[:, None] * points).sum(axis=0) / inv.sum()
        eta = int(coincide.sum())
        if eta == 0:
            y_next = t
        else:
            r_vec = (inv[:, None] * (points - y)).sum(axis=0)
            r = float(np.sqrt(np.sum(r_vec ** 2)))
            if r <= eta:
                return y
            y_next = (1.0 - eta / r) * t + min(1.0, eta / r) * y
        step = float(np.sqrt(np.sum((y_next - y) ** 2)))
        y = y_next
        if step < tol:
            break
    return y


def geometric_median(points: Sequence[OffsetVector], tol: float = 1e-8, max_iter: int = 200) -> OffsetVector:
    if len(points) == 0:
        raise EmptyInput("几何中位数的输入点集为空")
    arr = np.stack([p.as_array() for p in points])
    return OffsetVector.from_array(geometric_median_array(arr, tol, max_iter))


def local_offsets(R: ProposalSet, R_prime: ProposalSet, table: np.ndarray, graph: NeighborGraph,
                  k: KernelParams, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """
    x*_r：邻居初始匹配偏移的几何中位数，形状 (n, 3)
    在 (1/σxy, 1/σxy, 1/σls) 归一化后的空间求中位数再映射回原单位
    """
    psi = np.argmax(table, axis=1)
    init = gamma_array(R.boxes) - gamma_array(R_prime.boxes)[psi]
    scaled = init * k.scale
    out = np.empty_like(init)
    for r in range(len(R)):
        out[r] = geometric_median_array(scaled[graph.neighbors(r)], tol, max_iter) / k.scale
    return out


def match_lom(R: ProposalSet, R_prime: ProposalSet, sim: SimilarityFn, k: KernelParams,
              tol: float = 1e-8, max_iter: int = 200) -> MatchSet:
    _check_nonempty(R, R_prime)
    table = appearance_table(R, R_prime, sim)
    graph = neighbor_graph(R)
    psi = np.argmax(table, axis=1)
    psi_score = table[np.arange(len(R)), psi]

    x_star = local_offsets(R, R_prime, table, graph, k, tol, max_iter)
    support = graph.matrix.astype(np.float64) @ psi_score

    offsets = pairwise_offsets(R.boxes, R_prime.boxes)
    dev = (offsets - x_star[:, None, :]) * k.scale
    kernel = np.exp(-0.5 * np.sum(dev * dev, axis=2))
    return MatchSet.from_score_table(table * kernel * support[:, None])


# ==================== 统一入口 ====================
def match(R: ProposalSet, R_prime: ProposalSet, sim: SimilarityFn, method: str,
          kernel: Optional[KernelParams] = None, phm_cfg: Optional[PhmConfig] = None) -> MatchSet:
    """按名称选择匹配算法"""
    if method not in MATCHERS:
        raise ConfigError(f"未知匹配算法: {method}")
    if method == "nam":
        return match_nam(R, R_prime, sim)
    kernel = kernel or KernelParams.for_image(R.image_width, R.image_height)
    if method == "phm":
        return match_phm(R, R_prime, sim, phm_cfg or PhmConfig.default(kernel))
    return match_lom(R, R_prime, sim, kernel)
