#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评测指标
- PCR 曲线：1 - IoU(φ(r), r*) < τ 的区域比例
- mIoU@k 曲线：按匹配得分排序后前 k 个匹配的平均 IoU
- AuC：梯形积分，按定义域长度归一化
- PCK：稠密光流在关键点处的预测误差 < α·max(h, w)
- leave-n-out：用留出关键点检验 TPS 真值质量
- 上界匹配、内点比例、逐像素光流精度
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from app.core.config import settings
from app.core.errors import KeypointOutsideImage, MissingGt, TooFewKeypoints
from app.services.flowfield import FlowField
from app.services.geometry import Box, boxes_to_array, iou_matrix, iou_rows
from app.services.matching import MatchEntry, MatchSet, ProposalSet
from app.services.synth import SplitMix64
from app.services.tps import GtCorrespondence, KeypointPair, tps_apply_many, tps_fit


# ==================== 曲线类型 ====================
@dataclass
class PcrCurve:
    thresholds: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.thresholds


@dataclass
class MiouCurve:
    k: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.k.astype(np.float64)


Curve = Union[PcrCurve, MiouCurve]


@dataclass(frozen=True)
class PckResult:
    alpha: float
    correct: int
    total: int

    @property
    def pck(self) -> float:
        return self.correct / self.total if self.total else 0.0


def default_taus(samples: int = settings.PCR_SAMPLES) -> np.ndarray:
    """(0, 1] 上的均匀网格 τ_i = i / samples"""
    return np.arange(1, samples + 1, dtype=np.float64) / samples


# ==================== 区域匹配指标 ====================
def _matched_ious(matches: MatchSet, R_prime: ProposalSet, gts: Sequence[GtCorrespondence]) -> np.ndarray:
    """按 gts 顺序返回 IoU(box(φ(r)), r*)"""
    if not gts:
        raise MissingGt("真值集合为空")
    by_src = matches.as_dict()
    missing = [g.src_region_id for g in gts if g.src_region_id not in by_src]
    if missing:
        raise MissingGt(f"以下源区域没有匹配结果: {missing[:10]}")
    pred = boxes_to_array(R_prime.box(by_src[g.src_region_id].dst_id) for g in gts)
    truth = boxes_to_array(g.gt_box for g in gts)
    return iou_rows(pred, truth)


def pcr(matches: MatchSet, R_prime: ProposalSet, gts: Sequence[GtCorrespondence],
        taus: Optional[np.ndarray] = None) -> PcrCurve:
    """value(τ) = |{r ∈ R_s : 1 - IoU < τ}| / |R_s|"""
    taus = default_taus() if taus is None else np.asarray(taus, dtype=np.float64)
    errors = 1.0 - _matched_ious(matches, R_prime, gts)
    values = (errors[None, :] < taus[:, None]).mean(axis=1)
    return PcrCurve(taus, values)


def miou_at_k(matches: MatchSet, R_prime: ProposalSet, gts: Sequence[GtCorrespondence],
              max_k: Optional[int] = None) -> MiouCurve:
    """按匹配得分降序（平局按 src_id）取前 k 个的平均 IoU"""
    ious = _matched_ious(matches, R_prime, gts)
    by_src = matches.as_dict()
    src_ids = np.array([g.src_region_id for g in gts])
    scores = np.array([by_src[g.src_region_id].score for g in gts])
    order = np.lexsort((src_ids, -scores))
    K = len(gts) if max_k is None else min(max_k, len(gts))
    ranked = ious[order][:K]
    k = np.arange(1, K + 1)
    return MiouCurve(k, np.cumsum(ranked) / k)


def auc(curve: Curve) -> float:
    """
    梯形面积除以定义域长度 x[-1] - x[0]，结果落在曲线取值范围内
    mIoU@k 曲线 k = 1..K 的定义域长度为 K - 1，即以 K 个点的网格归一化；单点曲线返回该点的值
    """
    x = curve.x
    y = np.asarray(curve.values, dtype=np.float64)
    if y.shape[0] == 1:
        return float(y[0])
    area = float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)
    return area / float(x[-1] - x[0])


def mean_curve(curves: Sequence[Curve]) -> Curve:
    """同一网格上的曲线逐点平均（多个图像对汇总）"""
    first = curves[0]
    values = np.mean(np.stack([c.values for c in curves]), axis=0)
    if isinstance(first, PcrCurve):
        return PcrCurve(first.thresholds.copy(), values)
    return MiouCurve(first.k.copy(), values)


def upper_bound_matches(R_prime: ProposalSet, gts: Sequence[GtCorrespondence]) -> MatchSet:
    """每个 r ∈ R_s 取与其真值 IoU 最大的 r'，得分即该 IoU"""
    if not gts:
        raise MissingGt("真值集合为空")
    ious = iou_matrix(boxes_to_array(g.gt_box for g in gts), R_prime.boxes)
    best = np.argmax(ious, axis=1)
    return MatchSet([
        MatchEntry(g.src_region_id, int(j), float(ious[i, j]))
        for i, (g, j) in enumerate(zip(gts, best))
    ])


def inlier_fraction(R: ProposalSet, gts: Sequence[GtCorrespondence]) -> float:
    """|R_s| / |R|"""
    return len(gts) / len(R) if len(R) else 0.0


# ==================== 稠密光流指标 ====================
def sample_flow(flow: FlowField, points: np.ndarray) -> np.ndarray:
    """在 (x, y) 点处双线性采样光流，返回 (k, 2)"""
    coords = [points[:, 1], points[:, 0]]
    u = ndimage.map_coordinates(flow.u, coords, order=1, mode="nearest")
    v = ndimage.map_coordinates(flow.v, coords, order=1, mode="nearest")
    return np.stack([u, v], axis=1)


def pck_flow(flow: FlowField, kp_pairs: Sequence[KeypointPair], dst_bbox: Box,
             alpha: float = settings.PCK_ALPHA) -> PckResult:
    """
    预测 k'_i = k_i + flow(k_i)，误差严格小于 α·max(h, w) 记为正确
    关键点坐标取值范围为 [0, w) × [0, h)；像素 i 的中心在坐标 i，
    最后一列中心右侧 (w - 1, w) 内的点按边缘像素的光流采样
    """
    src = np.array([p.src for p in kp_pairs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([p.dst for p in kp_pairs], dtype=np.float64).reshape(-1, 2)
    outside = (src[:, 0] < 0) | (src[:, 0] >= flow.width) | (src[:, 1] < 0) | (src[:, 1] >= flow.height)
    if np.any(outside):
        raise KeypointOutsideImage(f"关键点超出源图像范围: {src[outside][:5].tolist()}")
    pred = src + sample_flow(flow, src)
    err = np.sqrt(np.sum((pred - dst) ** 2, axis=1))
    threshold = alpha * max(dst_bbox.w, dst_bbox.h)
    return PckResult(alpha, int(np.sum(err < threshold)), len(kp_pairs))


def keypoint_bbox(points: np.ndarray) -> Box:
    """关键点的外接框（宽高至少 1 像素）"""
    x1, y1 = points.min(axis=0)
    x2, y2 = points.max(axis=0)
    return Box(float(x1), float(y1), max(float(x2 - x1), 1.0), max(float(y2 - y1), 1.0))


def leave_n_out(pairs: Sequence[KeypointPair], n: int, trials: int, alpha: float = settings.PCK_ALPHA,
                seed: int = 0, dst_bbox: Optional[Box] = None) -> float:
    """
    每次随机留出 n 个关键点，用其余点拟合 TPS 预测留出点，
    以 α·max(h, w) 计算 PCK 并对 trials 次取平均；bbox 缺省为全部目标关键点的外接框
    """
    total = len(pairs)
    if n < 1 or n >= total or total - n < 3:
        raise TooFewKeypoints(f"留出 {n} 个后剩余关键点不足 3 个（共 {total} 个）")
    src = np.array([p.src for p in pairs], dtype=np.float64)
    dst = np.array([p.dst for p in pairs], dtype=np.float64)
    bbox = dst_bbox or keypoint_bbox(dst)
    threshold = alpha * max(bbox.w, bbox.h)

    rng = SplitMix64(seed)
    scores = []
    for _ in range(trials):
        perm = rng.permutation(total)
        held, kept = perm[:n], perm[n:]
        warp = tps_fit([pairs[i] for i in sorted(kept)])
        pred = tps_apply_many(warp, src[held])
        err = np.sqrt(np.sum((pred - dst[held]) ** 2, axis=1))
        scores.append(float(np.mean(err < threshold)))
    return float(np.mean(scores))


def flow_accuracy(flow: FlowField, true_u: np.ndarray, true_v: np.ndarray, mask: np.ndarray,
                  threshold: float = 5.0, normalize_to: float = 100.0) -> float:
    """
    前景像素中光流误差小于 threshold 的比例；
    误差在把图像长边缩放到 normalize_to 像素后计算
    """
    if not np.any(mask):
        return 0.0
    factor = normalize_to / max(flow.width, flow.height)
    err = np.sqrt((flow.u - true_u) ** 2 + (flow.v - true_v) ** 2) * factor
    return float(np.mean(err[mask] < threshold))
