#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
薄板样条（TPS）与区域真值生成
用关键点对拟合插值 TPS，把源图物体框内的候选区域映射到第二张图，取外接矩形作为真值
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from app.core.config import settings
from app.core.errors import DegenerateControlPoints, DegenerateGt, TooFewKeypoints
from app.services.geometry import Box, intersection_area
from app.services.matching import ProposalSet

DUPLICATE_EPS = 1e-6
MAX_CONDITION = 1e13


# ==================== 数据类型 ====================
@dataclass(frozen=True)
class KeypointPair:
    src: Tuple[float, float]
    dst: Tuple[float, float]


@dataclass(frozen=True)
class TpsWarp:
    """
    control_points: (m, 2) 源关键点
    affine: (3, 2)，行依次为常数项、x 系数、y 系数
    weights: (m, 2) 非线性系数
    """
    control_points: np.ndarray = field(repr=False)
    affine: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    regularization: float = 0.0


@dataclass(frozen=True)
class GtCorrespondence:
    src_region_id: int
    gt_box: Box


# ==================== 拟合与求值 ====================
def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U = r^2 ln r^2，U(0) = 0"""
    r2 = np.asarray(r2, dtype=np.float64)
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, r2 * np.log(safe), 0.0)


def _pairs_to_arrays(pairs: Sequence[KeypointPair]) -> Tuple[np.ndarray, np.ndarray]:
    src = np.array([p.src for p in pairs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([p.dst for p in pairs], dtype=np.float64).reshape(-1, 2)
    return src, dst


def tps_fit(pairs: Sequence[KeypointPair], regularization: float = 0.0) -> TpsWarp:
    """
    求解标准插值 TPS 线性系统
        [K + λI  P] [w]   [y]
        [P^T     0] [a] = [0]
    用带主元的 LU 分解，奇异时报错；λ 作用于归一化坐标下的核矩阵
    """
    if len(pairs) < 3:
        raise TooFewKeypoints(f"TPS 至少需要 3 对关键点，当前 {len(pairs)}")
    src, dst = _pairs_to_arrays(pairs)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateControlPoints("关键点坐标含非有限值")

    dist = cdist(src, src)
    np.fill_diagonal(dist, np.inf)
    if np.min(dist) < DUPLICATE_EPS:
        raise DegenerateControlPoints("存在重复的源关键点")

    # 在中心化、尺度归一化后的坐标中求解，再换算回原坐标：
    # U(r^2/c^2) = U(r^2)/c^2 - (ln c^2 / c^2) r^2，后一项在边界条件下为常数
    center = src.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((src - center) ** 2, axis=1))))
    norm = (src - center) / scale

    m = src.shape[0]
    P = np.hstack([np.ones((m, 1)), norm])
    if np.linalg.matrix_rank(P) < 3:
        raise DegenerateControlPoints("源关键点共线")

    L = np.zeros((m + 3, m + 3))
    L[:m, :m] = tps_kernel(cdist(norm, norm, "sqeuclidean")) + regularization * np.eye(m)
    L[:m, m:] = P
    L[m:, :m] = P.T
    rhs = np.zeros((m + 3, 2))
    rhs[:m] = dst

    if np.linalg.cond(L) > MAX_CONDITION:
        raise DegenerateControlPoints("TPS 线性系统奇异")
    lu, piv = linalg.lu_factor(L)
    solution = linalg.lu_solve((lu, piv), rhs)
    w_norm, a_norm = solution[:m], solution[m:]

    s2 = scale * scale
    weights = w_norm / s2
    linear = a_norm[1:] / scale
    const = (a_norm[0] - center @ linear
             - (np.log(s2) / s2) * (np.sum(src * src, axis=1) @ w_norm))
    return TpsWarp(src, np.vstack([const, linear]), weights, regularization)


def tps_apply_many(w: TpsWarp, points: np.ndarray) -> np.ndarray:
    """批量求值，points 形状 (k, 2)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    U = tps_kernel(cdist(points, w.control_points, "sqeuclidean"))
    return w.affine[0] + points @ w.affine[1:] + U @ w.weights


def tps_apply(w: TpsWarp, p: Tuple[float, float]) -> Tuple[float, float]:
    out = tps_apply_many(w, np.array([p]))[0]
    return float(out[0]), float(out[1])


# ==================== 真值生成 ====================
def select_rs(R: ProposalSet, bbox: Box, min_overlap: float = settings.RS_MIN_OVERLAP) -> List[int]:
    """|b ∩ r| / |r| >= 0.75 的区域 id"""
    return [
        region.id for region in R.regions
        if intersection_area(region.box, bbox) / region.box.area >= min_overlap
    ]


def gt_region(w: TpsWarp, r: Box, src_region_id: int = 0) -> GtCorrespondence:
    """映射框的四个顶点，取轴对齐外接矩形"""
    corners = np.array([[r.x, r.y], [r.x2, r.y], [r.x, r.y2], [r.x2, r.y2]])
    warped = tps_apply_many(w, corners)
    x1, y1 = warped.min(axis=0)
    x2, y2 = warped.max(axis=0)
    if not (x2 - x1 > 0 and y2 - y1 > 0):
        raise DegenerateGt(f"区域 {src_region_id} 映射后退化为零宽或零高")
    return GtCorrespondence(src_region_id, Box.from_corners(float(x1), float(y1), float(x2), float(y2)))


def generate_ground_truth(w: TpsWarp, R: ProposalSet, src_bbox: Box, dst_bbox: Optional[Box] = None,
                          filter_dst: bool = False,
                          min_overlap: float = settings.RS_MIN_OVERLAP) -> List[GtCorrespondence]:
    """
    R_s 内每个区域生成真值；filter_dst 为真时，
    真值框还需满足在 dst_bbox 内的面积占比 >= min_overlap
    """
    gts = [gt_region(w, R.box(rid), rid) for rid in select_rs(R, src_bbox, min_overlap)]
    if filter_dst and dst_bbox is not None:
        gts = [g for g in gts if intersection_area(g.gt_box, dst_bbox) / g.gt_box.area >= min_overlap]
    return gts
