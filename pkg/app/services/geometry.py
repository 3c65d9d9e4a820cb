#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
几何基础
矩形框、IoU、三维位置向量 gamma（中心 + 对数尺度）、偏移向量与偏移空间高斯核
所有函数均为纯函数，可在多线程中直接调用
"""

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError, InvalidBox


# ==================== 数据类型 ====================
@dataclass(frozen=True)
class Box:
    """矩形框 (x, y) 为左上角，宽高必须为正"""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidBox(f"框坐标非有限值: ({self.x}, {self.y})")
        if not (self.w > 0 and self.h > 0) or not (math.isfinite(self.w) and math.isfinite(self.h)):
            raise InvalidBox(f"框宽高必须为正: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def translate(self, tx: float, ty: float) -> "Box":
        return Box(self.x + tx, self.y + ty, self.w, self.h)

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class LocationVec:
    cx: float
    cy: float
    ls: float


@dataclass(frozen=True)
class OffsetVector:
    """偏移空间中的点 (dx, dy, dls)"""
    dx: float
    dy: float
    dls: float

    def __sub__(self, other: "OffsetVector") -> "OffsetVector":
        return OffsetVector(self.dx - other.dx, self.dy - other.dy, self.dls - other.dls)

    def __neg__(self) -> "OffsetVector":
        return OffsetVector(-self.dx, -self.dy, -self.dls)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dls], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "OffsetVector":
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True)
class KernelParams:
    """偏移空间高斯核带宽"""
    sigma_xy: float
    sigma_ls: float

    def __post_init__(self):
        if not (self.sigma_xy > 0 and self.sigma_ls > 0):
            raise ConfigError(f"核带宽必须为正: sigma_xy={self.sigma_xy}, sigma_ls={self.sigma_ls}")

    @property
    def scale(self) -> np.ndarray:
        """偏移各分量的归一化系数 (1/σxy, 1/σxy, 1/σls)"""
        return np.array([1.0 / self.sigma_xy, 1.0 / self.sigma_xy, 1.0 / self.sigma_ls])

    @classmethod
    def for_image(cls, width: float, height: float) -> "KernelParams":
        """默认带宽：sigma_xy 取源图像长边的 5%"""
        return cls(settings.SIGMA_XY_FRAC * max(width, height), settings.SIGMA_LS)


# ==================== 标量运算 ====================
def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """交并比，取值 [0, 1]"""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def gamma(s: Box) -> LocationVec:
    """位置向量：框中心 + ln sqrt(w*h)"""
    return LocationVec(s.x + s.w / 2.0, s.y + s.h / 2.0, 0.5 * math.log(s.w * s.h))


def offset(s: Box, s_prime: Box) -> OffsetVector:
    """gamma(s) - gamma(s')"""
    g, gp = gamma(s), gamma(s_prime)
    return OffsetVector(g.cx - gp.cx, g.cy - gp.cy, g.ls - gp.ls)


def offset_kernel(x: OffsetVector, mu: OffsetVector, k: KernelParams) -> float:
    """非归一化高斯核，x == mu 时取最大值 1"""
    d = x - mu
    return math.exp(
        -(d.dx * d.dx) / (2.0 * k.sigma_xy ** 2)
        - (d.dy * d.dy) / (2.0 * k.sigma_xy ** 2)
        - (d.dls * d.dls) / (2.0 * k.sigma_ls ** 2)
    )


# ==================== 向量化版本（匹配器使用） ====================
def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    """框列表 -> (n, 4) 数组 [x, y, w, h]"""
    rows = [b.as_list() for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def gamma_array(boxes: np.ndarray) -> np.ndarray:
    """(n, 4) 框数组 -> (n, 3) 位置向量"""
    out = np.empty((boxes.shape[0], 3), dtype=np.float64)
    out[:, 0] = boxes[:, 0] + boxes[:, 2] / 2.0
    out[:, 1] = boxes[:, 1] + boxes[:, 3] / 2.0
    out[:, 2] = 0.5 * np.log(boxes[:, 2] * boxes[:, 3])
    return out


def pairwise_offsets(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """所有 (i, j) 的 gamma(s_i) - gamma(s'_j)，形状 (n, m, 3)"""
    return gamma_array(src)[:, None, :] - gamma_array(dst)[None, :, :]


def intersection_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """两组框的交集面积矩阵 (n, m)"""
    iw = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.where((iw > 0) & (ih > 0), iw * ih, 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter = intersection_matrix(a, b)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    return np.where(same, 1.0, np.clip(inter / union, 0.0, 1.0))


def iou_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """逐行 IoU：a[i] 与 b[i]"""
    iw = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    same = np.all(a == b, axis=1)
    return np.where(same, 1.0, np.clip(inter / union, 0.0, 1.0))
