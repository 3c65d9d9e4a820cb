#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
外观特征
- 栅格图像（灰度 / RGB，8 位）
- 内置简化 HOG 描述子
- 三种相似度函数，输出均在 [0, 1]，直接作为 p(f -> f') 使用
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from app.core.config import settings
from app.core.errors import DescriptorMismatch, FormatError, NegativeFeature, RegionOutsideImage
from app.services.geometry import Box

CHI2_EPS = 1e-12
SIMILARITY_KINDS = ("rectified_dot", "chi2_kernel", "l2_gaussian")
HOG_DESCRIPTOR_ID = "hog"


# ==================== 图像 ====================
@dataclass(frozen=True)
class RasterImage:
    """像素按行存储，形状 (height, width, channels)"""
    width: int
    height: int
    channels: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise FormatError(f"不支持的通道数: {self.channels}")
        if self.pixels.size != self.width * self.height * self.channels:
            raise FormatError(
                f"像素数量 {self.pixels.size} 与尺寸 {self.width}x{self.height}x{self.channels} 不符"
            )
        object.__setattr__(
            self, "pixels",
            np.ascontiguousarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width, self.channels),
        )

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterImage":
        """由 (h, w) 或 (h, w, 3) 数组构造，数值截断到 0..255"""
        data = np.clip(np.rint(np.asarray(array, dtype=np.float64)), 0, 255).astype(np.uint8)
        if data.ndim == 2:
            data = data[:, :, None]
        return cls(width=data.shape[1], height=data.shape[0], channels=data.shape[2], pixels=data)

    def luminance(self) -> np.ndarray:
        """灰度强度，float64，形状 (h, w)"""
        px = self.pixels.astype(np.float64)
        if self.channels == 1:
            return px[:, :, 0]
        return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


@dataclass(frozen=True)
class HogConfig:
    cells: int = settings.HOG_CELLS
    cell_px: int = settings.HOG_CELL_PX
    bins: int = settings.HOG_BINS

    @property
    def patch_px(self) -> int:
        return self.cells * self.cell_px

    @property
    def length(self) -> int:
        return (self.cells - 1) ** 2 * 4 * self.bins


# ==================== 特征向量与相似度 ====================
@dataclass(frozen=True)
class FeatureVec:
    values: np.ndarray = field(repr=False)
    descriptor_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise FormatError(f"特征 {self.descriptor_id} 含非有限值")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SimilarityFn:
    kind: str = "rectified_dot"
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in SIMILARITY_KINDS:
            raise DescriptorMismatch(f"未知相似度类型: {self.kind}")
        if not self.temperature > 0:
            raise DescriptorMismatch(f"temperature 必须为正: {self.temperature}")

    def apply(self, f: FeatureVec, g: FeatureVec) -> float:
        return similarity(f, g, self)


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v))
    if norm == 0:
        return np.zeros_like(v)
    return v / norm


def similarity(f: FeatureVec, g: FeatureVec, s: SimilarityFn) -> float:
    """单对特征的相似度"""
    if f.descriptor_id != g.descriptor_id or len(f) != len(g):
        raise DescriptorMismatch(
            f"描述子不一致: {f.descriptor_id}[{len(f)}] vs {g.descriptor_id}[{len(g)}]"
        )
    return float(similarity_matrix(f.values[None, :], g.values[None, :], s)[0, 0])


def similarity_matrix(fs: np.ndarray, gs: np.ndarray, s: SimilarityFn, chunk: int = 256) -> np.ndarray:
    """
    (n, D) 与 (m, D) 特征矩阵的两两相似度 (n, m)
    chi2 按行分块计算，避免 n*m*D 的中间数组
    """
    fs = np.asarray(fs, dtype=np.float64)
    gs = np.asarray(gs, dtype=np.float64)
    if fs.shape[1] != gs.shape[1]:
        raise DescriptorMismatch(f"特征维度不一致: {fs.shape[1]} vs {gs.shape[1]}")

    if s.kind == "rectified_dot":
        nf = np.sqrt(np.sum(fs * fs, axis=1))
        ng = np.sqrt(np.sum(gs * gs, axis=1))
        denom = nf[:, None] * ng[None, :]
        dots = fs @ gs.T
        out = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        return np.clip(out, 0.0, 1.0)

    if s.kind == "chi2_kernel":
        if np.any(fs < 0) or np.any(gs < 0):
            raise NegativeFeature("chi2_kernel 要求特征非负")
        out = np.empty((fs.shape[0], gs.shape[0]), dtype=np.float64)
        for start in range(0, fs.shape[0], chunk):
            block = fs[start:start + chunk, None, :]
            diff = block - gs[None, :, :]
            chi2 = 0.5 * np.sum(diff * diff / (block + gs[None, :, :] + CHI2_EPS), axis=2)
            out[start:start + chunk] = np.exp(-chi2 / s.temperature)
        return out

    # l2_gaussian：直接求差，相同向量精确得到 1
    out = np.empty((fs.shape[0], gs.shape[0]), dtype=np.float64)
    for start in range(0, fs.shape[0], chunk):
        diff = fs[start:start + chunk, None, :] - gs[None, :, :]
        out[start:start + chunk] = np.exp(-np.sum(diff * diff, axis=2) / s.temperature)
    return out


# ==================== 内置 HOG ====================
def _sample_patch(lum: np.ndarray, region: Box, size: int) -> np.ndarray:
    """双线性重采样到 size x size，越界取边缘值"""
    steps = (np.arange(size, dtype=np.float64) + 0.5) / size
    xs = region.x + steps * region.w - 0.5
    ys = region.y + steps * region.h - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(lum, [grid_y, grid_x], order=1, mode="nearest")


def hog_describe(img: RasterImage, region: Box, cfg: Optional[HogConfig] = None) -> FeatureVec:
    """
    简化 HOG：
    区域重采样为 (G*c)^2 图块 -> 无符号梯度方向直方图（每 cell B 个 bin）
    -> 2x2 block 内 L2 归一化 -> 拼接 -> 全局 L2 归一化
    """
    cfg = cfg or HogConfig()
    iw = min(region.x2, img.width) - max(region.x, 0.0)
    ih = min(region.y2, img.height) - max(region.y, 0.0)
    if iw <= 0 or ih <= 0:
        raise RegionOutsideImage(f"区域 {region.as_list()} 与图像 {img.width}x{img.height} 不相交")

    patch = _sample_patch(img.luminance(), region, cfg.patch_px)
    gy, gx = np.gradient(patch)
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((angle / (np.pi / cfg.bins)).astype(np.int64), cfg.bins - 1)

    cell_row = np.arange(cfg.patch_px) // cfg.cell_px
    cell_index = (cell_row[:, None] * cfg.cells + cell_row[None, :]) * cfg.bins + bins
    hist = np.bincount(cell_index.ravel(), weights=magnitude.ravel(),
                       minlength=cfg.cells * cfg.cells * cfg.bins)
    hist = hist.reshape(cfg.cells, cfg.cells, cfg.bins)

    blocks = []
    for by in range(cfg.cells - 1):
        for bx in range(cfg.cells - 1):
            blocks.append(_l2_normalize(hist[by:by + 2, bx:bx + 2, :].ravel()))
    return FeatureVec(_l2_normalize(np.concatenate(blocks)), HOG_DESCRIPTOR_ID)
