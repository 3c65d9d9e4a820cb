#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
稠密光流生成
区域匹配 -> 每像素锚点匹配 -> 仿射坐标变换 -> 目标冲突消解 -> 补洞 -> 图像扭曲
光流定义在第一张图像网格上，位移指向第二张图像
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from app.core.config import settings
from app.core.errors import FormatError, NoValidFlow
from app.services.features import RasterImage
from app.services.matching import MatchSet, ProposalSet

NO_ANCHOR = -1


# ==================== 数据类型 ====================
@dataclass
class FlowField:
    width: int
    height: int
    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    score: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = (self.height, self.width)
        for name in ("u", "v", "score", "valid"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise FormatError(f"光流数组 {name} 形状 {arr.shape} 与 {shape} 不符")

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        shape = (height, width)
        return cls(width, height, np.zeros(shape), np.zeros(shape), np.zeros(shape),
                   np.zeros(shape, dtype=bool))

    def copy(self) -> "FlowField":
        return FlowField(self.width, self.height, self.u.copy(), self.v.copy(),
                         self.score.copy(), self.valid.copy())


@dataclass
class AnchorIndex:
    """每个像素的锚点区域 id，无覆盖时为 -1"""
    ids: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]


def _pixel_span(start: float, length: float, limit: int) -> slice:
    """满足 start <= p < start + length 的整数像素区间"""
    lo = max(0, int(np.ceil(start)))
    hi = min(limit, int(np.ceil(start + length)))
    return slice(lo, max(lo, hi))


# ==================== 锚点 ====================
def build_anchor_index(R: ProposalSet, matches: MatchSet) -> AnchorIndex:
    """
    按 (得分升序, id 降序) 依次覆盖绘制，
    最终每个像素保留得分最高、平局时 id 最小的覆盖区域
    """
    width, height = R.image_width, R.image_height
    ids = np.full((height, width), NO_ANCHOR, dtype=np.int64)
    scores = np.zeros((height, width), dtype=np.float64)
    by_src = matches.as_dict()

    order = sorted(
        (r for r in R.regions if r.id in by_src),
        key=lambda r: (by_src[r.id].score, -r.id),
    )
    for region in order:
        box = region.box
        rows = _pixel_span(box.y, box.h, height)
        cols = _pixel_span(box.x, box.w, width)
        ids[rows, cols] = region.id
        scores[rows, cols] = by_src[region.id].score
    return AnchorIndex(ids, scores)


def synthesize_flow(R: ProposalSet, R_prime: ProposalSet, matches: MatchSet, anchors: AnchorIndex) -> FlowField:
    """
    锚点区域 s -> 匹配区域 s' 的逐轴线性变换:
        p' = (x' + (px - x) * w'/w, y' + (py - y) * h'/h)
    多个源像素落到同一取整目标像素时，仅保留得分最高者（平局取行优先顺序靠前者）
    """
    height, width = anchors.ids.shape
    flow = FlowField.zeros(width, height)
    anchored = anchors.ids != NO_ANCHOR
    if not np.any(anchored):
        return flow

    src_boxes = R.boxes
    dst_boxes = R_prime.boxes
    dst_of = np.zeros(len(R), dtype=np.int64)
    for entry in matches.entries:
        dst_of[entry.src_id] = entry.dst_id

    py, px = np.nonzero(anchored)
    a = anchors.ids[py, px]
    s = src_boxes[a]
    d = dst_boxes[dst_of[a]]
    tx = d[:, 0] + (px - s[:, 0]) * d[:, 2] / s[:, 2]
    ty = d[:, 1] + (py - s[:, 1]) * d[:, 3] / s[:, 3]

    flow.u[py, px] = tx - px
    flow.v[py, px] = ty - py
    flow.score[py, px] = anchors.scores[py, px]

    # 冲突消解：按 (目标像素, 得分降序, 源像素顺序) 排序，每组只保留第一个
    key_x = np.floor(tx + 0.5).astype(np.int64)
    key_y = np.floor(ty + 0.5).astype(np.int64)
    linear = py * width + px
    order = np.lexsort((linear, -anchors.scores[py, px], key_x, key_y))
    kx, ky = key_x[order], key_y[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = (kx[1:] != kx[:-1]) | (ky[1:] != ky[:-1])
    keep = order[first]
    flow.valid[py[keep], px[keep]] = True
    return flow


# ==================== 补洞 ====================
def _window_radii(reach: np.ndarray) -> np.ndarray:
    """窗口半径从 4（9x9）开始倍增，直到不小于到最近有效像素的棋盘距离"""
    radii = np.full(reach.shape, 4, dtype=np.int64)
    while np.any(radii < reach):
        radii = np.where(radii < reach, radii * 2, radii)
    return radii


def _fill_inverse_distance(flow: FlowField, out: FlowField, radii: np.ndarray):
    """
    无引导图时权重只与距离有关，同一半径的空洞一次卷积求出
    以第一个有效值为基准对偏差做卷积，常数场保持精确
    """
    valid = flow.valid
    holes = ~valid
    u0 = flow.u[valid][0]
    v0 = flow.v[valid][0]
    mask = valid.astype(np.float64)
    du = np.where(valid, flow.u - u0, 0.0)
    dv = np.where(valid, flow.v - v0, 0.0)
    for radius in np.unique(radii[holes]):
        ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        dist = np.hypot(ys, xs)
        kernel = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
        den = signal.fftconvolve(mask, kernel, mode="same")
        num_u = signal.fftconvolve(du, kernel, mode="same")
        num_v = signal.fftconvolve(dv, kernel, mode="same")
        sel = holes & (radii == radius)
        out.u[sel] = u0 + num_u[sel] / den[sel]
        out.v[sel] = v0 + num_v[sel] / den[sel]


def fill_holes(flow: FlowField, guide: Optional[RasterImage] = None,
               sigma_s: float = settings.FILL_SIGMA_S, sigma_g: float = settings.FILL_SIGMA_G) -> FlowField:
    """
    无效像素取窗口内有效光流的加权平均：
        有引导图: w(q) = exp(-|p-q|^2 / 2σs^2) * exp(-(I(p)-I(q))^2 / 2σg^2)
        无引导图: w(q) = 1 / |p-q|
    窗口从 9x9 开始边长倍增，直到至少包含一个有效像素
    """
    valid = flow.valid
    if not np.any(valid):
        raise NoValidFlow("光流场中没有有效像素")
    out = flow.copy()
    if np.all(valid):
        return out

    # 到最近有效像素的棋盘距离决定所需窗口半径
    radii = _window_radii(ndimage.distance_transform_cdt(~valid, metric="chessboard"))
    if guide is None:
        _fill_inverse_distance(flow, out, radii)
        out.valid[:] = True
        return out

    if guide.width != flow.width or guide.height != flow.height:
        raise FormatError(
            f"引导图尺寸 {guide.width}x{guide.height} 与光流 {flow.width}x{flow.height} 不符"
        )
    intensity = guide.luminance()
    holes_y, holes_x = np.nonzero(~valid)
    for y, x in zip(holes_y, holes_x):
        radius = radii[y, x]
        rows = slice(max(0, y - radius), min(flow.height, y + radius + 1))
        cols = slice(max(0, x - radius), min(flow.width, x + radius + 1))
        qy, qx = np.nonzero(valid[rows, cols])
        qy = qy + rows.start
        qx = qx + cols.start
        d2 = (qy - y) ** 2 + (qx - x) ** 2
        exponent = -d2 / (2.0 * sigma_s ** 2) - (intensity[qy, qx] - intensity[y, x]) ** 2 / (2.0 * sigma_g ** 2)
        weights = np.exp(exponent - exponent.max())
        u0, v0 = flow.u[qy[0], qx[0]], flow.v[qy[0], qx[0]]
        out.u[y, x] = u0 + float(weights @ (flow.u[qy, qx] - u0)) / weights.sum()
        out.v[y, x] = v0 + float(weights @ (flow.v[qy, qx] - v0)) / weights.sum()
    out.valid[:] = True
    return out


# ==================== 图像扭曲 ====================
def warp_image(src_of_target: RasterImage, flow: FlowField) -> RasterImage:
    """out(p) = 第二张图在 p + (u, v) 处的双线性采样，越界取边缘值"""
    ys, xs = np.mgrid[0:flow.height, 0:flow.width].astype(np.float64)
    coords = [ys + flow.v, xs + flow.u]
    pixels = src_of_target.pixels.astype(np.float64)
    channels = [
        ndimage.map_coordinates(pixels[:, :, c], coords, order=1, mode="nearest")
        for c in range(src_of_target.channels)
    ]
    return RasterImage.from_array(np.stack(channels, axis=2))
