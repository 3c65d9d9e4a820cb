#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
文件格式读写
- 图像：PGM (P5) / PPM (P6)，8 位
- 候选框清单：JSON，特征内联或放在 PFFT 二进制附属文件中
- 匹配结果 / 真值 / 曲线：CSV，浮点数按最短往返格式输出
- 光流：Middlebury .flo（PIEH）
- 关键点：JSON
"""

import csv
import json
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.core.errors import FormatError, InvalidBox
from app.services.features import FeatureVec, HogConfig, RasterImage, hog_describe
from app.services.flowfield import FlowField
from app.services.geometry import Box
from app.services.matching import MatchEntry, MatchSet, ProposalSet, Region
from app.services.tps import GtCorrespondence, KeypointPair

PFFT_MAGIC = b"PFFT"
FLO_MAGIC = 202021.25  # 小端 float32 字节即 "PIEH"

MATCH_HEADER = ["src_id", "dst_id", "score"]
GT_HEADER = ["src_region_id", "gt_x", "gt_y", "gt_w", "gt_h"]


def fmt_float(value: float) -> str:
    """最短往返格式"""
    return repr(float(value))


def ensure_dir(path: str):
    """确保目录存在"""
    if path and not os.path.exists(path):
        os.makedirs(path)


def _validation_message(path: str, e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{path}: 字段 {loc}: {err.get('msg')}"


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{e.lineno}: JSON 解析失败: {e.msg}")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: 不是 UTF-8 编码 (字节偏移 {e.start})")


def write_json(path: str, data: dict):
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=1)
        f.write("\n")


# ==================== 图像 ====================
def read_image(path: str) -> RasterImage:
    """读取 8 位灰度 / RGB 图像"""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            data = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise FormatError(f"{path}: 无法解析图像: {e}")
    return RasterImage.from_array(data)


def write_image(path: str, img: RasterImage):
    """灰度写为 P5，RGB 写为 P6"""
    ensure_dir(os.path.dirname(path))
    data = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(np.ascontiguousarray(data)).save(path, format="PPM")


# ==================== PFFT 特征文件 ====================
def write_pfft(path: str, features: np.ndarray):
    """头部 "PFFT" + u32 N + u32 D，随后 N*D 个小端 float32"""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise FormatError(f"特征数组必须为二维，当前形状 {features.shape}")
    ensure_dir(os.path.dirname(path))
    with open(path, "wb") as f:
        f.write(PFFT_MAGIC)
        f.write(np.array(features.shape, dtype="<u4").tobytes())
        f.write(features.tobytes())


def read_pfft(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PFFT_MAGIC:
        raise FormatError(f"{path}: 特征文件头不是 PFFT")
    if len(raw) < 12:
        raise FormatError(f"{path}: 特征文件头不完整")
    n, d = (int(v) for v in np.frombuffer(raw[4:12], dtype="<u4"))
    body = raw[12:]
    if len(body) != n * d * 4:
        raise FormatError(f"{path}: 数据长度 {len(body)} 字节与 N={n}, D={d} 不符")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)


# ==================== 候选框清单 ====================
class ProposalManifest(BaseModel):
    """候选框清单；features 与 feature_file 二选一，均缺省且描述子为 hog 时由图像计算"""
    image: str = ""
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    descriptor_id: str
    boxes: List[List[float]]
    scores: Optional[List[float]] = None
    features: Optional[List[List[float]]] = None
    feature_file: Optional[str] = None

    @field_validator("boxes")
    @classmethod
    def _four_numbers(cls, value):
        for idx, box in enumerate(value):
            if len(box) != 4:
                raise ValueError(f"boxes[{idx}] 必须为 [x, y, w, h]")
        return value


def _resolve(base_dir: str, path: str) -> str:
    if not path or os.path.isabs(path):
        return path
    return os.path.join(base_dir, path)


def load_proposals(path: str, hog_cfg: Optional[HogConfig] = None) -> ProposalSet:
    """读取候选框清单及其特征"""
    try:
        manifest = ProposalManifest(**_read_json(path))
    except ValidationError as e:
        raise FormatError(_validation_message(path, e))
    base_dir = os.path.dirname(path)

    boxes = []
    for idx, values in enumerate(manifest.boxes):
        try:
            boxes.append(Box(*values))
        except InvalidBox as e:
            raise InvalidBox(f"{path}: boxes[{idx}]: {e}")

    image_path = _resolve(base_dir, manifest.image)
    if manifest.features is not None:
        feats = [np.asarray(f, dtype=np.float64) for f in manifest.features]
    elif manifest.feature_file:
        feats = list(read_pfft(_resolve(base_dir, manifest.feature_file)))
    elif manifest.descriptor_id == "hog" and image_path:
        img = read_image(image_path)
        feats = [hog_describe(img, box, hog_cfg).values for box in boxes]
    else:
        raise FormatError(f"{path}: 缺少特征（features / feature_file），且描述子不是 hog")

    if len(feats) != len(boxes):
        raise FormatError(f"{path}: 特征数量 {len(feats)} 与框数量 {len(boxes)} 不符")
    regions = [Region(i, box, FeatureVec(f, manifest.descriptor_id)) for i, (box, f) in enumerate(zip(boxes, feats))]
    return ProposalSet(manifest.width, manifest.height, regions, manifest.scores, image_path)


def save_proposals(path: str, R: ProposalSet, image: str = "", feature_file: Optional[str] = None):
    """写候选框清单；给出 feature_file 时特征写入 PFFT 附属文件（相对清单目录），否则内联"""
    data = {
        "image": image,
        "width": R.image_width,
        "height": R.image_height,
        "descriptor_id": R.descriptor_id,
        "boxes": [r.box.as_list() for r in R.regions],
    }
    if R.scores is not None:
        data["scores"] = [float(s) for s in R.scores]
    if feature_file:
        write_pfft(_resolve(os.path.dirname(path), feature_file), R.features)
        data["feature_file"] = feature_file
    else:
        data["features"] = [r.feature.values.tolist() for r in R.regions]
    write_json(path, data)


# ==================== 匹配结果 CSV ====================
def _open_csv(path: str, header: Sequence[str]):
    f = open(path, "r", encoding="utf-8", newline="")
    reader = csv.reader(f)
    try:
        first = next(reader, None)
    except UnicodeDecodeError as e:
        f.close()
        raise FormatError(f"{path}: 不是 UTF-8 编码 (字节偏移 {e.start})")
    except BaseException:
        f.close()
        raise
    if first != list(header):
        f.close()
        raise FormatError(f"{path}:1: 表头应为 {','.join(header)}，实际为 {first}")
    return f, reader


def write_matches(path: str, matches: MatchSet):
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MATCH_HEADER)
        for e in matches.entries:
            writer.writerow([e.src_id, e.dst_id, fmt_float(e.score)])


def read_matches(path: str) -> MatchSet:
    f, reader = _open_csv(path, MATCH_HEADER)
    entries = []
    with f:
        for lineno, row in enumerate(reader, start=2):
            try:
                entries.append(MatchEntry(int(row[0]), int(row[1]), float(row[2])))
            except (ValueError, IndexError):
                raise FormatError(f"{path}:{lineno}: 无法解析匹配行 {row}")
    return MatchSet(entries)


# ==================== 光流 ====================
def write_flo(path: str, flow: FlowField):
    ensure_dir(os.path.dirname(path))
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        np.stack([flow.u, flow.v], axis=2).astype("<f4").tofile(f)


def read_flo(path: str) -> FlowField:
    """读出的光流全部标记为有效"""
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise FormatError(f"{path}: 光流文件头不是 PIEH")
        dims = np.fromfile(f, "<i4", count=2)
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise FormatError(f"{path}: 光流尺寸无效")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise FormatError(f"{path}: 光流数据长度 {data.size} 与 {w}x{h} 不符")
    data = data.reshape(h, w, 2).astype(np.float64)
    return FlowField(w, h, data[:, :, 0].copy(), data[:, :, 1].copy(), np.zeros((h, w)), np.ones((h, w), dtype=bool))


# ==================== 关键点 ====================
class KeypointFile(BaseModel):
    src_image: str = ""
    dst_image: str = ""
    pairs: List[List[float]]
    src_bbox: List[float]
    dst_bbox: List[float]

    @field_validator("pairs")
    @classmethod
    def _four_coords(cls, value):
        for idx, pair in enumerate(value):
            if len(pair) != 4:
                raise ValueError(f"pairs[{idx}] 必须为 [x1, y1, x2, y2]")
        return value

    @field_validator("src_bbox", "dst_bbox")
    @classmethod
    def _bbox(cls, value):
        if len(value) != 4:
            raise ValueError("bbox 必须为 [x, y, w, h]")
        return value

    @property
    def keypoint_pairs(self) -> List[KeypointPair]:
        return [KeypointPair((p[0], p[1]), (p[2], p[3])) for p in self.pairs]

    @property
    def src_box(self) -> Box:
        return Box(*self.src_bbox)

    @property
    def dst_box(self) -> Box:
        return Box(*self.dst_bbox)


def load_keypoints(path: str) -> KeypointFile:
    try:
        return KeypointFile(**_read_json(path))
    except ValidationError as e:
        raise FormatError(_validation_message(path, e))


def save_keypoints(path: str, pairs: Sequence[KeypointPair], src_bbox: Box, dst_bbox: Box,
                   src_image: str = "", dst_image: str = ""):
    write_json(path, {
        "src_image": src_image,
        "dst_image": dst_image,
        "pairs": [[p.src[0], p.src[1], p.dst[0], p.dst[1]] for p in pairs],
        "src_bbox": src_bbox.as_list(),
        "dst_bbox": dst_bbox.as_list(),
    })


# ==================== 真值 CSV ====================
def write_gt(path: str, gts: Sequence[GtCorrespondence]):
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(GT_HEADER)
        for g in gts:
            writer.writerow([g.src_region_id] + [fmt_float(v) for v in g.gt_box.as_list()])


def read_gt(path: str) -> List[GtCorrespondence]:
    f, reader = _open_csv(path, GT_HEADER)
    gts = []
    with f:
        for lineno, row in enumerate(reader, start=2):
            try:
                gts.append(GtCorrespondence(int(row[0]), Box(*(float(v) for v in row[1:5]))))
            except (ValueError, IndexError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: 无法解析真值行 {row}: {e}")
    return gts


def write_truth(path: str, true_match: dict):
    """合成数据的真实对应关系 src_id,dst_id"""
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["src_id", "dst_id"])
        for src_id in sorted(true_match):
            writer.writerow([src_id, true_match[src_id]])


def read_truth(path: str) -> dict:
    f, reader = _open_csv(path, ["src_id", "dst_id"])
    with f:
        try:
            return {int(row[0]): int(row[1]) for row in reader}
        except (ValueError, IndexError):
            raise FormatError(f"{path}: 无法解析真实对应关系")


# ==================== 曲线 ====================
def write_curve_csv(path: str, x_name: str, xs: np.ndarray, values: np.ndarray):
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([x_name, "value"])
        for x, v in zip(xs, values):
            x_text = str(int(x)) if x_name == "k" else fmt_float(x)
            writer.writerow([x_text, fmt_float(v)])


def read_curve_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: 不是 UTF-8 编码 (字节偏移 {e.start})")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64).reshape(-1, 2)
    except ValueError:
        raise FormatError(f"{path}: 曲线数据无法解析")
    return data[:, 0], data[:, 1]


def write_curve_svg(path: str, x_name: str, xs: np.ndarray, values: np.ndarray, title: str = ""):
    """单条折线的 SVG 图"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ensure_dir(os.path.dirname(path))
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, values, linewidth=1.5)
    ax.set_xlabel(x_name)
    ax.set_ylabel("value")
    ax.set_ylim(0.0, 1.0)
    if title:
        ax.set_title(title)
    ax.grid(True, linewidth=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
