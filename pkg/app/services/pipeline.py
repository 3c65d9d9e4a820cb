#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
文件到文件的处理流程
命令行与 HTTP 接口共用：读输入 -> 调用服务模块 -> 写输出，返回可打印的结果
进度与耗时输出到 stderr，stdout 只留给 key=value 结果行
"""

import os
import sys
import time
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.core.config import settings
from app.core.errors import ConfigError, FormatError
from app.core.queue import get_task_queue
from app.services import formats
from app.services.evaluation import (
    PckResult, auc, inlier_fraction, leave_n_out, miou_at_k, pck_flow, pcr, upper_bound_matches,
)
from app.services.features import SIMILARITY_KINDS, SimilarityFn
from app.services.flowfield import FlowField, build_anchor_index, fill_holes, synthesize_flow, warp_image
from app.services.geometry import KernelParams
from app.services.matching import MATCHERS, PHM_MODES, MatchSet, PhmConfig, ProposalSet, match
from app.services.report import write_benchmark_csv, write_benchmark_workbook
from app.services.synth import SynthConfig, generate, score_against_truth, sliding_window_proposals, suite_config
from app.services.tps import generate_ground_truth, tps_fit


def log(message: str):
    print(message, file=sys.stderr, flush=True)


# ==================== 运行参数 ====================
class RunConfig(BaseModel):
    """一次运行的有效参数；未给出的核带宽 / 分箱按源图像尺寸取默认值"""
    matcher: str = "lom"
    similarity: str = "rectified_dot"
    temperature: float = Field(1.0, gt=0)
    sigma_xy: Optional[float] = Field(None, gt=0)
    sigma_ls: Optional[float] = Field(None, gt=0)
    phm_mode: str = "binned"
    bin_xy: Optional[float] = Field(None, gt=0)
    bin_ls: Optional[float] = Field(None, gt=0)
    max_proposals: int = Field(settings.MAX_PROPOSALS, ge=1)
    alpha: float = Field(settings.PCK_ALPHA, gt=0, le=1)
    iou_thresh: float = Field(settings.IOU_THRESH, ge=0, le=1)
    seed: int = Field(0, ge=0)
    threads: int = Field(0, ge=0)

    @field_validator("matcher")
    @classmethod
    def _known_matcher(cls, value):
        if value not in MATCHERS:
            raise ValueError(f"匹配算法必须为 {'/'.join(MATCHERS)}")
        return value

    @field_validator("similarity")
    @classmethod
    def _known_similarity(cls, value):
        if value not in SIMILARITY_KINDS:
            raise ValueError(f"相似度必须为 {'/'.join(SIMILARITY_KINDS)}")
        return value

    @field_validator("phm_mode")
    @classmethod
    def _known_mode(cls, value):
        if value not in PHM_MODES:
            raise ValueError(f"PHM 模式必须为 {'/'.join(PHM_MODES)}")
        return value

    @classmethod
    def build(cls, **kwargs) -> "RunConfig":
        """忽略取值为 None 的参数，校验失败转换为 ConfigError"""
        values = {k: v for k, v in kwargs.items() if v is not None}
        try:
            return cls(**values)
        except ValidationError as e:
            err = e.errors()[0]
            raise ConfigError(f"参数 {'.'.join(str(p) for p in err.get('loc', ()))} 无效: {err.get('msg')}")

    def similarity_fn(self) -> SimilarityFn:
        return SimilarityFn(self.similarity, self.temperature)

    def kernel_for(self, R: ProposalSet) -> KernelParams:
        default = KernelParams.for_image(R.image_width, R.image_height)
        return KernelParams(self.sigma_xy or default.sigma_xy, self.sigma_ls or default.sigma_ls)

    def phm_config(self, kernel: KernelParams) -> PhmConfig:
        default = PhmConfig.default(kernel, self.phm_mode)
        return PhmConfig(self.phm_mode, self.bin_xy or default.bin_xy, self.bin_ls or default.bin_ls, kernel)


def load_truncated(path: str, cfg: RunConfig) -> ProposalSet:
    R = formats.load_proposals(path)
    if len(R) > cfg.max_proposals:
        log(f"{os.path.basename(path)}: 候选框 {len(R)} 个，保留前 {cfg.max_proposals} 个")
    return R.truncate(cfg.max_proposals)


def run_matcher(R: ProposalSet, R_prime: ProposalSet, cfg: RunConfig) -> MatchSet:
    kernel = cfg.kernel_for(R)
    return match(R, R_prime, cfg.similarity_fn(), cfg.matcher, kernel, cfg.phm_config(kernel))


def _check_matches(matches: MatchSet, R: ProposalSet, R_prime: ProposalSet, path: str):
    for e in matches.entries:
        if not (0 <= e.src_id < len(R)) or not (0 <= e.dst_id < len(R_prime)):
            raise FormatError(f"{path}: 匹配 {e.src_id}->{e.dst_id} 超出候选集合范围 ({len(R)}, {len(R_prime)})")


# ==================== 匹配 ====================
def run_match(src_manifest: str, dst_manifest: str, out_csv: str, cfg: RunConfig) -> MatchSet:
    start = time.time()
    R = load_truncated(src_manifest, cfg)
    R_prime = load_truncated(dst_manifest, cfg)
    matches = run_matcher(R, R_prime, cfg)
    formats.write_matches(out_csv, matches)
    log(f"match: {cfg.matcher} |R|={len(R)} |R'|={len(R_prime)} seed={cfg.seed} 耗时 {time.time() - start:.3f}s")
    return matches


# ==================== 稠密光流 ====================
def run_flow(src_manifest: str, dst_manifest: str, matches_csv: str, out_flo: str, cfg: RunConfig,
             guide: Optional[str] = None, warp_out: Optional[str] = None,
             dst_image: Optional[str] = None) -> FlowField:
    """锚点 -> 变换 -> 补洞 -> 写 .flo；给出 warp_out 时把第二张图扭曲到第一张图网格"""
    start = time.time()
    R = load_truncated(src_manifest, cfg)
    R_prime = load_truncated(dst_manifest, cfg)
    matches = formats.read_matches(matches_csv)
    _check_matches(matches, R, R_prime, matches_csv)

    anchors = build_anchor_index(R, matches)
    raw = synthesize_flow(R, R_prime, matches, anchors)
    guide_img = formats.read_image(guide) if guide else None
    flow = fill_holes(raw, guide_img)
    formats.write_flo(out_flo, flow)
    log(f"flow: {flow.width}x{flow.height} 有效像素 {int(raw.valid.sum())} seed={cfg.seed} 耗时 {time.time() - start:.3f}s")

    if warp_out:
        target = dst_image or R_prime.image_path
        if not target:
            raise ConfigError("生成扭曲图像需要第二张图像路径")
        formats.write_image(warp_out, warp_image(formats.read_image(target), flow))
    return flow


# ==================== 真值生成 ====================
def run_gtgen(keypoints_json: str, src_manifest: str, out_csv: str, cfg: RunConfig, filter_dst: bool = False):
    kp = formats.load_keypoints(keypoints_json)
    R = load_truncated(src_manifest, cfg)
    warp = tps_fit(kp.keypoint_pairs)
    gts = generate_ground_truth(warp, R, kp.src_box, kp.dst_box, filter_dst=filter_dst)
    formats.write_gt(out_csv, gts)
    log(f"gtgen: 关键点 {len(kp.pairs)} 对，R_s {len(gts)} 个（占 {inlier_fraction(R, gts):.3f}）")
    return gts


# ==================== 评测 ====================
def _curve_outputs(out_dir: str, name: str, x_name: str, xs: np.ndarray, values: np.ndarray):
    formats.write_curve_csv(os.path.join(out_dir, f"{name}.csv"), x_name, xs, values)
    formats.write_curve_svg(os.path.join(out_dir, f"{name}.svg"), x_name, xs, values, title=name)


def run_eval_pcr(matches_csv: str, dst_manifest: str, gt_csv: str, out_dir: str, cfg: RunConfig) -> Dict[str, float]:
    R_prime = load_truncated(dst_manifest, cfg)
    curve = pcr(formats.read_matches(matches_csv), R_prime, formats.read_gt(gt_csv))
    _curve_outputs(out_dir, "pcr", "tau", curve.thresholds, curve.values)
    return {"pcr_auc": auc(curve)}


def run_eval_miou(matches_csv: str, dst_manifest: str, gt_csv: str, out_dir: str, cfg: RunConfig) -> Dict[str, float]:
    R_prime = load_truncated(dst_manifest, cfg)
    curve = miou_at_k(formats.read_matches(matches_csv), R_prime, formats.read_gt(gt_csv))
    _curve_outputs(out_dir, "miou", "k", curve.k, curve.values)
    # 面积按 k 的跨度 K - 1 归一化
    return {"miou_auc": auc(curve)}


def run_eval_pck(flo_path: str, keypoints_json: str, cfg: RunConfig, pck_bbox: str = "dst") -> PckResult:
    if pck_bbox not in ("src", "dst"):
        raise ConfigError(f"pck_bbox 必须为 src 或 dst: {pck_bbox}")
    kp = formats.load_keypoints(keypoints_json)
    flow = formats.read_flo(flo_path)
    bbox = kp.dst_box if pck_bbox == "dst" else kp.src_box
    return pck_flow(flow, kp.keypoint_pairs, bbox, cfg.alpha)


def run_leave_n_out(keypoints_json: str, n: int, trials: int, cfg: RunConfig) -> float:
    kp = formats.load_keypoints(keypoints_json)
    return leave_n_out(kp.keypoint_pairs, n, trials, cfg.alpha, cfg.seed, kp.dst_box)


# ==================== 合成数据 ====================
def run_synth(synth_cfg: SynthConfig, out_dir: str) -> Dict[str, str]:
    """输出与真实数据相同格式的整套文件"""
    start = time.time()
    pair = generate(synth_cfg)
    paths = {
        "image1": os.path.join(out_dir, "image1.pgm"),
        "image2": os.path.join(out_dir, "image2.pgm"),
        "proposals1": os.path.join(out_dir, "proposals1.json"),
        "proposals2": os.path.join(out_dir, "proposals2.json"),
        "keypoints": os.path.join(out_dir, "keypoints.json"),
        "truth": os.path.join(out_dir, "truth.csv"),
    }
    formats.write_image(paths["image1"], pair.image1)
    formats.write_image(paths["image2"], pair.image2)
    formats.save_proposals(paths["proposals1"], pair.proposals1, "image1.pgm", "proposals1.pfft")
    formats.save_proposals(paths["proposals2"], pair.proposals2, "image2.pgm", "proposals2.pfft")
    formats.save_keypoints(paths["keypoints"], pair.keypoints, pair.bbox1, pair.bbox2, "image1.pgm", "image2.pgm")
    formats.write_truth(paths["truth"], pair.true_match)
    log(f"synth: seed={synth_cfg.seed} 候选框 {len(pair.proposals1)}/{len(pair.proposals2)} 耗时 {time.time() - start:.3f}s")
    return paths


def run_sliding_windows(image_path: str, out_json: str, scales: Optional[Sequence[float]] = None,
                        aspects: Optional[Sequence[float]] = None, stride_frac: float = 0.5) -> int:
    """网格候选框清单，描述子为 hog，读入时由图像计算特征"""
    img = formats.read_image(image_path)
    kwargs = {"stride_frac": stride_frac}
    if aspects:
        kwargs["aspects"] = aspects
    boxes = sliding_window_proposals((img.width, img.height), scales or None, **kwargs)
    image_ref = os.path.relpath(os.path.abspath(image_path), os.path.dirname(os.path.abspath(out_json)))
    formats.write_json(out_json, {
        "image": image_ref,
        "width": img.width,
        "height": img.height,
        "descriptor_id": "hog",
        "boxes": [b.as_list() for b in boxes],
    })
    return len(boxes)


# ==================== 合成基准 ====================
def benchmark_seed(seed: int, cfg: RunConfig) -> Dict[str, float]:
    """单个种子：三种匹配算法的正确数与 PCR / mIoU 面积（含上界）"""
    pair = generate(suite_config(seed))
    R, R_prime = pair.proposals1, pair.proposals2
    warp = tps_fit(pair.keypoints)
    gts = generate_ground_truth(warp, R, pair.bbox1)

    row: Dict[str, float] = {"seed": seed, "n_true": len(pair.true_match)}
    for name in MATCHERS:
        run_cfg = cfg.model_copy(update={"matcher": name})
        matches = run_matcher(R, R_prime, run_cfg)
        row[f"{name}_correct"] = score_against_truth(matches, pair, cfg.iou_thresh)
        row[f"{name}_pcr_auc"] = auc(pcr(matches, R_prime, gts))
        row[f"{name}_miou_auc"] = auc(miou_at_k(matches, R_prime, gts))
    upper = upper_bound_matches(R_prime, gts)
    row["upper_pcr_auc"] = auc(pcr(upper, R_prime, gts))
    row["upper_miou_auc"] = auc(miou_at_k(upper, R_prime, gts))
    row["inlier_fraction"] = inlier_fraction(R, gts)
    return row


def run_benchmark(seeds: Sequence[int], out_dir: str, cfg: RunConfig) -> List[Dict[str, float]]:
    """多个种子并行，结果按种子顺序输出 CSV 与 xlsx"""
    start = time.time()
    rows = get_task_queue().map_ordered(lambda s: benchmark_seed(s, cfg), list(seeds), cfg.threads)
    write_benchmark_csv(os.path.join(out_dir, "benchmark.csv"), rows)
    write_benchmark_workbook(os.path.join(out_dir, "benchmark.xlsx"), rows, cfg)
    log(f"benchmark: {len(rows)} 个种子 耗时 {time.time() - start:.3f}s")
    return rows
