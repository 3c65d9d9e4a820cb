#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
API 路由定义
输入均为服务器端文件路径；生成的文件写入临时目录后直接返回，指标以 JSON 返回
"""

import os
import shutil
from typing import List, Optional

from fastapi import APIRouter, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from app.core.errors import PropFlowError
from app.core.queue import get_task_queue
from app.services import pipeline
from app.services.report import generate_temp_path
from app.services.synth import SynthConfig, suite_config

router = APIRouter(prefix="/api", tags=["语义匹配"])


# ==================== 请求模型 ====================
class RunOptions(BaseModel):
    """运行参数，未给出的取默认值"""
    matcher: Optional[str] = Field(None, description="nam / phm / lom", example="lom")
    similarity: Optional[str] = Field(None, description="rectified_dot / chi2_kernel / l2_gaussian")
    temperature: Optional[float] = None
    sigma_xy: Optional[float] = None
    sigma_ls: Optional[float] = None
    phm_mode: Optional[str] = Field(None, description="exact / binned")
    bin_xy: Optional[float] = None
    bin_ls: Optional[float] = None
    max_proposals: Optional[int] = None
    alpha: Optional[float] = None
    seed: Optional[int] = None

    def run_config(self) -> pipeline.RunConfig:
        return pipeline.RunConfig.build(**self.model_dump())


class MatchRequest(RunOptions):
    src: str = Field(..., description="源图候选框清单 JSON", example="/data/pair1/proposals1.json")
    dst: str = Field(..., description="目标图候选框清单 JSON", example="/data/pair1/proposals2.json")


class FlowRequest(MatchRequest):
    matches: str = Field(..., description="匹配结果 CSV")
    guide: Optional[str] = Field(None, description="补洞引导图")


class GtgenRequest(RunOptions):
    keypoints: str = Field(..., description="关键点 JSON")
    src: str = Field(..., description="源图候选框清单 JSON")
    filter_dst: bool = False


class CurveRequest(RunOptions):
    matches: str
    dst: str
    gt: str = Field(..., description="真值 CSV")


class PckRequest(RunOptions):
    flow: str = Field(..., description=".flo 文件")
    keypoints: str
    pck_bbox: str = Field("dst", description="src / dst")


class SynthRequest(BaseModel):
    seed: int = 0
    suite: bool = Field(False, description="使用固定杂波测试集配置")
    image_size: List[int] = [200, 160]
    n_objects: int = 3
    proposals_per_object: int = 10
    n_clutter: int = 13
    n_decoys: int = Field(0, description="第二张图杂波中复制物体特征的诱饵个数")
    feature_dim: int = 32
    feature_noise_sigma: float = 0.1
    trans_sigma: float = 0.0
    logscale_sigma: float = 0.0
    global_transform: List[List[float]] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]


# ==================== 辅助函数 ====================
def _check_inputs(*paths: Optional[str]):
    for path in paths:
        if path and not os.path.exists(path):
            raise HTTPException(status_code=404, detail=f"文件不存在: {path}")


async def _run(func, *args, **kwargs):
    """排队执行，业务错误 -> 400，其他 -> 500"""
    try:
        return await get_task_queue().run_task(func, *args, **kwargs)
    except PropFlowError as e:
        raise HTTPException(status_code=400, detail=e.one_line())
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=f"文件不存在: {e.filename or e}")
    except OSError as e:
        raise HTTPException(status_code=400, detail=f"error=IO message={e.filename}: {e.strerror or e}")
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"执行失败: {str(e)}")


def _file_response(path: str, media_type: str) -> FileResponse:
    if not path or not os.path.exists(path):
        raise HTTPException(status_code=404, detail="处理失败，未找到输出文件")
    return FileResponse(path=path, filename=os.path.basename(path), media_type=media_type)


def _build_synth(request: SynthRequest) -> SynthConfig:
    if request.suite:
        return suite_config(request.seed)
    return SynthConfig.build(
        seed=request.seed,
        image_size=tuple(request.image_size),
        n_objects=request.n_objects,
        proposals_per_object=request.proposals_per_object,
        n_clutter=request.n_clutter,
        n_decoys=request.n_decoys,
        feature_dim=request.feature_dim,
        feature_noise_sigma=request.feature_noise_sigma,
        geometric_jitter={"trans_sigma": request.trans_sigma, "logscale_sigma": request.logscale_sigma},
        global_transform=request.global_transform,
    )


# ==================== API 路由 ====================
@router.post("/match", summary="区域匹配", description="返回 src_id,dst_id,score 格式的 CSV")
async def create_matches(request: MatchRequest):
    _check_inputs(request.src, request.dst)
    out = generate_temp_path("matches", "csv")
    await _run(lambda: pipeline.run_match(request.src, request.dst, out, request.run_config()))
    return _file_response(out, "text/csv")


@router.post("/flow", summary="稠密光流", description="返回 Middlebury .flo 文件")
async def create_flow(request: FlowRequest):
    _check_inputs(request.src, request.dst, request.matches, request.guide)
    out = generate_temp_path("flow", "flo")
    await _run(lambda: pipeline.run_flow(request.src, request.dst, request.matches, out,
                                         request.run_config(), guide=request.guide))
    return _file_response(out, "application/octet-stream")


@router.post("/gtgen", summary="区域真值生成", description="返回 src_region_id,gt_x,gt_y,gt_w,gt_h 格式的 CSV")
async def create_ground_truth(request: GtgenRequest):
    _check_inputs(request.keypoints, request.src)
    out = generate_temp_path("gt", "csv")
    await _run(lambda: pipeline.run_gtgen(request.keypoints, request.src, out, request.run_config(),
                                          filter_dst=request.filter_dst))
    return _file_response(out, "text/csv")


@router.post("/eval/pcr", summary="PCR 曲线面积")
async def evaluate_pcr(request: CurveRequest):
    _check_inputs(request.matches, request.dst, request.gt)
    out_dir = generate_temp_path("pcr")
    return await _run(lambda: pipeline.run_eval_pcr(request.matches, request.dst, request.gt,
                                                    out_dir, request.run_config()))


@router.post("/eval/miou", summary="mIoU@k 曲线面积")
async def evaluate_miou(request: CurveRequest):
    _check_inputs(request.matches, request.dst, request.gt)
    out_dir = generate_temp_path("miou")
    return await _run(lambda: pipeline.run_eval_miou(request.matches, request.dst, request.gt,
                                                     out_dir, request.run_config()))


@router.post("/eval/pck", summary="稠密光流 PCK")
async def evaluate_pck(request: PckRequest):
    _check_inputs(request.flow, request.keypoints)
    result = await _run(lambda: pipeline.run_eval_pck(request.flow, request.keypoints,
                                                      request.run_config(), request.pck_bbox))
    return {"pck": result.pck, "correct": result.correct, "total": result.total, "alpha": result.alpha}


@router.post("/synth", summary="合成数据", description="返回包含图像、清单、特征、关键点与真值的 zip 包")
async def create_synth(request: SynthRequest):
    out_dir = generate_temp_path("synth")

    def _job():
        pipeline.run_synth(_build_synth(request), out_dir)
        return shutil.make_archive(out_dir, "zip", out_dir)

    archive = await _run(_job)
    return _file_response(archive, "application/zip")
