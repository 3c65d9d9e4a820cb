#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行入口
    python -m app <子命令> [参数]
结果以 key=value 行输出到 stdout；日志输出到 stderr；
出错时 stderr 输出一行 error=<类型> message=<描述>，退出码 1
"""

import argparse
import os
import sys
import time
from typing import List, Optional

from app.core.config import settings
from app.core.errors import ConfigError, PropFlowError
from app.services import pipeline
from app.services.features import SIMILARITY_KINDS
from app.services.matching import MATCHERS, PHM_MODES
from app.services.synth import SynthConfig, suite_config


def emit(**values):
    """key=value 结果行"""
    for key, value in values.items():
        print(f"{key}={value}")


# ==================== 参数定义 ====================
def _common_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("运行参数")
    group.add_argument("--matcher", choices=MATCHERS, default="lom", help="匹配算法")
    group.add_argument("--similarity", choices=SIMILARITY_KINDS, default="rectified_dot", help="外观相似度")
    group.add_argument("--temperature", type=float, default=None, help="l2_gaussian 温度")
    group.add_argument("--sigma-xy", type=float, default=None, help="偏移核位置带宽（像素），缺省为图像长边的 5%%")
    group.add_argument("--sigma-ls", type=float, default=None, help="偏移核对数尺度带宽，缺省 ln2/2")
    group.add_argument("--phm-mode", choices=PHM_MODES, default="binned", help="PHM 投票方式")
    group.add_argument("--bin-xy", type=float, default=None, help="PHM 位置分箱宽度")
    group.add_argument("--bin-ls", type=float, default=None, help="PHM 对数尺度分箱宽度")
    group.add_argument("--max-proposals", type=int, default=settings.MAX_PROPOSALS, help="每张图保留的候选框数")
    group.add_argument("--alpha", type=float, default=settings.PCK_ALPHA, help="PCK 阈值系数")
    group.add_argument("--iou-thresh", type=float, default=settings.IOU_THRESH, help="合成数据正确匹配 IoU 阈值")
    group.add_argument("--seed", type=int, default=0, help="随机种子")
    group.add_argument("--threads", type=int, default=0, help="线程数，0 表示 PROPFLOW_THREADS / 全部核")
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="propflow", description="基于候选区域的语义匹配与稠密光流")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[common], help="候选区域匹配")
    p.add_argument("src", help="源图候选框清单 JSON")
    p.add_argument("dst", help="目标图候选框清单 JSON")
    p.add_argument("--out", required=True, help="匹配结果 CSV")

    p = sub.add_parser("flow", parents=[common], help="由区域匹配生成稠密光流")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("matches", help="匹配结果 CSV")
    p.add_argument("--out", required=True, help="输出 .flo")
    p.add_argument("--guide", default=None, help="补洞引导图（源图）")
    p.add_argument("--warp", default=None, help="输出扭曲后的第二张图（PGM/PPM）")
    p.add_argument("--dst-image", default=None, help="第二张图路径，缺省取目标清单中的 image")

    p = sub.add_parser("gtgen", parents=[common], help="由关键点生成区域真值")
    p.add_argument("keypoints", help="关键点 JSON")
    p.add_argument("src", help="源图候选框清单 JSON")
    p.add_argument("--out", required=True, help="真值 CSV")
    p.add_argument("--filter-dst", action="store_true", help="真值框还需落在目标物体框内")

    for name in ("eval-pcr", "eval-miou"):
        p = sub.add_parser(name, parents=[common], help="PCR 曲线" if name == "eval-pcr" else "mIoU@k 曲线")
        p.add_argument("matches")
        p.add_argument("dst", help="目标图候选框清单 JSON")
        p.add_argument("gt", help="真值 CSV")
        p.add_argument("--out", required=True, help="曲线输出目录")

    p = sub.add_parser("eval-pck", parents=[common], help="稠密光流 PCK")
    p.add_argument("flow", help=".flo 文件")
    p.add_argument("keypoints")
    p.add_argument("--pck-bbox", choices=("src", "dst"), default="dst", help="决定 α·max(h, w) 的物体框")

    p = sub.add_parser("leave-n-out", parents=[common], help="留出关键点检验 TPS 真值")
    p.add_argument("keypoints")
    p.add_argument("--n", type=int, required=True, help="每次留出的关键点数")
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("synth", parents=[common], help="生成合成数据")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--suite", action="store_true", help="使用固定杂波测试集配置（忽略下列场景参数）")
    p.add_argument("--image-size", type=int, nargs=2, default=[200, 160], metavar=("W", "H"))
    p.add_argument("--n-objects", type=int, default=3)
    p.add_argument("--proposals-per-object", type=int, default=10)
    p.add_argument("--n-clutter", type=int, default=13)
    p.add_argument("--n-decoys", type=int, default=0, help="第二张图杂波中复制物体特征的诱饵个数")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1, help="特征噪声标准差")
    p.add_argument("--trans-sigma", type=float, default=0.0)
    p.add_argument("--logscale-sigma", type=float, default=0.0)
    p.add_argument("--transform", type=float, nargs=6, default=[1, 0, 0, 0, 1, 0],
                   metavar=("A", "B", "TX", "C", "D", "TY"), help="全局仿射 [[A B TX] [C D TY]]")

    p = sub.add_parser("sliding-windows", parents=[common], help="滑动窗口候选框")
    p.add_argument("image", help="PGM / PPM 图像")
    p.add_argument("--out", required=True, help="候选框清单 JSON")
    p.add_argument("--scales", type=float, nargs="+", default=None, help="窗口尺度（像素）")
    p.add_argument("--aspects", type=float, nargs="+", default=None, help="宽高比")
    p.add_argument("--stride-frac", type=float, default=0.5)

    p = sub.add_parser("benchmark", parents=[common], help="合成测试集基准")
    p.add_argument("--seeds", type=int, default=10, help="种子个数，从 --seed 开始")
    p.add_argument("--out", required=True, help="输出目录")

    p = sub.add_parser("serve", help="启动 HTTP 服务")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    return parser


def run_config(args) -> pipeline.RunConfig:
    return pipeline.RunConfig.build(
        matcher=args.matcher, similarity=args.similarity, temperature=args.temperature,
        sigma_xy=args.sigma_xy, sigma_ls=args.sigma_ls, phm_mode=args.phm_mode,
        bin_xy=args.bin_xy, bin_ls=args.bin_ls, max_proposals=args.max_proposals,
        alpha=args.alpha, iou_thresh=args.iou_thresh, seed=args.seed, threads=args.threads,
    )


def synth_config(args) -> SynthConfig:
    if args.suite:
        return suite_config(args.seed)
    t = args.transform
    return SynthConfig.build(
        seed=args.seed,
        image_size=tuple(args.image_size),
        n_objects=args.n_objects,
        proposals_per_object=args.proposals_per_object,
        n_clutter=args.n_clutter,
        n_decoys=args.n_decoys,
        feature_dim=args.feature_dim,
        feature_noise_sigma=args.noise,
        geometric_jitter={"trans_sigma": args.trans_sigma, "logscale_sigma": args.logscale_sigma},
        global_transform=[[t[0], t[1], t[2]], [t[3], t[4], t[5]]],
    )


# ==================== 子命令 ====================
def dispatch(args) -> None:
    if args.command == "serve":
        import uvicorn
        uvicorn.run("app.main:app", host=args.host, port=args.port)
        return

    cfg = run_config(args)
    pipeline.log(f"{args.command}: seed={cfg.seed}")

    if args.command == "match":
        matches = pipeline.run_match(args.src, args.dst, args.out, cfg)
        emit(matches=args.out, count=len(matches))
    elif args.command == "flow":
        flow = pipeline.run_flow(args.src, args.dst, args.matches, args.out, cfg,
                                 guide=args.guide, warp_out=args.warp, dst_image=args.dst_image)
        emit(flow=args.out, width=flow.width, height=flow.height)
        if args.warp:
            emit(warped=args.warp)
    elif args.command == "gtgen":
        gts = pipeline.run_gtgen(args.keypoints, args.src, args.out, cfg, filter_dst=args.filter_dst)
        emit(gt=args.out, count=len(gts))
    elif args.command == "eval-pcr":
        emit(**pipeline.run_eval_pcr(args.matches, args.dst, args.gt, args.out, cfg))
    elif args.command == "eval-miou":
        emit(**pipeline.run_eval_miou(args.matches, args.dst, args.gt, args.out, cfg))
    elif args.command == "eval-pck":
        result = pipeline.run_eval_pck(args.flow, args.keypoints, cfg, args.pck_bbox)
        emit(pck=result.pck, correct=result.correct, total=result.total, alpha=result.alpha)
    elif args.command == "leave-n-out":
        emit(n=args.n, pck=pipeline.run_leave_n_out(args.keypoints, args.n, args.trials, cfg))
    elif args.command == "synth":
        paths = pipeline.run_synth(synth_config(args), args.out)
        emit(**paths)
    elif args.command == "sliding-windows":
        count = pipeline.run_sliding_windows(args.image, args.out, args.scales, args.aspects, args.stride_frac)
        emit(proposals=args.out, count=count)
    elif args.command == "benchmark":
        if args.seeds < 1:
            raise ConfigError(f"--seeds 必须 >= 1: {args.seeds}")
        seeds = list(range(cfg.seed, cfg.seed + args.seeds))
        rows = pipeline.run_benchmark(seeds, args.out, cfg)
        for name in ("nam", "phm", "lom"):
            emit(**{f"{name}_mean_correct": sum(r[f"{name}_correct"] for r in rows) / len(rows)})
        emit(lom_beats_nam=sum(1 for r in rows if r["lom_correct"] > r["nam_correct"]),
             csv=os.path.join(args.out, "benchmark.csv"), xlsx=os.path.join(args.out, "benchmark.xlsx"))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    start = time.time()
    try:
        dispatch(args)
    except PropFlowError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error=FileNotFound message={e.filename or e}", file=sys.stderr)
        return 1
    except OSError as e:
        detail = " ".join(str(e.strerror or e).split())
        print(f"error=IO message={e.filename}: {detail}" if e.filename else f"error=IO message={detail}", file=sys.stderr)
        return 1
    pipeline.log(f"{args.command}: 完成，耗时 {time.time() - start:.3f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
