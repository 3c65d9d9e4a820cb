#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
基准报表生成服务
合成测试集的逐种子结果写成 CSV 与 Excel 工作簿（明细 + 汇总 + 运行参数）
"""

import csv
import os
import uuid
from datetime import datetime
from typing import Dict, List, Sequence

import numpy as np
import openpyxl
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from app.core.config import settings

BENCHMARK_COLUMNS = [
    "seed", "n_true", "nam_correct", "phm_correct", "lom_correct",
    "nam_pcr_auc", "phm_pcr_auc", "lom_pcr_auc", "upper_pcr_auc",
    "nam_miou_auc", "phm_miou_auc", "lom_miou_auc", "upper_miou_auc", "inlier_fraction",
]

COLUMN_TITLES = {
    "seed": "种子",
    "n_true": "真实对数",
    "nam_correct": "NAM 正确数",
    "phm_correct": "PHM 正确数",
    "lom_correct": "LOM 正确数",
    "nam_pcr_auc": "NAM PCR AuC",
    "phm_pcr_auc": "PHM PCR AuC",
    "lom_pcr_auc": "LOM PCR AuC",
    "upper_pcr_auc": "上界 PCR AuC",
    "nam_miou_auc": "NAM mIoU AuC",
    "phm_miou_auc": "PHM mIoU AuC",
    "lom_miou_auc": "LOM mIoU AuC",
    "upper_miou_auc": "上界 mIoU AuC",
    "inlier_fraction": "内点比例",
}


# ==================== 辅助函数 ====================
def ensure_temp_dir():
    """确保临时目录存在"""
    if not os.path.exists(settings.TEMP_DIR):
        os.makedirs(settings.TEMP_DIR)


def generate_temp_path(prefix: str, ext: str = "") -> str:
    """生成唯一的临时文件（或目录）路径"""
    ensure_temp_dir()
    unique_id = uuid.uuid4().hex[:8]
    timestamp = datetime.now().strftime('%Y%m%d%H%M%S')
    name = f"{prefix}_{timestamp}_{unique_id}"
    return os.path.join(settings.TEMP_DIR, f"{name}.{ext}" if ext else name)


def apply_border(ws, min_row, max_row, min_col, max_col):
    """应用边框样式"""
    thin_border = Border(
        left=Side(style='thin'),
        right=Side(style='thin'),
        top=Side(style='thin'),
        bottom=Side(style='thin')
    )
    for row in ws.iter_rows(min_row=min_row, max_row=max_row, min_col=min_col, max_col=max_col):
        for cell in row:
            cell.border = thin_border


def style_header(ws):
    header_fill = PatternFill(start_color="D3D3D3", end_color="D3D3D3", fill_type="solid")
    header_font = Font(bold=True, size=10)
    for cell in ws[1]:
        cell.fill = header_fill
        cell.font = header_font
        cell.alignment = Alignment(horizontal='center', vertical='center')


def summarize(rows: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """各列均值；seed 列除外"""
    return {
        col: float(np.mean([row[col] for row in rows]))
        for col in BENCHMARK_COLUMNS if col != "seed"
    }


# ==================== 输出 ====================
def write_benchmark_csv(path: str, rows: Sequence[Dict[str, float]]):
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BENCHMARK_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[col]) if isinstance(row[col], float) else row[col] for col in BENCHMARK_COLUMNS])


def write_benchmark_workbook(path: str, rows: Sequence[Dict[str, float]], run_cfg=None) -> str:
    """
    生成基准工作簿
    - 明细：每个种子一行
    - 汇总：各列均值，LOM 正确数严格高于 NAM 的种子数
    - 参数：本次运行的有效参数
    """
    wb = openpyxl.Workbook()
    ws_detail = wb.active
    ws_detail.title = "明细"
    ws_detail.append([COLUMN_TITLES[col] for col in BENCHMARK_COLUMNS])
    style_header(ws_detail)
    for row in rows:
        ws_detail.append([row[col] for col in BENCHMARK_COLUMNS])
    for row in ws_detail.iter_rows(min_row=2, max_row=ws_detail.max_row):
        for cell in row:
            cell.alignment = Alignment(horizontal='center', vertical='center')
            if isinstance(cell.value, float):
                cell.number_format = "0.0000"
    apply_border(ws_detail, 1, ws_detail.max_row, 1, len(BENCHMARK_COLUMNS))
    for i in range(1, len(BENCHMARK_COLUMNS) + 1):
        ws_detail.column_dimensions[get_column_letter(i)].width = 15

    ws_summary = wb.create_sheet("汇总")
    ws_summary.append(["指标", "均值"])
    style_header(ws_summary)
    if rows:
        for col, value in summarize(rows).items():
            ws_summary.append([COLUMN_TITLES[col], value])
        lom_wins = sum(1 for row in rows if row["lom_correct"] > row["nam_correct"])
        ws_summary.append(["LOM 优于 NAM 的种子数", lom_wins])
        ws_summary.append(["种子数", len(rows)])
    green_fill = PatternFill(start_color="CCFFCC", end_color="CCFFCC", fill_type="solid")
    for row in ws_summary.iter_rows(min_row=2, max_row=ws_summary.max_row):
        if isinstance(row[1].value, float):
            row[1].number_format = "0.0000"
        if str(row[0].value).startswith("LOM"):
            for cell in row:
                cell.fill = green_fill
    apply_border(ws_summary, 1, ws_summary.max_row, 1, 2)
    ws_summary.column_dimensions['A'].width = 26
    ws_summary.column_dimensions['B'].width = 15

    if run_cfg is not None:
        ws_cfg = wb.create_sheet("参数")
        ws_cfg.append(["参数", "取值"])
        style_header(ws_cfg)
        for key, value in run_cfg.model_dump().items():
            ws_cfg.append([key, "" if value is None else value])
        apply_border(ws_cfg, 1, ws_cfg.max_row, 1, 2)
        ws_cfg.column_dimensions['A'].width = 18
        ws_cfg.column_dimensions['B'].width = 18

    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    wb.save(path)
    return path
