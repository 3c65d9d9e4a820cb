#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置模块
所有默认参数均可通过 PROPFLOW_ 前缀的环境变量覆盖
"""

import math
import os

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # 并发配置
    THREADS: int = 0  # 批处理线程上限，0 表示使用全部 CPU 核
    MAX_WORKERS: int = 2  # API 同时处理的任务数

    # 候选框数量控制
    MAX_PROPOSALS: int = 1000

    # 偏移空间高斯核
    SIGMA_XY_FRAC: float = 0.05  # sigma_xy = 0.05 * max(图像宽, 图像高)
    SIGMA_LS: float = math.log(2.0) / 2.0

    # 内置 HOG 描述子
    HOG_CELLS: int = 8
    HOG_CELL_PX: int = 8
    HOG_BINS: int = 9

    # 光流补洞
    FILL_SIGMA_S: float = 4.0
    FILL_SIGMA_G: float = 10.0

    # 评测
    RS_MIN_OVERLAP: float = 0.75
    PCK_ALPHA: float = 0.1
    IOU_THRESH: float = 0.5
    PCR_SAMPLES: int = 101

    # 临时文件目录（API 输出）
    TEMP_DIR: str = "/tmp/propflow"

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        env_prefix = "PROPFLOW_"

    @property
    def worker_threads(self) -> int:
        """实际使用的线程数"""
        if self.THREADS and self.THREADS > 0:
            return self.THREADS
        return os.cpu_count() or 1


settings = Settings()
