#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
任务队列管理器
- API：信号量控制并发数，实现请求排队处理
- 批处理：线程池按输入顺序返回结果，保证与串行执行一致
"""

import asyncio
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, List

from app.core.config import settings


class TaskQueue:
    """任务队列管理器"""

    _instance = None
    _semaphore: asyncio.Semaphore = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def get_semaphore(self) -> asyncio.Semaphore:
        """获取或创建信号量（需要在事件循环中创建）"""
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(settings.MAX_WORKERS)
        return self._semaphore

    async def run_task(self, func: Callable, *args, **kwargs) -> Any:
        """
        在队列中运行任务
        使用信号量控制并发数，同步任务放到线程池执行
        """
        semaphore = self.get_semaphore()
        async with semaphore:
            loop = asyncio.get_running_loop()
            return await loop.run_in_executor(None, lambda: func(*args, **kwargs))

    def map_ordered(self, func: Callable, items: Iterable, threads: int = 0) -> List[Any]:
        """
        并行执行 func(item)，按输入顺序返回结果
        threads 为 0 时使用 PROPFLOW_THREADS 配置
        """
        items = list(items)
        workers = threads if threads and threads > 0 else settings.worker_threads
        if workers <= 1 or len(items) <= 1:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            return list(pool.map(func, items))


# 全局队列实例
task_queue = TaskQueue()


def get_task_queue() -> TaskQueue:
    """获取任务队列实例"""
    return task_queue
