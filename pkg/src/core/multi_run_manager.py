#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
多次執行管理器共用模組

以執行緒池並行執行彼此獨立、以整數索引標示的工作（EM 初始化、bootstrap 重複、
模擬研究的複製），逐一記錄成功或失敗，並依索引排序回傳結果，
因此結果與工作執行緒數無關。
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Generic, Iterable, List, Optional, Tuple, Type, TypeVar

from .exceptions import NumericalError
from .logging_config import EstimationLogger, get_logger
from .type_aliases import ProgressCallback

T = TypeVar("T")


@dataclass
class RunOutcome(Generic[T]):
    """單一工作的執行結果"""

    index: int
    success: bool
    result: Optional[T] = None
    error: Optional[str] = None
    exception: Optional[BaseException] = None
    duration: float = 0.0


class MultiRunManager:
    """多次執行管理器"""

    def __init__(
        self,
        n_jobs: int = 1,
        label: str = "執行",
        recoverable: Tuple[Type[BaseException], ...] = (NumericalError,),
        verbose: bool = False,
        logger: Optional[EstimationLogger] = None,
    ) -> None:
        """
        Args:
            n_jobs: 最大並行工作數
            label: 日誌中顯示的工作名稱
            recoverable: 視為「該次失敗」而非中止整體的異常類型
            verbose: 是否以 INFO 級別輸出統計
            logger: 日誌記錄器
        """
        self.n_jobs = max(1, int(n_jobs))
        self.label = label
        self.recoverable = recoverable
        self.verbose = verbose
        self.logger = logger or get_logger("multi_run_manager")

    def _run_one(self, task: Callable[[int], T], index: int) -> RunOutcome[T]:
        start = time.perf_counter()
        try:
            result = task(index)
        except self.recoverable as e:
            return RunOutcome(
                index=index,
                success=False,
                error=f"{type(e).__name__}: {e}",
                exception=e,
                duration=time.perf_counter() - start,
            )
        return RunOutcome(
            index=index, success=True, result=result, duration=time.perf_counter() - start
        )

    def run_all(
        self,
        task: Callable[[int], T],
        indices: Iterable[int],
        progress_callback: Optional[ProgressCallback] = None,
    ) -> List[RunOutcome[T]]:
        """
        執行所有工作

        Args:
            task: 接受索引並回傳結果的函數
            indices: 工作索引
            progress_callback: 進度回呼函數

        Returns:
            依索引排序的 RunOutcome 列表
        """
        index_list = list(indices)
        outcomes: List[RunOutcome[T]] = []

        if self.n_jobs == 1 or len(index_list) <= 1:
            for position, index in enumerate(index_list, 1):
                outcomes.append(self._run_one(task, index))
                if progress_callback:
                    progress_callback(f"[{position}/{len(index_list)}] {self.label} {index}")
        else:
            workers = min(self.n_jobs, len(index_list))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(self._run_one, task, index) for index in index_list]
                for position, future in enumerate(futures, 1):
                    outcomes.append(future.result())
                    if progress_callback:
                        progress_callback(f"[{position}/{len(index_list)}] {self.label}")

        outcomes.sort(key=lambda o: o.index)
        self._log_statistics(outcomes)
        return outcomes

    def _log_statistics(self, outcomes: List[RunOutcome[T]]) -> None:
        failed = [o for o in outcomes if not o.success]
        log = self.logger.info if self.verbose else self.logger.debug
        log(
            f"📊 {self.label}統計: 成功 {len(outcomes) - len(failed)} / {len(outcomes)}",
            label=self.label,
            total=len(outcomes),
            successful=len(outcomes) - len(failed),
            failed=len(failed),
            total_seconds=sum(o.duration for o in outcomes),
        )
        for outcome in failed:
            self.logger.warning(
                f"{self.label} {outcome.index} 失敗: {outcome.error}",
                index=outcome.index,
                error=outcome.error,
            )
