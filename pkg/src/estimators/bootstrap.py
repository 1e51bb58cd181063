"""
無母數 bootstrap

每次重複以 base_seed + r 重抽樣單位（攜帶各單位的樣本權重）、以相同逐步設定重新估計，
再依後驗機率一致度將類別對齊主模型，避免重複之間的標籤交換。
"""

from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from src.core.constants import BootstrapDefaults
from src.core.data_model import Dataset, ModelDescriptors
from src.core.em_engine import MixtureModel, Responsibilities, e_step
from src.core.exceptions import BootstrapFailureError, BootstrapRepetitionError, ValidationError
from src.core.logging_config import get_logger
from src.core.multi_run_manager import MultiRunManager
from src.core.type_aliases import FloatArray, IntArray, PathLike, Permutation, ProgressCallback

from .inference import PARAMETER_COLUMNS, parameter_frame, predict_proba
from .stepwise import StepwiseConfig, run_stepwise

logger = get_logger("bootstrap")

Resampler = Callable[[np.random.Generator, int], IntArray]
SAMPLE_COLUMNS = ["rep", *PARAMETER_COLUMNS]


def uniform_resampler(rng: np.random.Generator, n_units: int) -> IntArray:
    """均勻地以放回方式抽出 n_units 個單位索引"""
    return rng.integers(0, n_units, size=n_units).astype(np.int64)


def agreement_matrix(
    main_resp: Responsibilities, boot_resp: Responsibilities, weights: FloatArray
) -> FloatArray:
    """A[k, l] = Σ_i ω_i main[i, k] · boot[i, l]"""
    return (main_resp.tau * weights[:, None]).T @ boot_resp.tau


def best_permutation(agreement: FloatArray) -> Permutation:
    """
    最大化 Σ_k A[k, σ(k)] 的排列

    K ≤ 8 時窮舉（同值取字典序最小者，因此相同時為恆等排列），其餘使用匈牙利演算法。
    """
    K = agreement.shape[0]
    if K <= BootstrapDefaults.EXACT_ALIGNMENT_MAX_K:
        rows = np.arange(K)
        best: Permutation = tuple(range(K))
        best_value = float(agreement[rows, list(best)].sum())
        for candidate in permutations(range(K)):
            value = float(agreement[rows, list(candidate)].sum())
            if value > best_value:
                best, best_value = tuple(candidate), value
        return best
    _, columns = linear_sum_assignment(agreement, maximize=True)
    return tuple(int(c) for c in columns)


def align_classes(
    main_resp: Responsibilities,
    boot_model: MixtureModel,
    data_mm: Optional[Dataset],
    data_sm: Optional[Dataset] = None,
) -> Permutation:
    """
    計算 bootstrap 模型對齊主模型的排列 σ

    boot_model.permuted(σ) 的第 k 類對應主模型第 k 類。
    """
    if main_resp.n_components != boot_model.n_components:
        raise ValidationError(
            "對齊的兩個模型類別數不同",
            field_name="n_components",
            field_value=boot_model.n_components,
            expected=main_resp.n_components,
        )
    boot_resp, _ = e_step(boot_model, data_mm, data_sm)
    source = data_mm if data_mm is not None else data_sm
    assert source is not None
    return best_permutation(agreement_matrix(main_resp, boot_resp, source.weights))


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """bootstrap 結果：長格式樣本表與各 module 的平均、標準差表"""

    samples: pd.DataFrame
    n_repetitions: int
    n_failed: int = 0

    def _aggregate(self, module: str, statistic: str) -> pd.DataFrame:
        subset = self.samples[self.samples["module"] == module]
        grouped = subset.groupby(["param", "dim", "class"])["value"]
        values = grouped.mean() if statistic == "mean" else grouped.std(ddof=1)
        return values.unstack("class")

    @property
    def mm_mean(self) -> pd.DataFrame:
        return self._aggregate("mm", "mean")

    @property
    def mm_std(self) -> pd.DataFrame:
        return self._aggregate("mm", "std")

    @property
    def sm_mean(self) -> pd.DataFrame:
        return self._aggregate("sm", "mean")

    @property
    def sm_std(self) -> pd.DataFrame:
        return self._aggregate("sm", "std")

    @property
    def cw_mean(self) -> pd.DataFrame:
        return self._aggregate("cw", "mean")

    @property
    def cw_std(self) -> pd.DataFrame:
        return self._aggregate("cw", "std")

    def parameter_samples(self, param: str, dim: int = 0) -> FloatArray:
        """單一參數的 R×K 樣本矩陣（供類別差異檢定）"""
        subset = self.samples[(self.samples["param"] == param) & (self.samples["dim"] == dim)]
        if subset.empty:
            raise ValidationError(f"找不到參數 {param}[{dim}]", field_name="param", field_value=param)
        table = subset.pivot_table(index="rep", columns="class", values="value")
        return table.to_numpy(dtype=np.float64)

    def to_csv(self, path: PathLike) -> Path:
        out = Path(path)
        self.samples.to_csv(out, index=False, float_format="%.17g")
        return out


def bootstrap_stats(
    main_model: MixtureModel,
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    n_repetitions: int,
    seed: Optional[int] = None,
    n_jobs: int = 1,
    resampler: Optional[Resampler] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> BootstrapResult:
    """
    無母數 bootstrap

    Args:
        main_model: 主模型（對齊基準）
        data_mm: MM 資料
        data_sm: SM 資料，可為 None
        descriptors: MM 與 SM 描述檔
        config: 與主模型相同的逐步估計設定
        n_repetitions: 重複次數 (≥ 2)
        seed: 基礎種子，預設為 config.em_config.seed
        n_jobs: 並行重複數
        resampler: 重抽樣函數 (rng, N) -> 索引，預設為均勻放回抽樣

    Raises:
        BootstrapFailureError: 失敗的重複超過 20%
    """
    if n_repetitions < BootstrapDefaults.MIN_REPETITIONS:
        raise ValidationError(
            f"n_repetitions 必須 ≥ {BootstrapDefaults.MIN_REPETITIONS}",
            field_name="n_repetitions",
            field_value=n_repetitions,
        )
    base_seed = config.em_config.seed if seed is None else int(seed)
    resample = resampler or uniform_resampler
    N = data_mm.n_units

    def fit_repetition(r: int) -> Tuple[MixtureModel, Dataset, Optional[Dataset]]:
        rng = np.random.default_rng(base_seed + r)
        indices = resample(rng, N)
        boot_mm = data_mm.take(indices)
        boot_sm = data_sm.take(indices) if data_sm is not None else None
        em_config = config.em_config.with_seed(base_seed + r).with_jobs(1)
        boot_model = run_stepwise(boot_mm, boot_sm, descriptors, config.with_em_config(em_config))
        return boot_model, boot_mm, boot_sm

    def repetition(r: int) -> pd.DataFrame:
        # 重抽樣可能只抽到零權重單位，或在求解時遇到奇異矩陣：只算這一次失敗
        try:
            boot_model, boot_mm, boot_sm = fit_repetition(r)
        except (ValidationError, np.linalg.LinAlgError) as e:
            raise BootstrapRepetitionError(
                f"第 {r} 次 bootstrap 重複無法估計: {e}", repetition=r, cause=type(e).__name__
            ) from e
        main_resp = predict_proba(main_model, boot_mm, boot_sm)
        order = align_classes(main_resp, boot_model, boot_mm, boot_sm)
        frame = parameter_frame(boot_model.permuted(order))
        frame.insert(0, "rep", r)
        return frame

    manager = MultiRunManager(n_jobs=n_jobs, label="bootstrap 重複", logger=logger)
    outcomes = manager.run_all(repetition, range(n_repetitions), progress_callback)
    failed = [o for o in outcomes if not o.success]
    if len(failed) > BootstrapDefaults.MAX_FAILURE_RATIO * n_repetitions:
        raise BootstrapFailureError(
            f"{len(failed)} / {n_repetitions} 次 bootstrap 重複失敗，超過容許比例",
            failed=len(failed),
            n_repetitions=n_repetitions,
        )

    frames = [o.result for o in outcomes if o.success and o.result is not None]
    samples = pd.concat(frames, ignore_index=True)[SAMPLE_COLUMNS]
    logger.log_data_info(
        "bootstrap 完成", count=len(frames), failed=len(failed), n_repetitions=n_repetitions
    )
    return BootstrapResult(samples=samples, n_repetitions=len(frames), n_failed=len(failed))
