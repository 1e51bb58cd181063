#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
逐步估計器

實作一步、兩步與三步估計：
- 一步：在完整模型 (CM) 上執行 EM
- 兩步：先估計測量模型 (MM)，再固定 MM 參數於 CM 上估計結構模型 (SM)
- 三步：估計 MM → 計算類別指派 (soft / modal) 與誤分類矩陣 D → 以指派權重估計 SM
  （校正方式 none / bch / ml）

兩步與三步的 MM 可以在另一組單位 (step1_data) 上估計；data_mm 與 data_sm
則必須是同一組單位的 MM 欄位與 SM 欄位。
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg

from src.core.constants import ErrorMessages, Numerics, StepwiseDefaults
from src.core.data_model import Dataset, ModelDescriptor, ModelDescriptors
from src.core.em_engine import (
    EmConfig,
    FitMeta,
    MixtureModel,
    e_step,
    fit_em,
    joint_log_prob,
    m_step_full,
)
from src.core.exceptions import (
    ConfigurationError,
    ContractError,
    CorrectionInfeasibleError,
    DegenerateClassError,
    ValidationError,
)
from src.core.logging_config import LoggingContext, get_logger
from src.core.type_aliases import FloatArray, PathLike

logger = get_logger("stepwise")


@dataclass(frozen=True)
class StepwiseConfig:
    """逐步估計設定；assignment 與 correction 只在 n_steps = 3 時使用"""

    n_components: int
    n_steps: int = 1
    assignment: str = "modal"
    correction: str = "none"
    em_config: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self) -> None:
        if int(self.n_components) < 1:
            raise ConfigurationError(
                f"n_components 必須 ≥ 1，目前值: {self.n_components}",
                config_section="n_components",
            )
        if self.n_steps not in StepwiseDefaults.N_STEPS:
            raise ConfigurationError(
                f"n_steps 必須為 1、2 或 3，目前值: {self.n_steps}", config_section="n_steps"
            )
        if self.assignment not in StepwiseDefaults.ASSIGNMENTS:
            raise ConfigurationError(
                f"未知的類別指派方式: {self.assignment}", config_section="assignment"
            )
        if self.correction not in StepwiseDefaults.CORRECTIONS:
            raise ConfigurationError(
                f"未知的校正方式: {self.correction}", config_section="correction"
            )

    @property
    def label(self) -> str:
        """估計方法標籤：1-step、2-step、3-naive、3-bch、3-ml"""
        if self.n_steps < 3:
            return f"{self.n_steps}-step"
        return "3-naive" if self.correction == "none" else f"3-{self.correction}"

    @classmethod
    def from_label(
        cls,
        label: str,
        n_components: int,
        em_config: Optional[EmConfig] = None,
        assignment: str = "modal",
    ) -> "StepwiseConfig":
        """由估計方法標籤建立設定"""
        em_config = em_config or EmConfig()
        if label in ("1-step", "2-step"):
            return cls(n_components, int(label[0]), em_config=em_config)
        corrections = {"3-naive": "none", "3-bch": "bch", "3-ml": "ml"}
        if label not in corrections:
            raise ConfigurationError(f"未知的估計方法: {label}", config_section="estimator")
        return cls(n_components, 3, assignment, corrections[label], em_config)

    def with_em_config(self, em_config: EmConfig) -> "StepwiseConfig":
        return replace(self, em_config=em_config)


@dataclass(frozen=True, eq=False)
class ImputedWeights:
    """三步估計的類別指派權重 (N×K)；BCH 校正後 corrected 為 True，元素可為負"""

    w: FloatArray
    corrected: bool = False

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValidationError("指派權重必須為 N×K", field_name="w", field_value=w.ndim)
        if w.shape[0] and np.max(np.abs(w.sum(axis=1) - 1.0)) > Numerics.ROW_SUM_TOL:
            raise ValidationError(
                "指派權重每列加總必須為 1", field_name="w", validation_rule="row_sum"
            )
        if not self.corrected and (np.any(w < 0) or np.any(w > 1)):
            raise ValidationError(
                "未校正的指派權重必須介於 0 與 1", field_name="w", validation_rule="range"
            )
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n_components(self) -> int:
        return int(self.w.shape[1])


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """誤分類矩陣：D[c, k] = p(W=k | X=c)，每列加總為 1"""

    D: FloatArray

    def __post_init__(self) -> None:
        D = np.array(self.D, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValidationError("D 必須為 K×K 方陣", field_name="D", field_value=D.shape)
        slack = Numerics.ROW_SUM_TOL
        if np.any(D < -slack) or np.any(D > 1 + slack):
            raise ValidationError("D 的元素必須介於 0 與 1", field_name="D", validation_rule="range")
        if np.max(np.abs(D.sum(axis=1) - 1.0)) > slack:
            raise ValidationError("D 每列加總必須為 1", field_name="D", validation_rule="row_sum")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)

    @property
    def condition_number(self) -> float:
        """1-範數條件數；奇異時為 inf"""
        return float(np.linalg.cond(self.D, 1))


@dataclass(frozen=True, eq=False)
class ThreeStepResult:
    """三步估計結果及中間產物（可匯出給不持有 MM 資料的分析者）"""

    model: MixtureModel
    step1: MixtureModel
    weights: ImputedWeights
    confusion: Optional[ConfusionMatrix] = None


def _measurement_only(descriptors: ModelDescriptors) -> ModelDescriptors:
    return ModelDescriptors(descriptors.measurement)


def _structural_only(structural: ModelDescriptor) -> ModelDescriptors:
    return ModelDescriptors(ModelDescriptor(()), structural)


def _fit_step1(
    data: Dataset, descriptors: ModelDescriptors, config: StepwiseConfig
) -> MixtureModel:
    return fit_em(
        data,
        None,
        _measurement_only(descriptors),
        config.n_components,
        config.em_config,
        estimator=config.label,
    )


def fit_one_step(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
) -> MixtureModel:
    """一步估計：在完整模型上執行 EM（無 SM 資料時即為純 MM 估計）"""
    if descriptors.structural is None:
        data_sm = None
    return fit_em(
        data_mm,
        data_sm,
        descriptors,
        config.n_components,
        config.em_config,
        estimator="1-step",
    )


def fit_two_step(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    step1_data: Optional[Dataset] = None,
) -> MixtureModel:
    """
    兩步估計

    Args:
        data_mm: 第二步單位的 MM 欄位
        data_sm: 第二步單位的 SM 欄位
        descriptors: MM 與 SM 描述檔
        config: 逐步估計設定
        step1_data: 第一步單位的 MM 欄位，預設與 data_mm 相同

    Returns:
        MM 參數與第一步完全相同的 MixtureModel
    """
    step1 = _fit_step1(step1_data if step1_data is not None else data_mm, descriptors, config)
    if descriptors.structural is None or data_sm is None:
        return step1
    return fit_em(
        data_mm,
        data_sm,
        descriptors,
        config.n_components,
        config.em_config,
        init=step1,
        freeze_measurement=True,
        estimator="2-step",
    )


def compute_assignments(mm: MixtureModel, data_mm: Dataset, assignment: str) -> ImputedWeights:
    """
    依 MM 後驗機率計算類別指派

    soft 為後驗機率本身；modal 為最大後驗類別的 one-hot（同值取最小索引）。
    """
    if assignment not in StepwiseDefaults.ASSIGNMENTS:
        raise ValidationError(
            f"未知的類別指派方式: {assignment}", field_name="assignment", field_value=assignment
        )
    resp, _ = e_step(mm.measurement_only(), data_mm, None)
    if assignment == "soft":
        return ImputedWeights(resp.tau)
    onehot = np.zeros_like(resp.tau)
    onehot[np.arange(resp.n_units), resp.modal()] = 1.0
    return ImputedWeights(onehot)


def compute_confusion(
    mm: MixtureModel, data_mm: Dataset, weights: ImputedWeights
) -> ConfusionMatrix:
    """
    以經驗分布估計誤分類矩陣

    D[c, k] = Σ_j ω_j p(X=c|y_j) w_jk / Σ_j ω_j p(X=c|y_j)，並逐列重新正規化。

    Raises:
        DegenerateClassError: 某類別的經驗邊際機率為零
    """
    if weights.corrected:
        raise ContractError("誤分類矩陣需要未校正的指派權重", argument="weights")
    resp, _ = e_step(mm.measurement_only(), data_mm, None)
    posterior = resp.tau * data_mm.weights[:, None]
    marginal = posterior.sum(axis=0)
    for c, total in enumerate(marginal):
        if not total > 0:
            raise DegenerateClassError(f"類別 {c} 的經驗邊際機率為零", class_index=c)
    D = (posterior.T @ weights.w) / marginal[:, None]
    D = np.clip(D, 0.0, None)
    return ConfusionMatrix(D / D.sum(axis=1, keepdims=True))


def bch_adjust(weights: ImputedWeights, D: ConfusionMatrix) -> ImputedWeights:
    """
    BCH 校正：每列右乘 D⁻¹

    Raises:
        CorrectionInfeasibleError: D 奇異或條件數超過上限
    """
    condition = D.condition_number
    if not np.isfinite(condition) or condition > Numerics.BCH_MAX_CONDITION:
        raise CorrectionInfeasibleError(
            ErrorMessages.BCH_INFEASIBLE.format(condition=condition),
            condition_number=condition,
        )
    try:
        # w D⁻¹ = X  ⇔  Dᵀ Xᵀ = wᵀ
        adjusted = linalg.solve(D.D.T, weights.w.T).T
    except linalg.LinAlgError as e:
        raise CorrectionInfeasibleError(
            "D 矩陣不可逆，建議改用 ML 校正", condition_number=condition
        ) from e
    return ImputedWeights(adjusted, corrected=True)


def _weighted_objective(model: MixtureModel, data_sm: Dataset, w: FloatArray) -> float:
    joint = joint_log_prob(model, None, data_sm)
    terms = np.where(w != 0, w * joint, 0.0).sum(axis=1)
    return float(np.dot(data_sm.weights, terms) / data_sm.weights.sum())


def third_step(
    data_sm: Dataset,
    weights: ImputedWeights,
    D: Optional[ConfusionMatrix],
    correction: str,
    sm_descriptor: ModelDescriptor,
    em_config: Optional[EmConfig] = None,
) -> MixtureModel:
    """
    三步估計的第三步：以指派權重估計 SM

    none / bch 以固定權重執行單次 M-step；ml 先計算 w* = w Dᵀ，再以 log w* 為固定偏移
    在 SM 上執行完整 EM，由 naive 解暖啟動。

    Returns:
        只含結構模型區塊的 MixtureModel
    """
    em_config = em_config or EmConfig()
    if correction not in StepwiseDefaults.CORRECTIONS:
        raise ValidationError(
            f"未知的校正方式: {correction}", field_name="correction", field_value=correction
        )
    if data_sm.n_units != weights.w.shape[0]:
        raise ValidationError(
            "指派權重列數與 SM 資料單位數不符",
            field_name="weights",
            field_value=weights.w.shape[0],
            expected=data_sm.n_units,
        )
    K = weights.n_components
    descriptors = _structural_only(sm_descriptor)

    if correction == "ml":
        if D is None:
            raise ContractError("ML 校正需要誤分類矩陣 D", argument="D")
        if weights.corrected:
            raise ContractError("ML 校正需要未校正的指派權重", argument="weights")
        naive = third_step(data_sm, weights, None, "none", sm_descriptor, em_config)
        w_star = weights.w @ D.D.T
        with np.errstate(divide="ignore"):
            log_offset = np.log(w_star)
        return fit_em(
            None,
            data_sm,
            descriptors,
            K,
            em_config,
            init=naive,
            log_offset=log_offset,
            estimator="3-ml",
        )

    model = m_step_full(None, data_sm, weights.w, descriptors, K)
    label = "3-bch" if weights.corrected else "3-naive"
    return model.with_meta(
        FitMeta(
            avg_log_likelihood=_weighted_objective(model, data_sm, weights.w),
            n_iter=1,
            init_index=0,
            seed=em_config.seed,
            converged=True,
            estimator=label,
        )
    )


def run_three_step(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    step1_data: Optional[Dataset] = None,
) -> ThreeStepResult:
    """三步估計並保留指派權重與 D"""
    step1 = _fit_step1(step1_data if step1_data is not None else data_mm, descriptors, config)
    weights = compute_assignments(step1, data_mm, config.assignment)
    confusion = None
    if config.correction in ("bch", "ml"):
        confusion = compute_confusion(step1, data_mm, weights)
        logger.debug(
            f"誤分類矩陣條件數 {confusion.condition_number:.6g}",
            condition_number=confusion.condition_number,
        )

    if descriptors.structural is None or data_sm is None:
        return ThreeStepResult(step1, step1, weights, confusion)

    used = weights
    if config.correction == "bch":
        assert confusion is not None
        used = bch_adjust(weights, confusion)
    sm = third_step(
        data_sm, used, confusion, config.correction, descriptors.structural, config.em_config
    )
    assembled = MixtureModel(
        n_components=config.n_components,
        class_weights=step1.class_weights,
        measurement=step1.measurement,
        structural=sm.structural,
    )
    _, avg_ll = e_step(assembled, data_mm, data_sm)
    step1_meta, sm_meta = step1.fit_meta, sm.fit_meta
    assert step1_meta is not None and sm_meta is not None
    meta = FitMeta(
        avg_log_likelihood=avg_ll,
        n_iter=step1_meta.n_iter + sm_meta.n_iter,
        init_index=step1_meta.init_index,
        seed=step1_meta.seed,
        converged=step1_meta.converged and sm_meta.converged,
        estimator=config.label,
    )
    return ThreeStepResult(assembled.with_meta(meta), step1, used, confusion)


def fit_three_step(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    step1_data: Optional[Dataset] = None,
) -> MixtureModel:
    """三步估計：回傳第一步 MM 參數與第三步 SM 參數組成的模型"""
    return run_three_step(data_mm, data_sm, descriptors, config, step1_data).model


def run_stepwise(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    step1_data: Optional[Dataset] = None,
) -> MixtureModel:
    """依 n_steps 分派到對應的估計器（不記錄日誌，供 bootstrap 與模擬研究重複呼叫）"""
    if config.n_steps == 1:
        return fit_one_step(data_mm, data_sm, descriptors, config)
    if config.n_steps == 2:
        return fit_two_step(data_mm, data_sm, descriptors, config, step1_data)
    return fit_three_step(data_mm, data_sm, descriptors, config, step1_data)


def fit_stepwise(
    data_mm: Dataset,
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    config: StepwiseConfig,
    step1_data: Optional[Dataset] = None,
) -> MixtureModel:
    """逐步估計並記錄開始、完成與耗時"""
    with LoggingContext(
        logger,
        f"{config.label} 估計",
        n_components=config.n_components,
        n_units=data_mm.n_units,
        seed=config.em_config.seed,
    ):
        model = run_stepwise(data_mm, data_sm, descriptors, config, step1_data)
    if model.fit_meta is not None:
        logger.log_metric("平均對數概似", model.fit_meta.avg_log_likelihood, estimator=config.label)
    return model


def export_weights_csv(weights: ImputedWeights, path: PathLike) -> Path:
    """匯出指派權重，每個單位一列，欄位 w0..w{K-1}"""
    out = Path(path)
    frame = pd.DataFrame(weights.w, columns=[f"w{k}" for k in range(weights.n_components)])
    frame.to_csv(out, index=False, float_format="%.17g")
    return out


def export_confusion_csv(confusion: ConfusionMatrix, path: PathLike) -> Path:
    """匯出 D 矩陣，K 列，欄位 k0..k{K-1}"""
    out = Path(path)
    K = confusion.D.shape[0]
    frame = pd.DataFrame(confusion.D, columns=[f"k{k}" for k in range(K)])
    frame.to_csv(out, index=False, float_format="%.17g")
    return out
