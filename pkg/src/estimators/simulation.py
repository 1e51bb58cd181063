"""
模擬研究

產生三種合成設計（distal outcome、covariate、兩者合併並含 MCAR 缺失），並以共同隨機數
重複估計，計算追蹤參數的平均偏誤與 RMSE。

設計固定 K = 3 個類別與 6 個二元指標：
- 前三個指標的反應機率在三個類別依序為 γ、γ、1−γ
- 後三個指標依序為 γ、1−γ、1−γ
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from src.core.constants import Families, Messages, SimulationDefaults
from src.core.data_model import (
    Dataset,
    DescriptorBlock,
    ModelDescriptor,
    ModelDescriptors,
    write_csv,
)
from src.core.em_engine import EmConfig, MixtureModel, Responsibilities
from src.core.emission_models import CovariateParams
from src.core.exceptions import NumericalError, ValidationError
from src.core.logging_config import get_logger
from src.core.multi_run_manager import MultiRunManager
from src.core.type_aliases import FloatArray, IntArray, PathLike, ProgressCallback

from .bootstrap import align_classes
from .stepwise import StepwiseConfig, run_stepwise

logger = get_logger("simulation")

SeedLike = Union[int, Sequence[int]]

STUDY_COLUMNS = ["level", "n", "estimator", "bias", "rmse", "n_ok", "n_failed"]
REPLICATION_COLUMNS = ["level", "n", "replication", "estimator", "estimate"]


def response_probabilities(separation: float) -> FloatArray:
    """K×6 的指標反應機率矩陣 π[k, d]"""
    g, h = separation, 1.0 - separation
    first = [g, g, h]
    last = [g, h, h]
    return np.array([[first[k]] * 3 + [last[k]] * 3 for k in range(SimulationDefaults.N_CLASSES)])


@dataclass(frozen=True)
class BakkDesign:
    """單一模擬設定"""

    kind: str
    n: int
    separation: float = SimulationDefaults.DEFAULT_SEPARATION
    missing_ratio: float = 0.0
    seed: SeedLike = 0

    def __post_init__(self) -> None:
        if self.kind not in SimulationDefaults.KINDS:
            raise ValidationError(
                f"未知的模擬設計: {self.kind}",
                field_name="kind",
                field_value=self.kind,
                expected=list(SimulationDefaults.KINDS),
            )
        if int(self.n) < 1:
            raise ValidationError("樣本數必須 ≥ 1", field_name="n", field_value=self.n)
        if not 0.0 < self.separation < 1.0:
            raise ValidationError(
                "separation 必須介於 0 與 1 之間",
                field_name="separation",
                field_value=self.separation,
            )
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ValidationError(
                "missing_ratio 必須在 [0, 1) 之間",
                field_name="missing_ratio",
                field_value=self.missing_ratio,
            )
        if self.missing_ratio > 0 and self.kind != "complete":
            raise ValidationError(
                "只有 complete 設計支援缺失值",
                field_name="missing_ratio",
                field_value=self.missing_ratio,
                validation_rule="complete_only",
            )

    @property
    def pi(self) -> FloatArray:
        return response_probabilities(self.separation)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed))


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """模擬資料：MM 指標、SM 欄位與真實類別"""

    data_mm: Dataset
    data_sm: Dataset
    classes: IntArray

    def true_responsibilities(self) -> Responsibilities:
        """真實類別的 one-hot 責任矩陣（用於對齊）"""
        tau = np.zeros((self.classes.shape[0], SimulationDefaults.N_CLASSES))
        tau[np.arange(self.classes.shape[0]), self.classes] = 1.0
        return Responsibilities(tau)

    def write(self, directory: PathLike, prefix: str = "sim") -> Tuple[Path, Path, Path]:
        """寫出 {prefix}_mm.csv、{prefix}_sm.csv 與 {prefix}_classes.csv"""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        mm_path = out / f"{prefix}_mm.csv"
        sm_path = out / f"{prefix}_sm.csv"
        classes_path = out / f"{prefix}_classes.csv"
        write_csv(self.data_mm, mm_path)
        write_csv(self.data_sm, sm_path)
        pd.DataFrame({"class": self.classes}).to_csv(classes_path, index=False)
        return mm_path, sm_path, classes_path


def _draw_classes(
    design: BakkDesign, rng: np.random.Generator
) -> Tuple[IntArray, Optional[FloatArray]]:
    K = SimulationDefaults.N_CLASSES
    if design.kind == "response":
        classes = rng.choice(K, size=design.n, p=np.asarray(SimulationDefaults.CLASS_WEIGHTS))
        return classes.astype(np.int64), None

    levels = np.asarray(SimulationDefaults.COVARIATE_LEVELS, dtype=np.float64)
    z = rng.choice(levels, size=design.n)
    beta = np.asarray(SimulationDefaults.COVARIATE_BETA)
    b = np.asarray(SimulationDefaults.COVARIATE_INTERCEPT)
    probs = softmax(z[:, None] * beta + b, axis=1)
    u = rng.random(design.n)
    classes = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), K - 1)
    return classes.astype(np.int64), z


def generate(design: BakkDesign) -> SimulatedData:
    """
    依設計產生一組資料

    response: Z 為 distal outcome；covariate: Z 為 covariate；
    complete: Z = [covariate, outcome]，指標與 outcome 依 missing_ratio 做 MCAR 遮罩。
    """
    rng = design.rng()
    classes, covariate = _draw_classes(design, rng)
    n, D = design.n, SimulationDefaults.N_INDICATORS

    indicators = (rng.random((n, D)) < design.pi[classes]).astype(np.float64)
    columns: List[FloatArray] = []
    names: List[str] = []
    if covariate is not None:
        columns.append(covariate)
        names.append("covariate")
    if design.kind in ("response", "complete"):
        means = np.asarray(SimulationDefaults.OUTCOME_MEANS)
        columns.append(means[classes] + rng.standard_normal(n))
        names.append("outcome")
    structural = np.column_stack(columns)

    mm_mask = np.ones_like(indicators, dtype=bool)
    sm_mask = np.ones_like(structural, dtype=bool)
    if design.kind == "complete" and design.missing_ratio > 0:
        mm_mask = rng.random((n, D)) >= design.missing_ratio
        sm_mask[:, 1] = rng.random(n) >= design.missing_ratio

    data_mm = Dataset.from_arrays(
        np.where(mm_mask, indicators, np.nan),
        column_names=[f"y{d + 1}" for d in range(D)],
        missing_mask=mm_mask,
    )
    data_sm = Dataset.from_arrays(
        np.where(sm_mask, structural, np.nan), column_names=names, missing_mask=sm_mask
    )
    return SimulatedData(data_mm, data_sm, classes)


def design_descriptors(kind: str) -> ModelDescriptors:
    """各設計對應的 MM / SM 描述檔"""
    fiml = kind == "complete"
    measurement = ModelDescriptor.single(
        Families.BINARY, SimulationDefaults.N_INDICATORS, name="indicators", fiml=fiml
    )
    outcome = DescriptorBlock("outcome", Families.GAUSSIAN_UNIT, (0, 0))
    covariate = DescriptorBlock(
        "covariate", Families.COVARIATE, (0, 0), options={"method": "newton"}
    )
    if kind == "response":
        structural = ModelDescriptor((outcome,))
    elif kind == "covariate":
        structural = ModelDescriptor((covariate,))
    else:
        outcome = DescriptorBlock("outcome", Families.GAUSSIAN_UNIT, (1, 1), fiml=True)
        structural = ModelDescriptor((covariate, outcome))
    return ModelDescriptors(measurement, structural)


@dataclass(frozen=True)
class TrackedParameter:
    """研究中追蹤的單一參數"""

    block: str
    array: str
    class_index: int
    dim: int
    true_value: float
    reference: Optional[int] = None

    def extract(self, model: MixtureModel) -> float:
        block = model.block(self.block)
        if block is None:
            raise ValidationError(
                f"模型中找不到區塊 {self.block}", field_name="block", field_value=self.block
            )
        params = block.params
        if self.reference is not None:
            assert isinstance(params, CovariateParams)
            params = params.rebased(self.reference)
        return float(params.arrays()[self.array][self.class_index].reshape(-1)[self.dim])


def tracked_parameter(kind: str) -> TrackedParameter:
    """outcome 設計追蹤 μ（類別 1，真值 1）；covariate 設計追蹤以類別 0 為參考的 β（類別 2，真值 1）"""
    if kind == "covariate":
        return TrackedParameter("covariate", "beta", 2, 0, 1.0, reference=0)
    return TrackedParameter("outcome", "mu", 1, 0, 1.0)


def default_levels(kind: str) -> Tuple[float, ...]:
    if kind == "complete":
        return SimulationDefaults.MISSING_RATIOS
    return SimulationDefaults.SEPARATIONS


def level_name(kind: str) -> str:
    return "missing_ratio" if kind == "complete" else "separation"


def make_design(kind: str, level: float, n: int, seed: SeedLike) -> BakkDesign:
    if kind == "complete":
        return BakkDesign(kind, n, missing_ratio=level, seed=seed)
    return BakkDesign(kind, n, separation=level, seed=seed)


@dataclass(frozen=True, eq=False)
class StudyResult:
    """每個 (level, n, estimator) 的平均偏誤與 RMSE，以及逐次重複的估計值"""

    kind: str
    table: pd.DataFrame
    replications: pd.DataFrame
    estimators: Tuple[str, ...] = field(default=SimulationDefaults.ESTIMATORS)

    def cell(self, level: float, n: int, estimator: str) -> pd.Series:
        match = self.table[
            np.isclose(self.table["level"], level)
            & (self.table["n"] == n)
            & (self.table["estimator"] == estimator)
        ]
        if match.empty:
            raise ValidationError(
                f"找不到研究結果 ({level}, {n}, {estimator})",
                field_name="estimator",
                field_value=estimator,
            )
        return match.iloc[0]

    def to_wide(self) -> pd.DataFrame:
        """列為 level × n，欄為 estimator × {bias, rmse}，最後附上 n_ok / n_failed"""
        wide = self.table.pivot(
            index=["level", "n"], columns="estimator", values=["bias", "rmse", "n_ok", "n_failed"]
        )
        order = list(dict.fromkeys(zip(self.table["level"], self.table["n"])))
        wide = wide.reindex(pd.MultiIndex.from_tuples(order, names=["level", "n"]))
        columns = [
            (stat, est)
            for stat in ("bias", "rmse", "n_ok", "n_failed")
            for est in self.estimators
        ]
        wide = wide[columns]
        wide.columns = [f"{est}_{stat}" for stat, est in columns]
        wide = wide.reset_index().rename(columns={"level": level_name(self.kind)})
        for stat in ("n_ok", "n_failed"):
            for est in self.estimators:
                wide[f"{est}_{stat}"] = wide[f"{est}_{stat}"].astype(int)
        return wide

    def to_csv(self, path: PathLike) -> Path:
        out = Path(path)
        self.to_wide().to_csv(out, index=False, float_format="%.6f")
        return out


def _summarize(replications: pd.DataFrame, true_value: float) -> pd.DataFrame:
    error = replications["estimate"] - true_value
    frame = replications.assign(error=error, squared=error**2)
    grouped = frame.groupby(["level", "n", "estimator"], sort=False)
    table = pd.DataFrame(
        {
            "bias": grouped["error"].mean(),
            "rmse": np.sqrt(grouped["squared"].mean()),
            "n_ok": grouped["error"].count(),
            "n_failed": grouped["error"].size() - grouped["error"].count(),
        }
    ).reset_index()
    return table[STUDY_COLUMNS]


def run_study(
    kind: str,
    n_values: Sequence[int],
    levels: Optional[Sequence[float]] = None,
    n_replications: int = SimulationDefaults.DEFAULT_REPLICATIONS,
    estimators: Sequence[str] = SimulationDefaults.ESTIMATORS,
    base_seed: int = 0,
    n_jobs: int = 1,
    n_init: int = SimulationDefaults.STUDY_N_INIT,
    progress_callback: Optional[ProgressCallback] = None,
) -> StudyResult:
    """
    重複模擬研究

    第 i 個設定的第 r 次重複以 SeedSequence([base_seed, i, r]) 產生資料，所有估計方法
    共用同一份資料。三步估計一律使用 modal 指派。失敗的估計記為缺失並計入 n_failed。

    Args:
        kind: response / covariate / complete
        n_values: 樣本數
        levels: separation（complete 設計為 missing_ratio），預設為標準三種條件
        n_replications: 每個設定的重複次數
        estimators: 1-step / 2-step / 3-naive / 3-bch / 3-ml 的子集合
        base_seed: 基礎種子
        n_jobs: 並行的重複數，不影響結果
        n_init: 每次 EM 的初始化次數
    """
    if kind not in SimulationDefaults.KINDS:
        raise ValidationError(
            f"未知的模擬設計: {kind}", field_name="kind", field_value=kind
        )
    unknown = [e for e in estimators if e not in SimulationDefaults.ESTIMATORS]
    if unknown or not estimators:
        raise ValidationError(
            f"未知的估計方法: {unknown}",
            field_name="estimators",
            field_value=list(estimators),
            expected=list(SimulationDefaults.ESTIMATORS),
        )
    if n_replications < 1:
        raise ValidationError(
            "重複次數必須 ≥ 1", field_name="n_replications", field_value=n_replications
        )
    levels = tuple(default_levels(kind) if levels is None else levels)
    configs = [(float(level), int(n)) for level in levels for n in n_values]
    descriptors = design_descriptors(kind)
    tracked = tracked_parameter(kind)
    estimators = tuple(estimators)
    configs_by_label = {
        label: StepwiseConfig.from_label(label, SimulationDefaults.N_CLASSES, assignment="modal")
        for label in estimators
    }

    def replication(job: int) -> Dict[str, float]:
        index, r = divmod(job, n_replications)
        level, n = configs[index]
        data = generate(make_design(kind, level, n, seed=(base_seed, index, r)))
        truth = data.true_responsibilities()
        em_config = EmConfig(n_init=n_init, seed=base_seed + r)
        estimates: Dict[str, float] = {}
        for label in estimators:
            config = configs_by_label[label].with_em_config(em_config)
            try:
                model = run_stepwise(data.data_mm, data.data_sm, descriptors, config)
                order = align_classes(truth, model, data.data_mm, data.data_sm)
                estimates[label] = tracked.extract(model.permuted(order))
            except NumericalError as exc:
                logger.warning(
                    "估計失敗，已排除",
                    estimator=label,
                    level=level,
                    n=n,
                    replication=r,
                    error=str(exc),
                )
                estimates[label] = np.nan
        return estimates

    manager = MultiRunManager(n_jobs=n_jobs, label="模擬重複", logger=logger)
    outcomes = manager.run_all(
        replication, range(len(configs) * n_replications), progress_callback
    )

    rows = []
    for outcome in outcomes:
        index, r = divmod(outcome.index, n_replications)
        level, n = configs[index]
        estimates = outcome.result if outcome.success and outcome.result else {}
        for label in estimators:
            rows.append((level, n, r, label, estimates.get(label, np.nan)))
    replications = pd.DataFrame(rows, columns=REPLICATION_COLUMNS)
    table = _summarize(replications, tracked.true_value)

    for row in table.itertuples(index=False):
        logger.info(
            Messages.STUDY_CELL_DONE,
            kind=kind,
            level=row.level,
            n=row.n,
            estimator=row.estimator,
            bias=round(float(row.bias), 4) if np.isfinite(row.bias) else None,
            rmse=round(float(row.rmse), 4) if np.isfinite(row.rmse) else None,
            n_failed=int(row.n_failed),
        )
    return StudyResult(kind=kind, table=table, replications=replications, estimators=estimators)
