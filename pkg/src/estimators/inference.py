"""
估計後推論

預測、分數、資訊準則、生成式抽樣、參數表與類別差異 Z 檢定。
所有函數皆為無狀態，可在共享的模型上並行使用。
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from src.core.constants import ErrorMessages
from src.core.data_model import Dataset
from src.core.em_engine import MixtureModel, Responsibilities, e_step
from src.core.emission_models import CovariateParams, rebase_covariate
from src.core.exceptions import UnsupportedOperationError, ValidationError
from src.core.type_aliases import ArrayLike, IntArray

PARAMETER_COLUMNS = ["module", "param", "class", "dim", "value"]


@dataclass(frozen=True)
class FitReportStats:
    """擬合統計量；N 為樣本權重總和"""

    total_log_likelihood: float
    avg_log_likelihood: float
    n_parameters: int
    aic: float
    bic: float
    n: float
    n_components: int
    class_sizes: Tuple[float, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_log_likelihood": float(self.total_log_likelihood),
            "avg_log_likelihood": float(self.avg_log_likelihood),
            "n_parameters": int(self.n_parameters),
            "aic": float(self.aic),
            "bic": float(self.bic),
            "n": float(self.n),
            "n_components": int(self.n_components),
            "class_sizes": list(self.class_sizes),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "FitReportStats":
        return cls(
            total_log_likelihood=float(raw["total_log_likelihood"]),
            avg_log_likelihood=float(raw["avg_log_likelihood"]),
            n_parameters=int(raw["n_parameters"]),
            aic=float(raw["aic"]),
            bic=float(raw["bic"]),
            n=float(raw["n"]),
            n_components=int(raw["n_components"]),
            class_sizes=tuple(float(x) for x in raw["class_sizes"]),
        )


@dataclass(frozen=True, eq=False)
class SampledData:
    """由模型抽樣的類別與觀測值"""

    classes: IntArray
    data_mm: Dataset
    data_sm: Optional[Dataset] = None


@dataclass(frozen=True)
class ClassDifference:
    """兩類別參數差異的 bootstrap Z 檢定結果"""

    estimate: float
    se: float
    z: float
    p_value: float


def predict_proba(
    model: MixtureModel, data_mm: Optional[Dataset], data_sm: Optional[Dataset] = None
) -> Responsibilities:
    """各單位的後驗類別機率"""
    resp, _ = e_step(model, data_mm, data_sm)
    return resp


def predict(
    model: MixtureModel, data_mm: Optional[Dataset], data_sm: Optional[Dataset] = None
) -> IntArray:
    """最大後驗類別，同值取最小索引"""
    return predict_proba(model, data_mm, data_sm).modal()


def score(
    model: MixtureModel, data_mm: Optional[Dataset], data_sm: Optional[Dataset] = None
) -> float:
    """加權平均對數概似"""
    _, avg_ll = e_step(model, data_mm, data_sm)
    return avg_ll


def aic(log_likelihood: float, n_parameters: int) -> float:
    return -2.0 * log_likelihood + 2.0 * n_parameters


def bic(log_likelihood: float, n_parameters: int, n: float) -> float:
    return -2.0 * log_likelihood + float(np.log(n)) * n_parameters


def information_criteria(
    model: MixtureModel, data_mm: Optional[Dataset], data_sm: Optional[Dataset] = None
) -> FitReportStats:
    """
    計算擬合統計量

    n_parameters = Σ 區塊參數 + (K−1)（有 covariate 區塊時不計類別權重）；N = Σ ω_i。
    """
    resp, avg_ll = e_step(model, data_mm, data_sm)
    source = data_mm if data_mm is not None else data_sm
    assert source is not None
    weights = source.weights
    n = float(weights.sum())
    total = avg_ll * n
    k = model.n_parameters()
    sizes = (weights @ resp.tau) / n
    return FitReportStats(
        total_log_likelihood=total,
        avg_log_likelihood=avg_ll,
        n_parameters=k,
        aic=aic(total, k),
        bic=bic(total, k, n),
        n=n,
        n_components=model.n_components,
        class_sizes=tuple(float(s) for s in sizes),
    )


def _sample_blocks(
    blocks: Tuple[Any, ...], classes: IntArray, rng: np.random.Generator
) -> Optional[Dataset]:
    if not blocks:
        return None
    width = max(b.spec.columns[1] for b in blocks) + 1
    values = np.full((classes.shape[0], width), np.nan)
    for block in blocks:
        lo, hi = block.spec.columns
        for k in range(block.params.n_components):
            rows = np.flatnonzero(classes == k)
            if rows.size:
                values[rows, lo : hi + 1] = block.params.sample(k, rng, size=rows.size)
    return Dataset.from_arrays(values)


def sample_model(model: MixtureModel, n: int, rng: np.random.Generator) -> SampledData:
    """
    由模型抽樣：先抽 x ~ Categorical(ρ)，再依 x 抽各區塊

    Raises:
        UnsupportedOperationError: 模型含 covariate 區塊
    """
    if model.has_covariate:
        raise UnsupportedOperationError(ErrorMessages.SAMPLING_WITH_COVARIATE, operation="sample")
    if n < 1:
        raise ValidationError("抽樣數必須 ≥ 1", field_name="n", field_value=n)
    classes = rng.choice(model.n_components, size=int(n), p=model.class_weights).astype(np.int64)
    data_mm = _sample_blocks(model.measurement, classes, rng)
    if data_mm is None:
        data_mm = Dataset.from_arrays(np.empty((int(n), 0)))
    data_sm = _sample_blocks(model.structural, classes, rng)
    return SampledData(classes, data_mm, data_sm)


def class_difference_test(samples: ArrayLike, reference: int, target: int) -> ClassDifference:
    """
    兩類別參數差異的雙尾 Z 檢定

    Args:
        samples: R×K 的 bootstrap 參數值（每列一次重複）
        reference: 參考類別
        target: 比較類別

    Returns:
        估計值為差異的平均、SE 為差異的標準差 (n−1)、p = 2·(1−Φ(|Z|))
    """
    matrix = np.asarray(samples, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ValidationError(
            "需要至少兩次 bootstrap 重複的 R×K 矩陣",
            field_name="samples",
            field_value=matrix.shape,
        )
    diff = matrix[:, target] - matrix[:, reference]
    estimate = float(diff.mean())
    se = float(diff.std(ddof=1))
    if se > 0:
        z = estimate / se
    else:
        z = 0.0 if estimate == 0 else float(np.sign(estimate) * np.inf)
    p_value = float(2.0 * ndtr(-abs(z)))
    return ClassDifference(estimate=estimate, se=se, z=z, p_value=p_value)


# ---------------------------------------------------------------------------
# 參數表
# ---------------------------------------------------------------------------


def _array_rows(module: str, param: str, array: np.ndarray) -> List[Tuple[Any, ...]]:
    flat = np.asarray(array, dtype=np.float64).reshape(array.shape[0], -1)
    return [
        (module, param, k, d, float(flat[k, d]))
        for k in range(flat.shape[0])
        for d in range(flat.shape[1])
    ]


def parameter_frame(model: MixtureModel) -> pd.DataFrame:
    """
    長格式參數表

    欄位 module (cw / mm / sm)、param ("區塊名.參數名")、class、dim（類別軸以外的
    row-major 扁平索引）、value。
    """
    rows = _array_rows("cw", "class_weights", model.class_weights)
    for module, blocks in (("mm", model.measurement), ("sm", model.structural)):
        for block in blocks:
            for name, array in block.params.arrays().items():
                rows.extend(_array_rows(module, f"{block.name}.{name}", array))
    return pd.DataFrame(rows, columns=PARAMETER_COLUMNS)


def parameter_table(frame: pd.DataFrame, module: str) -> pd.DataFrame:
    """單一 module 的寬格式表：列為 (param, dim)，欄為類別"""
    subset = frame[frame["module"] == module]
    return subset.pivot_table(index=["param", "dim"], columns="class", values="value")


def get_mm_df(model: MixtureModel) -> pd.DataFrame:
    return parameter_table(parameter_frame(model), "mm")


def get_sm_df(model: MixtureModel) -> pd.DataFrame:
    return parameter_table(parameter_frame(model), "sm")


def get_cw_df(model: MixtureModel) -> pd.DataFrame:
    return parameter_table(parameter_frame(model), "cw")


def rebased_covariate(model: MixtureModel, reference: int = 0) -> Optional[CovariateParams]:
    """以 reference 類別為參考類別的 covariate 係數；模型無 covariate 時為 None"""
    block = model.covariate
    if block is None:
        return None
    assert isinstance(block.params, CovariateParams)
    return rebase_covariate(block.params, reference)
