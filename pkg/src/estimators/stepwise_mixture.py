"""
StepwiseMixture 估計器

以 fit / predict 的物件介面包裝逐步估計、推論與 bootstrap，接受 numpy 陣列、
pandas DataFrame 或 Dataset，描述檔可為家族字串或 JSON 物件。
"""

from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.core.constants import EmDefaults
from src.core.data_model import (
    Dataset,
    ModelDescriptor,
    ModelDescriptors,
    apply_encodings,
    encode_descriptor_columns,
)
from src.core.em_engine import EmConfig, MixtureModel
from src.core.exceptions import ContractError
from src.core.logging_config import get_logger
from src.core.type_aliases import FloatArray, IntArray, LevelMap, ProgressCallback

from . import inference
from .bootstrap import BootstrapResult, bootstrap_stats
from .stepwise import StepwiseConfig, fit_stepwise

logger = get_logger("stepwise_mixture")

DataLike = Union[Dataset, pd.DataFrame, np.ndarray]
DescriptorLike = Union[str, Mapping[str, Any], ModelDescriptor]


def as_dataset(values: DataLike) -> Dataset:
    """將陣列或 DataFrame 轉為 Dataset；NaN 視為缺失"""
    if isinstance(values, Dataset):
        return values
    if isinstance(values, pd.DataFrame):
        return Dataset.from_arrays(
            values.to_numpy(dtype=np.float64), column_names=[str(c) for c in values.columns]
        )
    return Dataset.from_arrays(np.asarray(values, dtype=np.float64))


class StepwiseMixture:
    """
    潛在類別混合模型的逐步估計器

    Args:
        n_components: 類別數 K
        measurement: 測量模型描述檔（家族字串或 JSON 物件）
        structural: 結構模型描述檔，None 代表只有測量模型
        n_steps: 1、2 或 3
        assignment: 三步估計的類別指派方式 soft / modal
        correction: 三步估計的校正方式 none / bch / ml
        random_state: 種子
    """

    def __init__(
        self,
        n_components: int = 2,
        measurement: DescriptorLike = "binary",
        structural: Optional[DescriptorLike] = None,
        n_steps: int = 1,
        assignment: str = "modal",
        correction: str = "none",
        max_iter: int = EmDefaults.MAX_ITER,
        abs_tol: Optional[float] = EmDefaults.ABS_TOL,
        rel_tol: Optional[float] = EmDefaults.REL_TOL,
        n_init: int = EmDefaults.N_INIT,
        random_state: int = EmDefaults.SEED,
        n_jobs: int = 1,
    ):
        self.measurement = measurement
        self.structural = structural
        self.config = StepwiseConfig(
            n_components=n_components,
            n_steps=n_steps,
            assignment=assignment,
            correction=correction,
            em_config=EmConfig(
                max_iter=max_iter,
                abs_tol=abs_tol,
                rel_tol=rel_tol,
                n_init=n_init,
                seed=random_state,
                n_jobs=n_jobs,
            ),
        )
        self.model_: Optional[MixtureModel] = None
        self.descriptors_: Optional[ModelDescriptors] = None
        self.encodings_: Dict[str, LevelMap] = {"measurement": {}, "structural": {}}

    @property
    def is_fitted(self) -> bool:
        return self.model_ is not None

    @property
    def model(self) -> MixtureModel:
        if self.model_ is None:
            raise ContractError("模型尚未擬合，請先呼叫 fit()", argument="model")
        return self.model_

    def _prepare_fit(
        self, Y: DataLike, Z: Optional[DataLike]
    ) -> Tuple[Dataset, Optional[Dataset], ModelDescriptors]:
        data_mm = as_dataset(Y)
        mm_desc = ModelDescriptor.parse(self.measurement, data_mm.n_columns)
        data_mm, mm_desc = encode_descriptor_columns(data_mm, mm_desc)

        data_sm: Optional[Dataset] = None
        sm_desc: Optional[ModelDescriptor] = None
        if Z is not None:
            if self.structural is None:
                raise ContractError("提供了結構資料 Z，但未指定 structural 描述檔", argument="Z")
            data_sm = as_dataset(Z)
            sm_desc = ModelDescriptor.parse(self.structural, data_sm.n_columns)
            data_sm, sm_desc = encode_descriptor_columns(data_sm, sm_desc)
        elif self.structural is not None:
            raise ContractError("指定了 structural 描述檔，但未提供結構資料 Z", argument="Z")
        return data_mm, data_sm, ModelDescriptors(mm_desc, sm_desc)

    def _prepare(self, Y: DataLike, Z: Optional[DataLike]) -> Tuple[Dataset, Optional[Dataset]]:
        data_mm = apply_encodings(as_dataset(Y), self.encodings_["measurement"])
        data_sm = None
        if Z is not None:
            data_sm = apply_encodings(as_dataset(Z), self.encodings_["structural"])
        return data_mm, data_sm

    def fit(self, Y: DataLike, Z: Optional[DataLike] = None) -> "StepwiseMixture":
        """以測量資料 Y 與（選用的）結構資料 Z 擬合模型"""
        data_mm, data_sm, descriptors = self._prepare_fit(Y, Z)
        self.model_ = fit_stepwise(data_mm, data_sm, descriptors, self.config)
        self.descriptors_ = descriptors
        self.encodings_ = {
            "measurement": dict(data_mm.level_maps),
            "structural": dict(data_sm.level_maps) if data_sm is not None else {},
        }
        return self

    def predict_proba(self, Y: DataLike, Z: Optional[DataLike] = None) -> FloatArray:
        data_mm, data_sm = self._prepare(Y, Z)
        return inference.predict_proba(self.model, data_mm, data_sm).tau

    def predict(self, Y: DataLike, Z: Optional[DataLike] = None) -> IntArray:
        data_mm, data_sm = self._prepare(Y, Z)
        return inference.predict(self.model, data_mm, data_sm)

    def score(self, Y: DataLike, Z: Optional[DataLike] = None) -> float:
        """加權平均對數概似"""
        data_mm, data_sm = self._prepare(Y, Z)
        return inference.score(self.model, data_mm, data_sm)

    def fit_stats(self, Y: DataLike, Z: Optional[DataLike] = None) -> inference.FitReportStats:
        data_mm, data_sm = self._prepare(Y, Z)
        return inference.information_criteria(self.model, data_mm, data_sm)

    def aic(self, Y: DataLike, Z: Optional[DataLike] = None) -> float:
        return self.fit_stats(Y, Z).aic

    def bic(self, Y: DataLike, Z: Optional[DataLike] = None) -> float:
        return self.fit_stats(Y, Z).bic

    def sample(self, n: int, random_state: Optional[int] = None) -> inference.SampledData:
        seed = self.config.em_config.seed if random_state is None else random_state
        return inference.sample_model(self.model, n, np.random.default_rng(seed))

    def get_mm_df(self) -> pd.DataFrame:
        return inference.get_mm_df(self.model)

    def get_sm_df(self) -> pd.DataFrame:
        return inference.get_sm_df(self.model)

    def get_cw_df(self) -> pd.DataFrame:
        return inference.get_cw_df(self.model)

    def bootstrap_stats(
        self,
        Y: DataLike,
        Z: Optional[DataLike] = None,
        n_repetitions: int = 100,
        seed: Optional[int] = None,
        progress_callback: Optional[ProgressCallback] = None,
    ) -> BootstrapResult:
        """以與擬合相同的設定執行無母數 bootstrap"""
        if self.descriptors_ is None:
            raise ContractError("模型尚未擬合，請先呼叫 fit()", argument="model")
        data_mm, data_sm = self._prepare(Y, Z)
        return bootstrap_stats(
            self.model,
            data_mm,
            data_sm,
            self.descriptors_,
            self.config,
            n_repetitions,
            seed=seed,
            n_jobs=self.config.em_config.n_jobs,
            progress_callback=progress_callback,
        )

    def report(self, Y: DataLike, Z: Optional[DataLike] = None, verbosity: int = 1) -> str:
        """模型報告文字"""
        from src.utils.report import render_report

        return render_report(self.model, self.fit_stats(Y, Z), verbosity)
