"""
EM 演算法引擎

對組裝好的混合模型（類別權重或 covariate 先驗、測量模型區塊、結構模型區塊）
執行 E-step、M-step、收斂判斷與多重初始化。

資料傳遞慣例：
- data_mm: 測量模型 (MM) 欄位的資料集，可為 None（第三步只用結構模型）
- data_sm: 結構模型 (SM) 欄位的資料集，可為 None（純測量模型）
兩者同時提供時必須為相同單位、相同順序，樣本權重以 data_mm 為準。
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .constants import EmDefaults, ErrorMessages, Families, Numerics
from .data_model import (
    Dataset,
    DescriptorBlock,
    ModelDescriptor,
    ModelDescriptors,
    validate_descriptor,
)
from .emission_models import (
    CovariateParams,
    EmissionParams,
    covariate_m_step,
    m_step,
    params_from_dict,
)
from .exceptions import (
    AllInitsFailedError,
    ConfigurationError,
    ContractError,
    LikelihoodUnderflowError,
    ValidationError,
)
from .logging_config import EstimationLogger, get_logger
from .multi_run_manager import MultiRunManager
from .type_aliases import FloatArray, IntArray, ParamDict

_logger = get_logger("em_engine")


@dataclass(frozen=True)
class EmConfig:
    """EM 設定"""

    max_iter: int = EmDefaults.MAX_ITER
    abs_tol: Optional[float] = EmDefaults.ABS_TOL
    rel_tol: Optional[float] = EmDefaults.REL_TOL
    n_init: int = EmDefaults.N_INIT
    seed: int = EmDefaults.SEED
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if int(self.max_iter) < 1:
            raise ConfigurationError(
                f"max_iter 必須 ≥ 1，目前值: {self.max_iter}", config_section="max_iter"
            )
        if int(self.n_init) < 1:
            raise ConfigurationError(
                f"n_init 必須 ≥ 1，目前值: {self.n_init}", config_section="n_init"
            )
        if int(self.n_jobs) < 1:
            raise ConfigurationError(
                f"n_jobs 必須 ≥ 1，目前值: {self.n_jobs}", config_section="n_jobs"
            )
        for name in ("abs_tol", "rel_tol"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ConfigurationError(f"{name} 必須 ≥ 0，目前值: {value}", config_section=name)
        if self.abs_tol is None and self.rel_tol is None:
            raise ConfigurationError(
                "abs_tol 與 rel_tol 至少需要啟用一個", config_section="tolerance"
            )

    def with_seed(self, seed: int) -> "EmConfig":
        return replace(self, seed=int(seed))

    def with_jobs(self, n_jobs: int) -> "EmConfig":
        return replace(self, n_jobs=int(n_jobs))

    def has_converged(self, previous: float, current: float) -> bool:
        """依絕對或相對平均對數概似差判斷收斂"""
        gap = abs(current - previous)
        if self.abs_tol is not None and gap < self.abs_tol:
            return True
        if self.rel_tol is not None:
            scale = max(abs(previous), np.finfo(np.float64).tiny)
            return gap / scale < self.rel_tol
        return False


@dataclass(frozen=True)
class FitMeta:
    """估計結果的中繼資料"""

    avg_log_likelihood: float
    n_iter: int
    init_index: int
    seed: int
    converged: bool
    estimator: str = "1-step"
    ll_history: Tuple[float, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "avg_log_likelihood": float(self.avg_log_likelihood),
            "n_iter": int(self.n_iter),
            "init_index": int(self.init_index),
            "seed": int(self.seed),
            "converged": bool(self.converged),
            "estimator": self.estimator,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "FitMeta":
        return cls(
            avg_log_likelihood=float(raw["avg_log_likelihood"]),
            n_iter=int(raw["n_iter"]),
            init_index=int(raw["init_index"]),
            seed=int(raw["seed"]),
            converged=bool(raw.get("converged", True)),
            estimator=str(raw.get("estimator", "1-step")),
        )


@dataclass(frozen=True, eq=False)
class FittedBlock:
    """描述檔區塊及其估計參數"""

    spec: DescriptorBlock
    params: EmissionParams

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def family(self) -> str:
        return self.spec.family

    def select(self, data: Dataset) -> Dataset:
        return data.columns(self.spec.columns)

    def permuted(self, order: Sequence[int]) -> "FittedBlock":
        return FittedBlock(self.spec, self.params.permuted(order))

    def to_dict(self) -> ParamDict:
        return {**self.spec.to_dict(), "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], default_name: str) -> "FittedBlock":
        spec = DescriptorBlock.from_dict(raw, default_name)
        return cls(spec, params_from_dict(spec.family, raw["params"], spec.fiml))


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """潛在類別混合模型：類別權重 + 測量模型區塊 + 結構模型區塊"""

    n_components: int
    class_weights: FloatArray
    measurement: Tuple[FittedBlock, ...] = ()
    structural: Tuple[FittedBlock, ...] = ()
    fit_meta: Optional[FitMeta] = None

    def __post_init__(self) -> None:
        K = int(self.n_components)
        if K < 1:
            raise ValidationError(
                "n_components 必須 ≥ 1", field_name="n_components", field_value=K
            )
        weights = np.array(self.class_weights, dtype=np.float64).reshape(-1)
        if weights.shape != (K,):
            raise ValidationError(
                "class_weights 長度必須等於 n_components",
                field_name="class_weights",
                field_value=int(weights.shape[0]),
                validation_rule="shape",
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValidationError(
                "class_weights 必須為非負有限值",
                field_name="class_weights",
                validation_rule="nonnegative",
            )
        if abs(weights.sum() - 1.0) > Numerics.CLASS_WEIGHT_SUM_TOL:
            raise ValidationError(
                f"class_weights 加總必須為 1，目前為 {weights.sum():.15g}",
                field_name="class_weights",
                field_value=float(weights.sum()),
                validation_rule="sum_to_one",
            )
        weights.setflags(write=False)

        measurement = tuple(self.measurement)
        structural = tuple(self.structural)
        for block in measurement + structural:
            if block.params.n_components != K:
                raise ValidationError(
                    f"區塊 {block.name} 的類別數與模型不符",
                    field_name=block.name,
                    field_value=block.params.n_components,
                    validation_rule="n_components",
                )
        if any(b.family == Families.COVARIATE for b in measurement):
            raise ValidationError(
                "covariate 區塊不可出現在測量模型",
                field_name="measurement",
                validation_rule="covariate_in_measurement",
            )
        if sum(b.family == Families.COVARIATE for b in structural) > 1:
            raise ValidationError(
                "結構模型最多只能有一個 covariate 區塊",
                field_name="structural",
                validation_rule="multiple_covariates",
            )

        object.__setattr__(self, "n_components", K)
        object.__setattr__(self, "class_weights", weights)
        object.__setattr__(self, "measurement", measurement)
        object.__setattr__(self, "structural", structural)

    @property
    def covariate(self) -> Optional[FittedBlock]:
        for block in self.structural:
            if block.family == Families.COVARIATE:
                return block
        return None

    @property
    def has_covariate(self) -> bool:
        return self.covariate is not None

    @property
    def blocks(self) -> Tuple[FittedBlock, ...]:
        return self.measurement + self.structural

    def block(self, name: str) -> Optional[FittedBlock]:
        for candidate in self.blocks:
            if candidate.name == name:
                return candidate
        return None

    def measurement_descriptor(self) -> ModelDescriptor:
        return ModelDescriptor(tuple(b.spec for b in self.measurement))

    def structural_descriptor(self) -> Optional[ModelDescriptor]:
        if not self.structural:
            return None
        return ModelDescriptor(tuple(b.spec for b in self.structural))

    def measurement_only(self) -> "MixtureModel":
        return replace(self, structural=())

    def with_meta(self, fit_meta: Optional[FitMeta]) -> "MixtureModel":
        return replace(self, fit_meta=fit_meta)

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        """新類別 k 取自舊類別 order[k]"""
        index = np.asarray(order, dtype=np.int64)
        return replace(
            self,
            class_weights=self.class_weights[index],
            measurement=tuple(b.permuted(index) for b in self.measurement),
            structural=tuple(b.permuted(index) for b in self.structural),
        )

    def n_parameters(self) -> int:
        """自由參數個數；無 covariate 區塊時加上 K−1 個類別權重參數"""
        total = sum(b.params.n_parameters() for b in self.blocks)
        if not self.has_covariate:
            total += self.n_components - 1
        return total

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_components": self.n_components,
            "class_weights": self.class_weights.tolist(),
            "measurement": [b.to_dict() for b in self.measurement],
            "structural": [b.to_dict() for b in self.structural] if self.structural else None,
            "fit_meta": self.fit_meta.to_dict() if self.fit_meta else None,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "MixtureModel":
        meta = raw.get("fit_meta")
        return cls(
            n_components=int(raw["n_components"]),
            class_weights=np.asarray(raw["class_weights"], dtype=np.float64),
            measurement=tuple(
                FittedBlock.from_dict(b, f"mm{i}") for i, b in enumerate(raw["measurement"])
            ),
            structural=tuple(
                FittedBlock.from_dict(b, f"sm{i}")
                for i, b in enumerate(raw.get("structural") or [])
            ),
            fit_meta=FitMeta.from_dict(meta) if meta else None,
        )


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """N×K 後驗類別機率矩陣"""

    tau: FloatArray

    def __post_init__(self) -> None:
        tau = np.array(self.tau, dtype=np.float64)
        if tau.ndim != 2:
            raise ValidationError(
                "責任矩陣必須為 N×K", field_name="tau", field_value=tau.ndim
            )
        slack = Numerics.ROW_SUM_TOL
        if np.any(tau < -slack) or np.any(tau > 1 + slack):
            raise ValidationError(
                "責任矩陣的元素必須介於 0 與 1", field_name="tau", validation_rule="range"
            )
        if tau.shape[0] and np.max(np.abs(tau.sum(axis=1) - 1.0)) > slack:
            raise ValidationError(
                "責任矩陣每列加總必須為 1", field_name="tau", validation_rule="row_stochastic"
            )
        tau.setflags(write=False)
        object.__setattr__(self, "tau", tau)

    @property
    def n_units(self) -> int:
        return int(self.tau.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.tau.shape[1])

    def modal(self) -> IntArray:
        """各列最大值的類別索引，同值取最小索引"""
        return np.argmax(self.tau, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# E-step / M-step
# ---------------------------------------------------------------------------


def _unit_weights(data_mm: Optional[Dataset], data_sm: Optional[Dataset]) -> FloatArray:
    if data_mm is not None:
        return data_mm.weights
    if data_sm is not None:
        return data_sm.weights
    raise ContractError("至少需要提供測量或結構模型資料", argument="data")


def joint_log_prob(
    model: MixtureModel,
    data_mm: Optional[Dataset] = None,
    data_sm: Optional[Dataset] = None,
    log_offset: Optional[FloatArray] = None,
) -> FloatArray:
    """
    N×K 聯合對數機率：log 先驗 + Σ 區塊 log_prob (+ 選用的固定偏移)

    先驗在有 covariate 區塊且提供 data_sm 時為 log-softmax，否則為 log class_weights。
    """
    weights = _unit_weights(data_mm, data_sm)
    N, K = weights.shape[0], model.n_components
    if data_mm is not None and data_sm is not None and data_sm.n_units != N:
        raise ValidationError(
            "測量與結構模型資料的觀測單位數不符",
            field_name="data_sm",
            field_value=data_sm.n_units,
            expected=N,
        )

    covariate = model.covariate
    with np.errstate(divide="ignore"):
        if covariate is not None and data_sm is not None:
            assert isinstance(covariate.params, CovariateParams)
            joint = covariate.params.log_prior(
                *_values_and_mask(covariate.select(data_sm))
            ).copy()
        else:
            joint = np.tile(np.log(model.class_weights), (N, 1))

    if data_mm is not None:
        for block in model.measurement:
            joint += block.params.log_prob(*_values_and_mask(block.select(data_mm)))
    if data_sm is not None:
        for block in model.structural:
            if block.family != Families.COVARIATE:
                joint += block.params.log_prob(*_values_and_mask(block.select(data_sm)))

    if log_offset is not None:
        offset = np.asarray(log_offset, dtype=np.float64)
        if offset.shape != (N, K):
            raise ContractError("log_offset 必須為 N×K", argument="log_offset")
        joint = joint + offset
    return joint


def _values_and_mask(data: Dataset) -> Tuple[FloatArray, np.ndarray]:
    return data.values, data.missing_mask


def e_step(
    model: MixtureModel,
    data_mm: Optional[Dataset] = None,
    data_sm: Optional[Dataset] = None,
    log_offset: Optional[FloatArray] = None,
) -> Tuple[Responsibilities, float]:
    """
    E-step：後驗責任矩陣與加權平均對數概似

    Returns:
        (Responsibilities, Σ ω_i·logsumexp_k / Σ ω_i)

    Raises:
        LikelihoodUnderflowError: 某單位在所有類別的聯合對數機率皆為 -inf
    """
    joint = joint_log_prob(model, data_mm, data_sm, log_offset)
    lse = logsumexp(joint, axis=1)
    bad = ~np.isfinite(lse)
    if bad.any():
        unit = int(np.flatnonzero(bad)[0])
        raise LikelihoodUnderflowError(
            ErrorMessages.LIKELIHOOD_UNDERFLOW.format(unit_index=unit), unit_index=unit
        )
    tau = np.exp(joint - lse[:, None])
    tau /= tau.sum(axis=1, keepdims=True)
    weights = _unit_weights(data_mm, data_sm)
    avg_ll = float(np.dot(weights, lse) / weights.sum())
    return Responsibilities(tau), avg_ll


def _as_matrix(resp: Union[Responsibilities, FloatArray]) -> FloatArray:
    if isinstance(resp, Responsibilities):
        return resp.tau
    return np.asarray(resp, dtype=np.float64)


def _incumbent_params(incumbent: Optional[MixtureModel], name: str) -> Optional[EmissionParams]:
    if incumbent is None:
        return None
    block = incumbent.block(name)
    return None if block is None else block.params


def m_step_full(
    data_mm: Optional[Dataset],
    data_sm: Optional[Dataset],
    resp: Union[Responsibilities, FloatArray],
    descriptors: ModelDescriptors,
    n_components: int,
    incumbent: Optional[MixtureModel] = None,
    freeze_measurement: bool = False,
) -> MixtureModel:
    """
    完整 M-step

    resp 也可以是未經驗證的權重矩陣（BCH 校正後可能為負）。
    freeze_measurement 為 True 時，類別權重與測量模型參數直接沿用 incumbent。
    """
    tau = _as_matrix(resp)
    omega = _unit_weights(data_mm, data_sm)
    K = int(n_components)
    if tau.shape != (omega.shape[0], K):
        raise ContractError(
            f"責任矩陣形狀 {tau.shape} 與資料 ({omega.shape[0]}, {K}) 不符", argument="resp"
        )

    structural_desc = descriptors.structural
    has_covariate = structural_desc is not None and structural_desc.has_covariate

    if freeze_measurement:
        if incumbent is None:
            raise ContractError("凍結測量模型需要提供既有模型", argument="incumbent")
        class_weights = incumbent.class_weights
        measurement = incumbent.measurement
    else:
        if has_covariate:
            class_weights = (
                incumbent.class_weights if incumbent is not None else np.full(K, 1.0 / K)
            )
        else:
            totals = np.clip(omega @ tau, 0.0, None)
            class_weights = (
                totals / totals.sum() if totals.sum() > 0 else np.full(K, 1.0 / K)
            )
        measurement = ()
        if data_mm is not None:
            measurement = tuple(
                FittedBlock(
                    block,
                    m_step(
                        block.family,
                        data_mm.columns(block.columns),
                        tau,
                        block.options,
                        block.fiml,
                        _incumbent_params(incumbent, block.name),
                    ),
                )
                for block in descriptors.measurement.blocks
            )

    structural: List[FittedBlock] = []
    if structural_desc is not None and data_sm is not None:
        sm_data = data_sm if np.array_equal(data_sm.weights, omega) else data_sm.with_weights(omega)
        for block in structural_desc.blocks:
            previous = _incumbent_params(incumbent, block.name)
            block_data = sm_data.columns(block.columns)
            if block.family == Families.COVARIATE:
                params: EmissionParams = covariate_m_step(
                    block_data,
                    tau,
                    block.options,
                    previous if isinstance(previous, CovariateParams) else None,
                )
            else:
                params = m_step(block.family, block_data, tau, block.options, block.fiml, previous)
            structural.append(FittedBlock(block, params))

    return MixtureModel(
        n_components=K,
        class_weights=class_weights,
        measurement=measurement,
        structural=tuple(structural),
        fit_meta=incumbent.fit_meta if incumbent is not None else None,
    )


# ---------------------------------------------------------------------------
# 多重初始化 EM
# ---------------------------------------------------------------------------


def _covers(model: Optional[MixtureModel], descriptors: ModelDescriptors, with_mm: bool) -> bool:
    if model is None:
        return False
    names = [b.name for b in descriptors.measurement.blocks] if with_mm else []
    if descriptors.structural is not None:
        names += [b.name for b in descriptors.structural.blocks]
    return all(model.block(name) is not None for name in names)


def _check_inputs(
    data_mm: Optional[Dataset],
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    n_components: int,
) -> None:
    if n_components < 1:
        raise ValidationError(
            "n_components 必須 ≥ 1", field_name="n_components", field_value=n_components
        )
    if data_mm is None and data_sm is None:
        raise ContractError("至少需要提供測量或結構模型資料", argument="data")
    if data_mm is not None:
        validate_descriptor(descriptors.measurement, data_mm, role="measurement")
    if descriptors.structural is not None:
        if data_sm is None:
            raise ContractError("結構模型描述檔需要搭配結構模型資料", argument="data_sm")
        validate_descriptor(descriptors.structural, data_sm, role="structural")
    if data_mm is not None and data_sm is not None and data_mm.n_units != data_sm.n_units:
        raise ValidationError(
            "測量與結構模型資料的觀測單位數不符",
            field_name="data_sm",
            field_value=data_sm.n_units,
            expected=data_mm.n_units,
        )


def run_em(
    data_mm: Optional[Dataset],
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    start: MixtureModel,
    config: EmConfig,
    freeze_measurement: bool = False,
    log_offset: Optional[FloatArray] = None,
    init_index: int = 0,
    estimator: str = "1-step",
    logger: Optional[EstimationLogger] = None,
) -> MixtureModel:
    """由給定的起始模型執行單次 EM 直到收斂或達到 max_iter"""
    log = logger or _logger
    model = start
    resp, avg_ll = e_step(model, data_mm, data_sm, log_offset)
    history = [avg_ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        model = m_step_full(
            data_mm,
            data_sm,
            resp,
            descriptors,
            model.n_components,
            incumbent=model,
            freeze_measurement=freeze_measurement,
        )
        resp, new_ll = e_step(model, data_mm, data_sm, log_offset)
        history.append(new_ll)
        log.debug(
            f"EM 迭代 {n_iter}: 平均對數概似 {new_ll:.12g}",
            init_index=init_index,
            iteration=n_iter,
            avg_log_likelihood=new_ll,
        )
        done = config.has_converged(avg_ll, new_ll)
        avg_ll = new_ll
        if done:
            converged = True
            break

    return model.with_meta(
        FitMeta(
            avg_log_likelihood=avg_ll,
            n_iter=n_iter,
            init_index=init_index,
            seed=config.seed + init_index,
            converged=converged,
            estimator=estimator,
            ll_history=tuple(history),
        )
    )


def fit_em(
    data_mm: Optional[Dataset],
    data_sm: Optional[Dataset],
    descriptors: ModelDescriptors,
    n_components: int,
    config: Optional[EmConfig] = None,
    init: Optional[MixtureModel] = None,
    freeze_measurement: bool = False,
    log_offset: Optional[FloatArray] = None,
    estimator: str = "1-step",
) -> MixtureModel:
    """
    多重初始化 EM

    init 涵蓋所有區塊時只從 init 執行一次；否則第 j 次初始化以 seed + j 產生
    Dirichlet(1) 隨機責任矩陣，再以一次 M-step 得到起始參數（凍結時沿用 init 的測量模型）。
    最終平均對數概似最高者勝出，同值取最小初始化索引。

    Raises:
        AllInitsFailedError: 所有初始化皆因數值問題失敗
    """
    config = config or EmConfig()
    _check_inputs(data_mm, data_sm, descriptors, n_components)
    if freeze_measurement and init is None:
        raise ContractError("凍結測量模型需要提供 init", argument="init")
    if data_mm is not None and data_sm is not None:
        if not np.array_equal(data_sm.weights, data_mm.weights):
            data_sm = data_sm.with_weights(data_mm.weights)

    K = int(n_components)
    N = _unit_weights(data_mm, data_sm).shape[0]
    from_init = _covers(init, descriptors, with_mm=data_mm is not None and not freeze_measurement)
    n_runs = 1 if from_init else config.n_init

    def run(j: int) -> MixtureModel:
        if from_init:
            assert init is not None
            start = init
        else:
            rng = np.random.default_rng(config.seed + j)
            tau = rng.dirichlet(np.ones(K), size=N)
            start = m_step_full(
                data_mm,
                data_sm,
                tau,
                descriptors,
                K,
                incumbent=init,
                freeze_measurement=freeze_measurement,
            )
        return run_em(
            data_mm,
            data_sm,
            descriptors,
            start,
            config,
            freeze_measurement=freeze_measurement,
            log_offset=log_offset,
            init_index=j,
            estimator=estimator,
        )

    manager = MultiRunManager(n_jobs=config.n_jobs, label="EM 初始化", logger=_logger)
    outcomes = manager.run_all(run, range(n_runs))

    best: Optional[MixtureModel] = None
    for outcome in outcomes:
        if not outcome.success or outcome.result is None:
            continue
        result = outcome.result
        assert result.fit_meta is not None
        if best is None or result.fit_meta.avg_log_likelihood > best.fit_meta.avg_log_likelihood:  # type: ignore[union-attr]
            best = result

    if best is None:
        failures = [f"init {o.index}: {o.error}" for o in outcomes]
        raise AllInitsFailedError(f"全部 {n_runs} 次初始化皆失敗", failures=failures)

    meta = best.fit_meta
    assert meta is not None
    _logger.debug(
        f"{estimator} EM 完成: 平均對數概似 {meta.avg_log_likelihood:.12g}",
        estimator=estimator,
        n_components=K,
        n_iter=meta.n_iter,
        init_index=meta.init_index,
        converged=meta.converged,
    )
    if not meta.converged:
        _logger.warning(
            f"⚠️ EM 在 {config.max_iter} 次迭代內未收斂",
            estimator=estimator,
            max_iter=config.max_iter,
        )
    return best

