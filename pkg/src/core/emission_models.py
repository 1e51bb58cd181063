"""
條件分布家族模組

每個家族以一個參數容器類別實作相同介面：
- log_prob: 每個觀測單位在各類別下的對數機率（支援 FIML）
- fit: 加權 M-step（Bernoulli / categorical / Gaussian 為封閉解，covariate 為數值求解）
- n_parameters: 自由參數個數
- sample: 給定類別抽樣

矩陣一律以類別為最外層索引。
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple, Type

import numpy as np
from scipy import linalg
from scipy.special import log_softmax, softmax

from .constants import ErrorMessages, Families, Numerics, SolverDefaults
from .exceptions import (
    DegenerateClassError,
    SolverDivergenceError,
    UnsupportedOperationError,
    ValidationError,
)
from .data_model import Dataset
from .type_aliases import BoolArray, FloatArray, ParamDict, SolverOptions

LOG_2PI = float(np.log(2.0 * np.pi))


def _class_totals(weights: FloatArray, mask: BoolArray) -> FloatArray:
    """各類別在「至少有一個觀測格」的單位上的有效權重總和"""
    has_observation = mask.any(axis=1) if mask.shape[1] else np.zeros(mask.shape[0], bool)
    return weights[has_observation].sum(axis=0)


def _check_degenerate(weights: FloatArray, mask: BoolArray) -> None:
    totals = _class_totals(weights, mask)
    for k, total in enumerate(totals):
        if not total > 0:
            raise DegenerateClassError(
                ErrorMessages.DEGENERATE_CLASS.format(class_index=k), class_index=k
            )


def _safe_divide(num: FloatArray, den: FloatArray, fill: float) -> FloatArray:
    out = np.full(np.broadcast(num, den).shape, fill, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


class EmissionParams(ABC):
    """單一區塊的條件分布參數容器"""

    family: ClassVar[str]
    fiml: bool

    @property
    @abstractmethod
    def n_components(self) -> int:
        """類別數 K"""

    @property
    @abstractmethod
    def n_features(self) -> int:
        """區塊欄位數 D"""

    @abstractmethod
    def log_prob(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        """N×K 對數機率矩陣"""

    @abstractmethod
    def n_parameters(self) -> int:
        """自由參數個數"""

    @abstractmethod
    def sample(
        self, class_index: int, rng: np.random.Generator, size: Optional[int] = None
    ) -> FloatArray:
        """由第 class_index 類抽樣；size 為 None 時回傳單一觀測向量"""

    @abstractmethod
    def arrays(self) -> Dict[str, np.ndarray]:
        """參數陣列（類別為第一軸）"""

    @classmethod
    @abstractmethod
    def fit(
        cls,
        values: FloatArray,
        mask: BoolArray,
        weights: FloatArray,
        options: Mapping[str, Any],
        fiml: bool,
        incumbent: Optional["EmissionParams"] = None,
    ) -> "EmissionParams":
        """加權 M-step；weights 為 N×K 有效權重 (樣本權重 × 責任)"""

    @classmethod
    @abstractmethod
    def from_arrays(cls, arrays: Mapping[str, Any], fiml: bool) -> "EmissionParams":
        """由參數陣列重建"""

    def _check_input(self, values: FloatArray, mask: BoolArray) -> None:
        if values.ndim != 2 or values.shape[1] != self.n_features:
            raise ValidationError(
                f"{self.family} 區塊欄位數不符 (dimensionality mismatch)",
                field_name="values",
                field_value=values.shape[-1] if values.ndim else None,
                validation_rule="dimensionality",
                expected=self.n_features,
            )
        if not self.fiml and not mask.all():
            raise ValidationError(
                f"{self.family} 區塊未啟用 FIML，但資料含有缺失格子",
                field_name="missing_mask",
                validation_rule="missing_without_fiml",
            )

    def permuted(self, order: Sequence[int]) -> "EmissionParams":
        """依 order 重新排列類別：新類別 k 取自舊類別 order[k]"""
        index = np.asarray(order, dtype=np.int64)
        return self.from_arrays({k: v[index] for k, v in self.arrays().items()}, self.fiml)

    def to_dict(self) -> ParamDict:
        return {name: array.tolist() for name, array in self.arrays().items()}


# ---------------------------------------------------------------------------
# binary
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BernoulliParams(EmissionParams):
    """多變量 Bernoulli：pi 為 K×D 機率矩陣"""

    family: ClassVar[str] = Families.BINARY
    pi: FloatArray
    fiml: bool = False

    def __post_init__(self) -> None:
        self.pi = np.atleast_2d(np.asarray(self.pi, dtype=np.float64))

    @property
    def n_components(self) -> int:
        return int(self.pi.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.pi.shape[1])

    @staticmethod
    def _observed(values: FloatArray, mask: BoolArray) -> FloatArray:
        y = np.where(mask, values, 0.0)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValidationError(
                "binary 區塊的觀測值必須為 0 或 1",
                field_name="values",
                validation_rule="binary_values",
            )
        return y

    def log_prob(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        self._check_input(values, mask)
        y = self._observed(values, mask)
        m = mask.astype(np.float64)
        pi = np.clip(self.pi, Numerics.PROB_CLAMP, 1.0 - Numerics.PROB_CLAMP)
        return y @ np.log(pi).T + (m - y) @ np.log1p(-pi).T

    def n_parameters(self) -> int:
        return self.n_components * self.n_features

    def sample(
        self, class_index: int, rng: np.random.Generator, size: Optional[int] = None
    ) -> FloatArray:
        shape = (self.n_features,) if size is None else (size, self.n_features)
        return (rng.random(shape) < self.pi[class_index]).astype(np.float64)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"pi": self.pi}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, Any], fiml: bool) -> "BernoulliParams":
        return cls(pi=np.asarray(arrays["pi"], dtype=np.float64), fiml=fiml)

    @classmethod
    def fit(
        cls,
        values: FloatArray,
        mask: BoolArray,
        weights: FloatArray,
        options: Mapping[str, Any],
        fiml: bool,
        incumbent: Optional[EmissionParams] = None,
    ) -> "BernoulliParams":
        _check_degenerate(weights, mask)
        y = cls._observed(values, mask)
        num = weights.T @ y
        den = weights.T @ mask.astype(np.float64)
        pi = _safe_divide(num, den, 0.5)
        pi = np.clip(pi, Numerics.PROB_CLAMP, 1.0 - Numerics.PROB_CLAMP)
        return cls(pi=pi, fiml=fiml)


# ---------------------------------------------------------------------------
# categorical
# ---------------------------------------------------------------------------


def _normalize_pmf(P: FloatArray) -> FloatArray:
    P = np.maximum(P, Numerics.PROB_CLAMP)
    P = P / P.sum(axis=-1, keepdims=True)
    return np.maximum(P, Numerics.PROB_CLAMP)


@dataclass(eq=False)
class CategoricalParams(EmissionParams):
    """多變量 categorical：P 為 K×D×C 張量"""

    family: ClassVar[str] = Families.CATEGORICAL
    P: FloatArray
    fiml: bool = False

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 3:
            raise ValidationError(
                "categorical 參數必須為 K×D×C 張量",
                field_name="P",
                field_value=self.P.ndim,
                validation_rule="shape",
            )

    @property
    def n_components(self) -> int:
        return int(self.P.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.P.shape[1])

    @property
    def n_levels(self) -> int:
        return int(self.P.shape[2])

    @staticmethod
    def _codes(values: FloatArray, mask: BoolArray, n_levels: int) -> np.ndarray:
        raw = np.where(mask, values, 0.0)
        codes = raw.astype(np.int64)
        if np.any(codes != raw) or np.any(codes < 0) or np.any(codes >= n_levels):
            raise ValidationError(
                f"categorical 區塊的觀測值必須為 0..{n_levels - 1} 的整數",
                field_name="values",
                validation_rule="categorical_codes",
            )
        return codes

    def log_prob(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        self._check_input(values, mask)
        codes = self._codes(values, mask, self.n_levels)
        log_P = np.log(np.clip(self.P, Numerics.PROB_CLAMP, 1.0))
        dims = np.arange(self.n_features)[None, :]
        # K×N×D
        per_dim = log_P[:, dims, codes] * mask[None, :, :]
        return per_dim.sum(axis=2).T

    def n_parameters(self) -> int:
        return self.n_components * self.n_features * (self.n_levels - 1)

    def sample(
        self, class_index: int, rng: np.random.Generator, size: Optional[int] = None
    ) -> FloatArray:
        n = 1 if size is None else size
        cdf = np.cumsum(self.P[class_index], axis=-1)
        cdf[:, -1] = 1.0
        draws = rng.random((n, self.n_features))
        out = (draws[:, :, None] > cdf[None, :, :]).sum(axis=-1).astype(np.float64)
        return out[0] if size is None else out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"P": self.P}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, Any], fiml: bool) -> "CategoricalParams":
        return cls(P=np.asarray(arrays["P"], dtype=np.float64), fiml=fiml)

    @classmethod
    def fit(
        cls,
        values: FloatArray,
        mask: BoolArray,
        weights: FloatArray,
        options: Mapping[str, Any],
        fiml: bool,
        incumbent: Optional[EmissionParams] = None,
    ) -> "CategoricalParams":
        _check_degenerate(weights, mask)
        observed_max = np.where(mask, values, 0.0).max() if values.size else 0.0
        n_levels = max(int(options.get("n_levels") or 0), int(observed_max) + 1)
        if isinstance(incumbent, CategoricalParams):
            n_levels = max(n_levels, incumbent.n_levels)
        codes = cls._codes(values, mask, n_levels)
        onehot = (codes[:, :, None] == np.arange(n_levels)) & mask[:, :, None]
        counts = np.einsum("nk,ndc->kdc", weights, onehot.astype(np.float64))
        totals = counts.sum(axis=-1, keepdims=True)
        P = _safe_divide(counts, totals, 1.0 / n_levels)
        return cls(P=_normalize_pmf(P), fiml=fiml)


# ---------------------------------------------------------------------------
# gaussian
# ---------------------------------------------------------------------------


GAUSSIAN_KINDS = ("unit", "spherical", "diag", "full")


@dataclass(eq=False)
class GaussianParams(EmissionParams):
    """Gaussian：mu 為 K×D；covariance 依 kind 為 None、K、K×D 或 K×D×D"""

    mu: FloatArray
    kind: str = "unit"
    covariance: Optional[FloatArray] = None
    fiml: bool = False
    _chol: Optional[List[np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in GAUSSIAN_KINDS:
            raise ValidationError(
                f"未知的 Gaussian 共變異數型態: {self.kind}",
                field_name="kind",
                field_value=self.kind,
            )
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        if self.kind == "unit":
            self.covariance = None
        else:
            self.covariance = np.asarray(self.covariance, dtype=np.float64)

    @property
    def family(self) -> str:  # type: ignore[override]
        return f"gaussian_{self.kind}"

    @property
    def n_components(self) -> int:
        return int(self.mu.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.mu.shape[1])

    def variances(self) -> FloatArray:
        """K×D 的逐維變異數（full 取對角線）"""
        K, D = self.mu.shape
        if self.kind == "unit":
            return np.ones((K, D))
        assert self.covariance is not None
        if self.kind == "spherical":
            return np.repeat(self.covariance.reshape(K, 1), D, axis=1)
        if self.kind == "diag":
            return self.covariance
        return np.diagonal(self.covariance, axis1=1, axis2=2).copy()

    def _cholesky(self) -> List[np.ndarray]:
        if self._chol is None:
            assert self.covariance is not None
            factors = []
            for k, cov in enumerate(self.covariance):
                try:
                    factors.append(linalg.cholesky(cov, lower=True))
                except linalg.LinAlgError as e:
                    raise DegenerateClassError(
                        f"類別 {k} 的共變異數矩陣非正定", class_index=k
                    ) from e
            self._chol = factors
        return self._chol

    def log_prob(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        self._check_input(values, mask)
        if self.kind == "full":
            return self._full_log_prob(values)
        y = np.where(mask, values, 0.0)
        m = mask.astype(np.float64)
        diff2 = (y[:, None, :] - self.mu[None, :, :]) ** 2 * m[:, None, :]
        if self.kind == "unit":
            n_obs = m.sum(axis=1)
            return -0.5 * (diff2.sum(axis=2) + n_obs[:, None] * LOG_2PI)
        var = self.variances()
        quad = (diff2 / var[None, :, :]).sum(axis=2)
        log_norm = m @ (np.log(var) + LOG_2PI).T
        return -0.5 * (quad + log_norm)

    def _full_log_prob(self, values: FloatArray) -> FloatArray:
        N, D = values.shape
        out = np.empty((N, self.n_components))
        for k, chol in enumerate(self._cholesky()):
            z = linalg.solve_triangular(chol, (values - self.mu[k]).T, lower=True)
            log_det = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = -0.5 * ((z**2).sum(axis=0) + log_det + D * LOG_2PI)
        return out

    def n_parameters(self) -> int:
        K, D = self.n_components, self.n_features
        extra = {"unit": 0, "spherical": K, "diag": K * D, "full": K * D * (D + 1) // 2}
        return K * D + extra[self.kind]

    def sample(
        self, class_index: int, rng: np.random.Generator, size: Optional[int] = None
    ) -> FloatArray:
        n = 1 if size is None else size
        mean = self.mu[class_index]
        if self.kind == "full":
            assert self.covariance is not None
            out = rng.multivariate_normal(mean, self.covariance[class_index], size=n)
        else:
            scale = np.sqrt(self.variances()[class_index])
            out = mean + scale * rng.standard_normal((n, self.n_features))
        return out[0] if size is None else out

    def arrays(self) -> Dict[str, np.ndarray]:
        if self.kind == "unit":
            return {"mu": self.mu}
        assert self.covariance is not None
        name = "covariance" if self.kind == "full" else "variance"
        return {"mu": self.mu, name: self.covariance}

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, Any], fiml: bool, kind: str = "unit"
    ) -> "GaussianParams":
        covariance = arrays.get("covariance", arrays.get("variance"))
        return cls(
            mu=np.asarray(arrays["mu"], dtype=np.float64),
            kind=kind,
            covariance=None if covariance is None else np.asarray(covariance, dtype=np.float64),
            fiml=fiml,
        )

    def permuted(self, order: Sequence[int]) -> "GaussianParams":
        index = np.asarray(order, dtype=np.int64)
        return GaussianParams.from_arrays(
            {k: v[index] for k, v in self.arrays().items()}, self.fiml, self.kind
        )

    @classmethod
    def fit(
        cls,
        values: FloatArray,
        mask: BoolArray,
        weights: FloatArray,
        options: Mapping[str, Any],
        fiml: bool,
        incumbent: Optional[EmissionParams] = None,
        kind: str = "unit",
    ) -> "GaussianParams":
        _check_degenerate(weights, mask)
        if kind == "full":
            return cls._fit_full(values, weights, fiml)

        y = np.where(mask, values, 0.0)
        m = mask.astype(np.float64)
        den = weights.T @ m
        mu = _safe_divide(weights.T @ y, den, 0.0)
        if kind == "unit":
            return cls(mu=mu, kind=kind, fiml=fiml)

        diff2 = (y[:, None, :] - mu[None, :, :]) ** 2 * m[:, None, :]
        num = np.einsum("nk,nkd->kd", weights, diff2)
        if kind == "spherical":
            var = _safe_divide(num.sum(axis=1), den.sum(axis=1), 1.0)
        else:
            var = _safe_divide(num, den, 1.0)
        var = np.maximum(var, Numerics.VARIANCE_FLOOR)
        return cls(mu=mu, kind=kind, covariance=var, fiml=fiml)

    @classmethod
    def _fit_full(cls, values: FloatArray, weights: FloatArray, fiml: bool) -> "GaussianParams":
        totals = weights.sum(axis=0)
        mu = (weights.T @ values) / totals[:, None]
        K, D = mu.shape
        covariance = np.empty((K, D, D))
        for k in range(K):
            centered = values - mu[k]
            cov = (weights[:, k, None] * centered).T @ centered / totals[k]
            cov = 0.5 * (cov + cov.T)
            smallest = float(np.linalg.eigvalsh(cov)[0])
            if smallest < Numerics.EIGENVALUE_FLOOR:
                cov = cov + (Numerics.EIGENVALUE_FLOOR - smallest) * np.eye(D)
            covariance[k] = cov
        return cls(mu=mu, kind="full", covariance=covariance, fiml=fiml)


# ---------------------------------------------------------------------------
# covariate (multinomial logit prior)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SolverResult:
    """covariate 求解結果與每次迭代的目標函數值"""

    theta: FloatArray
    objectives: List[float]
    n_iter: int
    converged: bool


def design_matrix(values: FloatArray) -> FloatArray:
    """在 covariate 後加上截距欄"""
    return np.hstack([values, np.ones((values.shape[0], 1))])


def covariate_objective(
    theta: FloatArray, design: FloatArray, weights: FloatArray
) -> Tuple[float, FloatArray]:
    """
    加權多項 logit 對數概似及其梯度

    Args:
        theta: K×(D+1) 參數矩陣，最後一欄為截距
        design: N×(D+1) 設計矩陣
        weights: N×K 有效權重

    Returns:
        (目標函數值, K×(D+1) 梯度)
    """
    eta = design @ theta.T
    log_p = log_softmax(eta, axis=1)
    value = float(np.sum(weights * log_p))
    row_totals = weights.sum(axis=1)
    residual = weights - row_totals[:, None] * np.exp(log_p)
    return value, residual.T @ design


def _covariate_hessian(theta: FloatArray, design: FloatArray, weights: FloatArray) -> FloatArray:
    K, P = theta.shape
    probs = softmax(design @ theta.T, axis=1)
    row_totals = weights.sum(axis=1)
    # N×K×K：r_i (diag p_i − p_i p_iᵀ)
    curvature = row_totals[:, None, None] * (
        np.einsum("nk,kl->nkl", probs, np.eye(K)) - probs[:, :, None] * probs[:, None, :]
    )
    hessian = -np.einsum("nkl,np,nq->kplq", curvature, design, design)
    return hessian.reshape(K * P, K * P)


def solve_covariate(
    design: FloatArray,
    weights: FloatArray,
    options: Mapping[str, Any],
    init: Optional[FloatArray] = None,
) -> SolverResult:
    """
    以 Newton-Raphson（或梯度上升）加回溯線搜尋最大化加權多項 logit 對數概似

    目標函數在每次迭代都不會下降。

    Raises:
        SolverDivergenceError: 目標函數出現非有限值
    """
    method = options.get("method", SolverDefaults.METHOD)
    max_iter = int(options.get("max_iter", SolverDefaults.MAX_ITER))
    step_size = float(options.get("step_size", SolverDefaults.STEP_SIZE))
    tol = float(options.get("tol", SolverDefaults.GRAD_TOL))
    if method not in SolverDefaults.METHODS:
        raise ValidationError(
            f"未知的求解方法: {method}",
            field_name="method",
            field_value=method,
            validation_rule="solver_method",
        )

    K = weights.shape[1]
    theta = np.zeros((K, design.shape[1])) if init is None else np.array(init, dtype=np.float64)
    value, grad = covariate_objective(theta, design, weights)
    if not np.isfinite(value):
        raise SolverDivergenceError(
            "covariate 目標函數於起始點非有限", iteration=0, suggestion="縮小 step_size"
        )
    objectives = [value]

    for iteration in range(1, max_iter + 1):
        if np.linalg.norm(grad) <= tol:
            return SolverResult(theta, objectives, iteration - 1, True)

        if method == "newton":
            hessian = _covariate_hessian(theta, design, weights)
            direction = np.linalg.lstsq(-hessian, grad.ravel(), rcond=None)[0].reshape(theta.shape)
            alpha = 1.0
        else:
            direction = grad
            alpha = step_size

        slope = float(np.sum(grad * direction))
        if slope <= 0:
            direction, slope = grad, float(np.sum(grad * grad))
        accepted = False
        for _ in range(SolverDefaults.MAX_BACKTRACK):
            candidate = theta + alpha * direction
            new_value, new_grad = covariate_objective(candidate, design, weights)
            if not np.isfinite(new_value):
                raise SolverDivergenceError(
                    "covariate 求解器發散：目標函數非有限",
                    iteration=iteration,
                    suggestion="縮小 step_size 或改用 newton",
                )
            if new_value >= value + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return SolverResult(theta, objectives, iteration, False)

        theta, value, grad = candidate, new_value, new_grad
        objectives.append(value)

    converged = bool(np.linalg.norm(grad) <= tol)
    return SolverResult(theta, objectives, max_iter, converged)


@dataclass(eq=False)
class CovariateParams(EmissionParams):
    """多項 logit 類別先驗：beta 為 K×D，b 為長度 K 的截距"""

    family: ClassVar[str] = Families.COVARIATE
    beta: FloatArray
    b: FloatArray
    fiml: bool = False

    def __post_init__(self) -> None:
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.fiml:
            raise ValidationError(
                ErrorMessages.FIML_UNSUPPORTED.format(family=Families.COVARIATE),
                field_name="fiml",
                validation_rule="fiml_unsupported",
            )
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.b))):
            raise ValidationError(
                "covariate 參數必須為有限值", field_name="beta", validation_rule="finite"
            )

    @property
    def n_components(self) -> int:
        return int(self.beta.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.beta.shape[1])

    @property
    def theta(self) -> FloatArray:
        return np.hstack([self.beta, self.b[:, None]])

    def log_prior(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        """N×K 的 log p(x | z^p)"""
        if not mask.all():
            raise ValidationError(
                "covariate 欄位不可有缺失值",
                field_name="missing_mask",
                validation_rule="covariate_missing",
            )
        if values.shape[1] != self.n_features:
            raise ValidationError(
                "covariate 區塊欄位數不符 (dimensionality mismatch)",
                field_name="values",
                validation_rule="dimensionality",
                expected=self.n_features,
            )
        return log_softmax(values @ self.beta.T + self.b, axis=1)

    def log_prob(self, values: FloatArray, mask: BoolArray) -> FloatArray:
        return self.log_prior(values, mask)

    def n_parameters(self) -> int:
        return (self.n_components - 1) * (self.n_features + 1)

    def sample(
        self, class_index: int, rng: np.random.Generator, size: Optional[int] = None
    ) -> FloatArray:
        raise UnsupportedOperationError(
            "covariate 為外生變數，其邊際分布未被估計，無法抽樣", operation="sample"
        )

    def rebased(self, reference: int) -> "CovariateParams":
        """以 reference 類別為參考類別（其係數歸零）"""
        return CovariateParams(
            beta=self.beta - self.beta[reference], b=self.b - self.b[reference]
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"beta": self.beta, "b": self.b}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, Any], fiml: bool) -> "CovariateParams":
        return cls(beta=arrays["beta"], b=arrays["b"], fiml=fiml)

    @classmethod
    def fit(
        cls,
        values: FloatArray,
        mask: BoolArray,
        weights: FloatArray,
        options: Mapping[str, Any],
        fiml: bool,
        incumbent: Optional[EmissionParams] = None,
    ) -> "CovariateParams":
        if not mask.all():
            raise ValidationError(
                "covariate 欄位不可有缺失值",
                field_name="missing_mask",
                validation_rule="covariate_missing",
            )
        _check_degenerate(weights, np.ones((weights.shape[0], 1), dtype=bool))
        design = design_matrix(values)
        init = None
        if isinstance(incumbent, CovariateParams) and incumbent.theta.shape == (
            weights.shape[1],
            design.shape[1],
        ):
            init = incumbent.theta
        result = solve_covariate(design, weights, options, init=init)
        return cls(beta=result.theta[:, :-1], b=result.theta[:, -1])


# ---------------------------------------------------------------------------
# 家族註冊與模組層級操作
# ---------------------------------------------------------------------------

FAMILY_CLASSES: Dict[str, Type[EmissionParams]] = {
    Families.BINARY: BernoulliParams,
    Families.CATEGORICAL: CategoricalParams,
    Families.GAUSSIAN_UNIT: GaussianParams,
    Families.GAUSSIAN_SPHERICAL: GaussianParams,
    Families.GAUSSIAN_DIAG: GaussianParams,
    Families.GAUSSIAN_FULL: GaussianParams,
    Families.COVARIATE: CovariateParams,
}


def _gaussian_kind(family: str) -> Optional[str]:
    return family.split("_", 1)[1] if family.startswith("gaussian_") else None


def fit_family(
    family: str,
    values: FloatArray,
    mask: BoolArray,
    weights: FloatArray,
    options: Optional[Mapping[str, Any]] = None,
    fiml: bool = False,
    incumbent: Optional[EmissionParams] = None,
) -> EmissionParams:
    """依家族名稱執行加權 M-step（weights 為 N×K 有效權重）"""
    if family not in FAMILY_CLASSES:
        raise ValidationError(
            f"未知的分布家族: {family}", field_name="family", field_value=family
        )
    options = options or {}
    kind = _gaussian_kind(family)
    if kind is not None:
        return GaussianParams.fit(values, mask, weights, options, fiml, incumbent, kind=kind)
    return FAMILY_CLASSES[family].fit(values, mask, weights, options, fiml, incumbent)


def params_from_dict(family: str, raw: Mapping[str, Any], fiml: bool = False) -> EmissionParams:
    """由序列化參數重建參數容器"""
    kind = _gaussian_kind(family)
    if kind is not None:
        return GaussianParams.from_arrays(raw, fiml, kind)
    return FAMILY_CLASSES[family].from_arrays(raw, fiml)


def log_prob(params: EmissionParams, data: Dataset) -> FloatArray:
    """區塊資料在各類別下的 N×K 對數機率"""
    return params.log_prob(data.values, data.missing_mask)


def covariate_log_prior(params: CovariateParams, z_p: Dataset) -> FloatArray:
    """N×K 的 log-softmax 類別先驗"""
    return params.log_prior(z_p.values, z_p.missing_mask)


def m_step(
    family: str,
    data: Dataset,
    resp: FloatArray,
    options: Optional[SolverOptions] = None,
    fiml: bool = False,
    incumbent: Optional[EmissionParams] = None,
) -> EmissionParams:
    """以樣本權重 × 責任矩陣執行單一區塊的 M-step"""
    weights = data.weights[:, None] * np.asarray(resp, dtype=np.float64)
    return fit_family(family, data.values, data.missing_mask, weights, options, fiml, incumbent)


def covariate_m_step(
    data: Dataset,
    resp: FloatArray,
    options: Optional[SolverOptions] = None,
    init: Optional[CovariateParams] = None,
) -> CovariateParams:
    """covariate 區塊的 M-step（數值求解）"""
    params = m_step(Families.COVARIATE, data, resp, options, False, init)
    assert isinstance(params, CovariateParams)
    return params


def n_parameters(params: EmissionParams) -> int:
    return params.n_parameters()


def sample(params: EmissionParams, class_index: int, rng: np.random.Generator) -> FloatArray:
    return params.sample(class_index, rng)


def rebase_covariate(params: CovariateParams, reference: int) -> CovariateParams:
    """以指定類別為參考類別重新表示 covariate 係數"""
    return params.rebased(reference)


def check_invariants(params: EmissionParams) -> None:
    """
    檢查參數容器的型別不變量（載入模型檔時使用）

    Raises:
        ValidationError: 任一不變量不成立
    """

    def fail(rule: str, message: str) -> None:
        raise ValidationError(
            f"{params.family} 參數不合法: {message}",
            field_name=params.family,
            validation_rule=rule,
        )

    for name, array in params.arrays().items():
        if array.shape[0] != params.n_components:
            fail("shape", f"{name} 的類別軸長度不一致")
        if not np.all(np.isfinite(array)):
            fail("finite", f"{name} 含非有限值")

    if isinstance(params, BernoulliParams):
        if np.any(params.pi < 0) or np.any(params.pi > 1):
            fail("probability_range", "pi 必須介於 0 與 1")
    elif isinstance(params, CategoricalParams):
        if np.any(params.P < 0):
            fail("probability_range", "P 不可為負")
        if not np.allclose(params.P.sum(axis=-1), 1.0, rtol=0, atol=Numerics.CLASS_WEIGHT_SUM_TOL):
            fail("pmf_sum", "P 在類別值軸上必須加總為 1")
    elif isinstance(params, GaussianParams) and params.kind != "unit":
        assert params.covariance is not None
        if params.kind == "full":
            K, D = params.mu.shape
            if params.covariance.shape != (K, D, D):
                fail("shape", "covariance 必須為 K×D×D")
            if not np.allclose(params.covariance, np.swapaxes(params.covariance, 1, 2)):
                fail("symmetric", "covariance 必須對稱")
            if np.any(np.linalg.eigvalsh(params.covariance)[:, 0] <= 0):
                fail("positive_definite", "covariance 必須正定")
        elif np.any(params.covariance <= 0):
            fail("positive_variance", "variance 必須為正")
