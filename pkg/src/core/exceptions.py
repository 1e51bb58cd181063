"""
stepfit 自定義異常類別
提供精確的錯誤處理和診斷資訊

異常分為兩大分支：
- 驗證錯誤 (ValidationError 系列)：輸入、描述檔或模型檔不合法，CLI 結束代碼 1
- 數值錯誤 (NumericalError 系列)：估計過程數值失敗，CLI 結束代碼 2
"""

from typing import Any, Dict, List, Optional, Sequence

from .constants import ExitCodes


class StepFitError(Exception):
    """基礎異常類別"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None) -> None:
        self.message = message
        self.details = details or {}
        super().__init__(self.message)

    def __str__(self) -> str:
        details = {k: v for k, v in self.details.items() if v is not None}
        if details:
            return f"{self.message} - 詳細資訊: {details}"
        return self.message


class ValidationError(StepFitError):
    """驗證相關異常"""

    def __init__(
        self,
        message: str,
        field_name: Optional[str] = None,
        field_value: Optional[Any] = None,
        validation_rule: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {
            "field_name": field_name,
            "field_value": field_value,
            "validation_rule": validation_rule,
            **kwargs,
        }
        super().__init__(message, details)


class ConfigurationError(ValidationError):
    """設定值或環境變數異常"""

    def __init__(
        self,
        message: str,
        config_file: Optional[str] = None,
        config_section: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {
            "config_file": config_file,
            "config_section": config_section,
            **kwargs,
        }
        super().__init__(message, **details)


class DescriptorError(ValidationError):
    """模型描述檔異常

    rule 取值: overlap, coverage_gap, range_exceeds, covariate_in_measurement,
    multiple_covariates, fiml_unsupported, unknown_family
    """

    def __init__(
        self,
        message: str,
        block_name: Optional[str] = None,
        rule: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {"block_name": block_name, "validation_rule": rule, **kwargs}
        super().__init__(message, **details)

    @property
    def rule(self) -> Optional[str]:
        return self.details.get("validation_rule")


class DataError(ValidationError):
    """數據處理相關異常"""

    def __init__(
        self,
        message: str,
        record_count: Optional[int] = None,
        data_type: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {"record_count": record_count, "data_type": data_type, **kwargs}
        super().__init__(message, **details)


class CsvParseError(DataError):
    """CSV 解析異常"""

    def __init__(
        self,
        message: str,
        row: Optional[int] = None,
        column: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {"row": row, "column": column, **kwargs}
        super().__init__(message, **details)


class SchemaError(ValidationError):
    """JSON 結構驗證異常"""

    def __init__(
        self, message: str, json_path: Optional[str] = None, **kwargs: Any
    ) -> None:
        details = {"json_path": json_path, **kwargs}
        super().__init__(message, **details)


class UnsupportedVersionError(SchemaError):
    """模型檔版本不相容"""

    def __init__(
        self,
        message: str,
        found_version: Optional[Any] = None,
        expected_version: Optional[int] = None,
        **kwargs: Any,
    ) -> None:
        details = {
            "found_version": found_version,
            "expected_version": expected_version,
            **kwargs,
        }
        super().__init__(message, json_path="schema_version", **details)


class UnsupportedOperationError(StepFitError):
    """目前模型不支援的操作"""

    def __init__(
        self, message: str, operation: Optional[str] = None, **kwargs: Any
    ) -> None:
        details = {"operation": operation, **kwargs}
        super().__init__(message, details)


class ContractError(StepFitError):
    """呼叫端違反函式前置條件"""

    def __init__(
        self, message: str, argument: Optional[str] = None, **kwargs: Any
    ) -> None:
        details = {"argument": argument, **kwargs}
        super().__init__(message, details)


class NumericalError(StepFitError):
    """數值估計失敗"""


class DegenerateClassError(NumericalError):
    """類別有效權重為零"""

    def __init__(
        self, message: str, class_index: Optional[int] = None, **kwargs: Any
    ) -> None:
        details = {"class_index": class_index, **kwargs}
        super().__init__(message, details)

    @property
    def class_index(self) -> Optional[int]:
        return self.details.get("class_index")


class LikelihoodUnderflowError(NumericalError):
    """觀測單位在所有類別的聯合機率皆為零"""

    def __init__(
        self, message: str, unit_index: Optional[int] = None, **kwargs: Any
    ) -> None:
        details = {"unit_index": unit_index, **kwargs}
        super().__init__(message, details)


class SolverDivergenceError(NumericalError):
    """covariate 求解器發散"""

    def __init__(
        self,
        message: str,
        iteration: Optional[int] = None,
        suggestion: Optional[str] = None,
        **kwargs: Any,
    ) -> None:
        details = {"iteration": iteration, "suggestion": suggestion, **kwargs}
        super().__init__(message, details)


class CorrectionInfeasibleError(NumericalError):
    """BCH 校正不可行"""

    def __init__(
        self, message: str, condition_number: Optional[float] = None, **kwargs: Any
    ) -> None:
        details = {
            "condition_number": condition_number,
            "suggestion": "correction=ml",
            **kwargs,
        }
        super().__init__(message, details)


class AllInitsFailedError(NumericalError):
    """所有初始化皆失敗"""

    def __init__(
        self,
        message: str,
        failures: Optional[Sequence[str]] = None,
        **kwargs: Any,
    ) -> None:
        details = {"failures": list(failures or []), **kwargs}
        super().__init__(message, details)

    @property
    def failures(self) -> List[str]:
        return list(self.details.get("failures", []))


class BootstrapRepetitionError(NumericalError):
    """單次 bootstrap 重複無法估計（例如重抽樣只抽到零權重單位）"""

    def __init__(
        self, message: str, repetition: Optional[int] = None, **kwargs: Any
    ) -> None:
        details = {"repetition": repetition, **kwargs}
        super().__init__(message, details)


class BootstrapFailureError(NumericalError):
    """bootstrap 失敗比例過高"""

    def __init__(
        self,
        message: str,
        failed: Optional[int] = None,
        n_repetitions: Optional[int] = None,
        **kwargs: Any,
    ) -> None:
        details = {"failed": failed, "n_repetitions": n_repetitions, **kwargs}
        super().__init__(message, details)


def is_numerical_failure(exception: BaseException) -> bool:
    """判斷異常是否屬於數值失敗分支"""
    return isinstance(exception, NumericalError)


def exit_code_for(exception: BaseException) -> int:
    """CLI 結束代碼：數值失敗為 2，其餘 stepfit 異常為 1"""
    if is_numerical_failure(exception):
        return ExitCodes.NUMERICAL_FAILURE
    return ExitCodes.VALIDATION_ERROR


def get_recovery_suggestions(exception: BaseException) -> List[str]:
    """根據異常類型提供恢復建議"""
    suggestions: List[str] = []

    if isinstance(exception, DegenerateClassError):
        suggestions.extend(
            [
                "增加 --n-init 以嘗試更多初始值",
                "減少類別數 --n-components",
                "檢查樣本權重是否大多為零",
            ]
        )
    elif isinstance(exception, AllInitsFailedError):
        suggestions.extend(
            [
                "更換 --seed 或增加 --n-init",
                "減少類別數 --n-components",
            ]
        )
    elif isinstance(exception, CorrectionInfeasibleError):
        suggestions.extend(
            [
                "改用 --correction ml",
                "檢查測量模型的類別分離程度",
            ]
        )
    elif isinstance(exception, SolverDivergenceError):
        suggestions.extend(
            [
                "改用 newton 求解器或縮小 step_size",
                "標準化 covariate 欄位",
            ]
        )
    elif isinstance(exception, LikelihoodUnderflowError):
        suggestions.extend(
            [
                "檢查資料是否含有超出訓練範圍的類別值",
                "確認描述檔的分布家族與欄位型態相符",
            ]
        )
    elif isinstance(exception, BootstrapFailureError):
        suggestions.extend(
            [
                "增加 --n-init 使每次重抽樣估計更穩定",
                "減少類別數或檢查小樣本類別",
            ]
        )
    elif isinstance(exception, DescriptorError):
        suggestions.extend(
            [
                "確認區塊欄位範圍不重疊且涵蓋所有欄位",
                "covariate 只能放在結構模型描述檔中",
            ]
        )
    elif isinstance(exception, CsvParseError):
        suggestions.append("缺失值請留空或填入 NaN")

    return suggestions
