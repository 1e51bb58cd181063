"""
異常類別測試
"""

import pytest

from src.core.constants import ExitCodes
from src.core.exceptions import (
    AllInitsFailedError,
    BootstrapRepetitionError,
    ConfigurationError,
    ContractError,
    CorrectionInfeasibleError,
    CsvParseError,
    DataError,
    DegenerateClassError,
    DescriptorError,
    NumericalError,
    StepFitError,
    UnsupportedVersionError,
    ValidationError,
    exit_code_for,
    get_recovery_suggestions,
    is_numerical_failure,
)

pytestmark = pytest.mark.unit


class TestHierarchy:
    def test_validation_branch(self):
        for cls in (ConfigurationError, DescriptorError, DataError, CsvParseError):
            assert issubclass(cls, ValidationError)
        assert not issubclass(ValidationError, NumericalError)

    def test_numerical_branch(self):
        error = DegenerateClassError("類別 2 的有效權重為零", class_index=2)
        assert is_numerical_failure(error)
        assert error.class_index == 2
        assert not is_numerical_failure(ValidationError("x"))

    def test_str_omits_empty_details(self):
        assert str(StepFitError("訊息")) == "訊息"
        error = ValidationError("欄位錯誤", field_name="n")
        assert str(error) == "欄位錯誤 - 詳細資訊: {'field_name': 'n'}"

    def test_descriptor_rule(self):
        error = DescriptorError("區塊重疊", block_name="a", rule="overlap")
        assert error.rule == "overlap"
        assert error.details["block_name"] == "a"

    def test_csv_error_location(self):
        error = CsvParseError("無法解析", row=3, column="y2")
        assert (error.details["row"], error.details["column"]) == (3, "y2")
        assert isinstance(error, DataError)

    def test_version_error_points_at_version(self):
        error = UnsupportedVersionError("版本不符", found_version=2, expected_version=1)
        assert error.details["json_path"] == "schema_version"

    def test_bch_suggests_ml(self):
        error = CorrectionInfeasibleError("D 奇異", condition_number=1e15)
        assert error.details["suggestion"] == "correction=ml"

    def test_all_inits_failures(self):
        error = AllInitsFailedError("全部失敗", failures=["a", "b"])
        assert error.failures == ["a", "b"]
        assert AllInitsFailedError("全部失敗").failures == []


class TestExitCodes:
    @pytest.mark.parametrize(
        "error",
        [
            DegenerateClassError("x", class_index=0),
            AllInitsFailedError("x"),
            BootstrapRepetitionError("x", repetition=3),
        ],
    )
    def test_numerical_failures(self, error):
        assert exit_code_for(error) == ExitCodes.NUMERICAL_FAILURE

    @pytest.mark.parametrize(
        "error",
        [ValidationError("x"), ConfigurationError("x"), ContractError("x"), StepFitError("x")],
    )
    def test_input_errors(self, error):
        assert exit_code_for(error) == ExitCodes.VALIDATION_ERROR

    def test_repetition_details(self):
        assert BootstrapRepetitionError("x", repetition=3).details["repetition"] == 3


class TestRecoverySuggestions:
    def test_degenerate_class(self):
        suggestions = get_recovery_suggestions(DegenerateClassError("x", class_index=0))
        assert any("--n-init" in s for s in suggestions)

    def test_bch(self):
        suggestions = get_recovery_suggestions(CorrectionInfeasibleError("x"))
        assert any("--correction ml" in s for s in suggestions)

    def test_unrelated_error(self):
        assert get_recovery_suggestions(RuntimeError("x")) == []
