"""
日誌配置測試
"""

import json
import logging

import numpy as np
import pytest

from src.core.logging_config import (
    ConsoleFormatter,
    StructuredFormatter,
    configure_logging,
    get_logger,
)

pytestmark = pytest.mark.unit


def make_record(level: int, message: str, **extra) -> logging.LogRecord:
    record = logging.LogRecord("stepfit.test", level, __file__, 1, message, None, None)
    record.extra_data = extra
    return record


@pytest.fixture
def restore_logging():
    yield
    configure_logging()


class TestFormatters:
    def test_structured_json(self):
        text = StructuredFormatter().format(
            make_record(logging.INFO, "完成", n_iter=np.int64(12), ll=np.float64(-1.5))
        )
        payload = json.loads(text)
        assert payload["message"] == "完成"
        assert payload["level"] == "INFO"
        assert payload["n_iter"] == 12
        assert payload["ll"] == -1.5

    def test_console_marks_warnings_and_errors(self):
        formatter = ConsoleFormatter(use_color=False)
        assert formatter.format(make_record(logging.WARNING, "注意")) == "⚠️ 注意"
        assert formatter.format(make_record(logging.ERROR, "失敗")) == "❌ 失敗"
        assert formatter.format(make_record(logging.INFO, "資訊")) == "資訊"


class TestConfigureLogging:
    def test_json_log_file(self, tmp_path, restore_logging):
        configure_logging(level="DEBUG", log_dir=tmp_path, use_color=False)
        get_logger("logging_test").info("寫入檔案", answer=42)

        lines = (tmp_path / "stepfit.log").read_text(encoding="utf-8").splitlines()
        payload = json.loads(lines[-1])
        assert payload["message"] == "寫入檔案"
        assert payload["answer"] == 42
        assert payload["logger"] == "stepfit.logging_test"

    def test_loggers_are_cached(self):
        assert get_logger("cached") is get_logger("cached")
