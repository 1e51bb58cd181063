"""
結構化日誌配置模組
提供統一的日誌記錄機制：控制台簡潔輸出，設定日誌目錄時另寫 JSON 檔案
"""

import json
import logging
import logging.handlers
import os
import sys
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .constants import EnvVars, LoggingConfig


class LogLevel(Enum):
    """日誌級別枚舉"""

    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


def _json_default(value: Any) -> Any:
    """numpy 純量等非標準型別轉為可序列化值"""
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class StructuredFormatter(logging.Formatter):
    """結構化日誌格式器"""

    def format(self, record: logging.LogRecord) -> str:
        """格式化日誌記錄為 JSON 格式"""
        log_data = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        # 添加額外的上下文資訊
        if hasattr(record, "extra_data"):
            log_data.update(record.extra_data)  # type: ignore[attr-defined]

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=_json_default)


class ConsoleFormatter(logging.Formatter):
    """控制台友善的日誌格式器"""

    COLORS = {
        "DEBUG": "\033[36m",  # 青色
        "INFO": "\033[32m",  # 綠色
        "WARNING": "\033[33m",  # 黃色
        "ERROR": "\033[31m",  # 紅色
        "CRITICAL": "\033[35m",  # 紫色
        "RESET": "\033[0m",
    }

    def __init__(self, use_color: bool = True) -> None:
        super().__init__()
        self.use_color = use_color

    def _paint(self, level: str, text: str) -> str:
        if not self.use_color:
            return text
        return f"{self.COLORS.get(level, '')}{text}{self.COLORS['RESET']}"

    def format(self, record: logging.LogRecord) -> str:
        """格式化控制台日誌（簡潔版本）"""
        level = record.levelname
        message_text = record.getMessage()

        if level in ["ERROR", "CRITICAL"]:
            if "❌" not in message_text and "🚨" not in message_text:
                message_text = f"❌ {message_text}"
            message = self._paint(level, message_text)
        elif level == "WARNING":
            if "⚠️" not in message_text:
                message_text = f"⚠️ {message_text}"
            message = self._paint(level, message_text)
        else:
            message = message_text

        if record.exc_info:
            message += f"\n{self.formatException(record.exc_info)}"

        return message


def _resolve_level(level: Optional[str]) -> int:
    name = (level or os.getenv(EnvVars.LOG_LEVEL) or LoggingConfig.LOG_LEVEL).upper()
    resolved = logging.getLevelName(name)
    return resolved if isinstance(resolved, int) else logging.INFO


class EstimationLogger:
    """估計流程專用日誌記錄器

    所有實例共用 "stepfit" 根 logger 的處理器；各模組以子 logger 區分來源。
    """

    def __init__(self, name: str = LoggingConfig.ROOT_LOGGER) -> None:
        self.name = name
        qualified = (
            name
            if name == LoggingConfig.ROOT_LOGGER
            else f"{LoggingConfig.ROOT_LOGGER}.{name}"
        )
        self.logger = logging.getLogger(qualified)

    def _log(
        self, level: int, message: str, /, exc_info: bool = False, **kwargs: Any
    ) -> None:
        if self.logger.isEnabledFor(level):
            self.logger.log(
                level, message, exc_info=exc_info, extra={"extra_data": kwargs}
            )

    def debug(self, message: str, **kwargs: Any) -> None:
        """記錄 DEBUG 級別日誌"""
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs: Any) -> None:
        """記錄 INFO 級別日誌"""
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs: Any) -> None:
        """記錄 WARNING 級別日誌"""
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message: str, exc_info: bool = False, **kwargs: Any) -> None:
        """記錄 ERROR 級別日誌"""
        self._log(logging.ERROR, message, exc_info=exc_info, **kwargs)

    def critical(self, message: str, exc_info: bool = False, **kwargs: Any) -> None:
        """記錄 CRITICAL 級別日誌"""
        self._log(logging.CRITICAL, message, exc_info=exc_info, **kwargs)

    def log_operation_start(self, operation: str, **context: Any) -> None:
        """記錄操作開始"""
        self.info(f"開始 {operation}", operation=operation, **context)

    def log_operation_success(
        self, operation: str, duration: Optional[float] = None, **context: Any
    ) -> None:
        """記錄操作成功"""
        extra_data: Dict[str, Any] = {"operation": operation, **context}
        if duration is not None:
            extra_data["duration_seconds"] = duration
        self.info(f"✅ {operation} 成功完成", **extra_data)

    def log_operation_failure(
        self, operation: str, error: Union[str, BaseException], **context: Any
    ) -> None:
        """記錄操作失敗"""
        error_msg = str(error)
        self.error(
            f"❌ {operation} 失敗: {error_msg}",
            operation=operation,
            error=error_msg,
            **context,
        )

    def log_data_info(
        self, message: str, count: Optional[int] = None, **context: Any
    ) -> None:
        """記錄數據相關資訊"""
        extra_data = context.copy()
        if count is not None:
            extra_data["count"] = count
        self.info(f"📊 {message}", **extra_data)

    def log_metric(
        self, metric_name: str, value: Union[int, float], unit: str = "", **context: Any
    ) -> None:
        """記錄估計指標（對數概似、AIC 等）"""
        self.info(
            f"⚡ {metric_name}: {value:.10g}{unit}",
            metric_name=metric_name,
            value=float(value),
            unit=unit,
            **context,
        )


class LoggingContext:
    """日誌上下文管理器"""

    def __init__(self, logger: EstimationLogger, operation: str, **context: Any):
        self.logger = logger
        self.operation = operation
        self.context = context
        self.start_time: Optional[datetime] = None

    def __enter__(self) -> "LoggingContext":
        self.start_time = datetime.now()
        self.logger.log_operation_start(self.operation, **self.context)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:  # type: ignore[no-untyped-def]
        assert self.start_time is not None, "Context manager not properly entered"
        duration = (datetime.now() - self.start_time).total_seconds()

        if exc_type is None:
            self.logger.log_operation_success(self.operation, duration, **self.context)
        else:
            self.logger.log_operation_failure(self.operation, exc_val, **self.context)

        return False  # 不抑制異常


_configured = False
_loggers: Dict[str, EstimationLogger] = {}


def configure_logging(
    level: Optional[str] = None,
    log_dir: Optional[Union[str, Path]] = None,
    use_color: Optional[bool] = None,
) -> None:
    """
    設置根 logger 的處理器（可重複呼叫，以最後一次設定為準）

    Args:
        level: 日誌級別，未提供時讀取 LOG_LEVEL 環境變數
        log_dir: JSON 日誌檔目錄，未提供時讀取 STEPFIT_LOG_DIR；皆無則不寫檔
        use_color: 控制台是否上色，預設依 stderr 是否為終端機決定
    """
    global _configured

    root = logging.getLogger(LoggingConfig.ROOT_LOGGER)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    root.setLevel(_resolve_level(level))
    root.propagate = False

    if use_color is None:
        use_color = sys.stderr.isatty()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(root.level)
    console_handler.setFormatter(ConsoleFormatter(use_color=use_color))
    root.addHandler(console_handler)

    directory = log_dir or os.getenv(EnvVars.LOG_DIR)
    if directory:
        log_path = Path(directory)
        log_path.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_path / f"{LoggingConfig.ROOT_LOGGER}.log",
            maxBytes=LoggingConfig.LOG_FILE_MAX_SIZE,
            backupCount=LoggingConfig.LOG_BACKUP_COUNT,
            encoding="utf-8",
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(StructuredFormatter())
        root.addHandler(file_handler)

    _configured = True


def get_logger(name: Optional[str] = None) -> EstimationLogger:
    """
    取得日誌記錄器實例

    Args:
        name: 日誌記錄器名稱（模組短名）

    Returns:
        EstimationLogger 實例
    """
    if not _configured:
        configure_logging()

    key = name or LoggingConfig.ROOT_LOGGER
    if key not in _loggers:
        _loggers[key] = EstimationLogger(key)
    return _loggers[key]
