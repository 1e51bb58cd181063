#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
配置檔案驗證模組

此模組提供模型描述檔與模型 JSON 檔的 JSON Schema 驗證，
以及 .env 執行設定 (STEPFIT_SEED、STEPFIT_JOBS、STEPFIT_LOG_DIR、LOG_LEVEL) 的讀取與檢查。
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import jsonschema
import psutil
from dotenv import dotenv_values, load_dotenv

from .constants import EnvVars, Families, SolverDefaults
from .exceptions import ConfigurationError, SchemaError
from .logging_config import get_logger
from .type_aliases import PathLike, ValidationReport

_BLOCK_PROPERTIES: Dict[str, Any] = {
    "name": {"type": "string", "minLength": 1, "description": "區塊名稱"},
    "family": {"type": "string", "minLength": 1, "description": "分布家族"},
    "columns": {
        "type": "array",
        "items": {"type": "integer", "minimum": 0},
        "minItems": 2,
        "maxItems": 2,
        "description": "含頭含尾的欄位範圍 [lo, hi]",
    },
    "fiml": {"type": "boolean", "description": "是否啟用 FIML"},
    "options": {
        "type": "object",
        "properties": {
            "method": {"enum": list(SolverDefaults.METHODS)},
            "max_iter": {"type": "integer", "minimum": 1},
            "step_size": {"type": "number", "exclusiveMinimum": 0},
            "tol": {"type": "number", "minimum": 0},
            "n_levels": {"type": "integer", "minimum": 1},
        },
        "description": "求解器與編碼選項",
    },
}

# 模型描述檔 JSON Schema（物件格式；純字串簡寫另行處理）
DESCRIPTOR_JSON_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "blocks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": _BLOCK_PROPERTIES,
                "required": ["family", "columns"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["blocks"],
    "additionalProperties": False,
}

_FITTED_BLOCK_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        **_BLOCK_PROPERTIES,
        "family": {"enum": list(Families.ALL)},
        "params": {"type": "object"},
    },
    "required": ["name", "family", "columns", "fiml", "params"],
    "additionalProperties": False,
}

_LEVEL_MAP_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": {"type": "array", "items": {"type": "number"}},
}

# 模型 JSON Schema
MODEL_JSON_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "schema_version": {"type": "integer"},
        "n_components": {"type": "integer", "minimum": 1},
        "class_weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "measurement": {"type": "array", "items": _FITTED_BLOCK_SCHEMA},
        "structural": {
            "anyOf": [
                {"type": "null"},
                {"type": "array", "items": _FITTED_BLOCK_SCHEMA},
            ]
        },
        "fit_meta": {"anyOf": [{"type": "null"}, {"type": "object"}]},
        "encodings": {
            "type": "object",
            "properties": {"measurement": _LEVEL_MAP_SCHEMA, "structural": _LEVEL_MAP_SCHEMA},
            "additionalProperties": False,
        },
        "stats": {"anyOf": [{"type": "null"}, {"type": "object"}]},
    },
    "required": ["schema_version", "n_components", "class_weights", "measurement"],
    "additionalProperties": False,
}


def _format_path(path: Any) -> str:
    parts = [str(p) for p in path]
    return "$" + "".join(f"[{p}]" if p.isdigit() else f".{p}" for p in parts)


def check_schema(instance: Any, schema: Mapping[str, Any], label: str) -> None:
    """
    以 JSON Schema 驗證物件，失敗時拋出帶 JSON 路徑的 SchemaError

    Args:
        instance: 已解析的 JSON 物件
        schema: JSON Schema
        label: 錯誤訊息中使用的檔案類型名稱
    """
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        raise SchemaError(
            f"{label} JSON Schema 驗證失敗: {first.message}",
            json_path=_format_path(first.absolute_path),
            error_count=len(errors),
        )


def read_json(path: PathLike, label: str) -> Any:
    """讀取 JSON 檔案，格式錯誤轉為 SchemaError"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigurationError(f"{label} 檔案不存在: {path}", config_file=str(path)) from e
    except json.JSONDecodeError as e:
        raise SchemaError(
            f"{label} JSON 格式錯誤: {e.msg}", json_path=f"line {e.lineno}", file=str(path)
        ) from e


@dataclass(frozen=True)
class RuntimeSettings:
    """由環境變數決定的執行設定"""

    seed: Optional[int]
    jobs: int
    log_dir: Optional[str]
    log_level: str


def default_jobs() -> int:
    """預設工作執行緒數：可用的邏輯 CPU 數"""
    return max(1, psutil.cpu_count(logical=True) or 1)


def _parse_int(name: str, raw: Optional[str], minimum: int) -> Optional[int]:
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigurationError(
            f"環境變數 {name} 必須為整數，目前值: {raw}", config_section=name
        ) from e
    if value < minimum:
        raise ConfigurationError(
            f"環境變數 {name} 必須 ≥ {minimum}，目前值: {raw}", config_section=name
        )
    return value


def load_runtime_settings(env_file: Optional[PathLike] = None) -> RuntimeSettings:
    """
    載入 .env 並讀取執行設定

    Args:
        env_file: .env 檔案路徑，未提供時由 python-dotenv 自動尋找

    Returns:
        RuntimeSettings
    """
    load_dotenv(dotenv_path=env_file, override=False)
    seed = _parse_int(EnvVars.SEED, os.getenv(EnvVars.SEED), 0)
    jobs = _parse_int(EnvVars.JOBS, os.getenv(EnvVars.JOBS), 1)
    level = (os.getenv(EnvVars.LOG_LEVEL) or "INFO").upper()
    return RuntimeSettings(
        seed=seed,
        jobs=jobs if jobs is not None else default_jobs(),
        log_dir=os.getenv(EnvVars.LOG_DIR) or None,
        log_level=level,
    )


class ConfigValidator:
    """描述檔與環境設定驗證器"""

    VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

    def __init__(self) -> None:
        self.logger = get_logger("config_validator")

    def validate_descriptor_file(
        self, descriptor_path: PathLike, n_columns: Optional[int] = None
    ) -> ValidationReport:
        """
        驗證模型描述檔

        Args:
            descriptor_path: 描述檔路徑
            n_columns: 對應資料的欄位數，提供時一併檢查欄位分割

        Returns:
            tuple: (驗證是否成功, 錯誤訊息列表)
        """
        from .data_model import ModelDescriptor

        errors: List[str] = []
        try:
            raw = read_json(descriptor_path, "描述檔")
            descriptor = ModelDescriptor.parse(raw, n_columns)
            if n_columns is not None:
                errors.extend(message for _, _, message in descriptor.problems(n_columns))
        except (SchemaError, ConfigurationError) as e:
            errors.append(str(e))
        except Exception as e:  # DescriptorError 等
            errors.append(f"描述檔內容錯誤: {e}")

        return len(errors) == 0, errors

    def validate_env_file(self, env_path: PathLike) -> ValidationReport:
        """
        驗證 .env 檔案

        Args:
            env_path: .env 檔案路徑

        Returns:
            tuple: (驗證是否成功, 錯誤訊息列表)
        """
        errors: List[str] = []
        env_file = Path(env_path)
        if not env_file.exists():
            errors.append(f"檔案不存在: {env_file}")
            return False, errors

        values = dotenv_values(env_file)
        for name, minimum in ((EnvVars.SEED, 0), (EnvVars.JOBS, 1)):
            try:
                _parse_int(name, values.get(name), minimum)
            except ConfigurationError as e:
                errors.append(e.message)

        level = values.get(EnvVars.LOG_LEVEL)
        if level and level.upper() not in self.VALID_LOG_LEVELS:
            errors.append(
                f"環境變數 LOG_LEVEL 必須為 {', '.join(self.VALID_LOG_LEVELS)} 之一，"
                f"目前值: {level}"
            )

        log_dir = values.get(EnvVars.LOG_DIR)
        if log_dir and not Path(log_dir).expanduser().parent.exists():
            errors.append(f"環境變數 {EnvVars.LOG_DIR} 的父目錄不存在: {log_dir}")

        return len(errors) == 0, errors

    def print_validation_report(self, results: Dict[str, Tuple[bool, List[str]]]) -> bool:
        """
        列印驗證報告

        Args:
            results: 檔案名稱對應 (是否通過, 錯誤訊息)

        Returns:
            整體驗證是否成功
        """
        self.logger.info("stepfit 配置驗證報告", operation="validation_report")
        self.logger.info("=" * 50)

        overall_success = True
        for config_file, (success, errors) in results.items():
            if success:
                self.logger.log_operation_success(f"{config_file} 驗證", config_file=config_file)
                continue
            overall_success = False
            self.logger.error(
                f"{config_file} 發現 {len(errors)} 個問題",
                config_file=config_file,
                error_count=len(errors),
            )
            for i, error in enumerate(errors, 1):
                self.logger.error(f"   {i}. {error}", error_detail=error, error_index=i)

        self.logger.info("=" * 50)
        return overall_success
