#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
模型報告與模型檔

- render_report: 文字報告（擬合統計、類別權重、各區塊參數表）
- save_model / load_model: 帶版本號的模型 JSON 檔，浮點數以最短可還原十進位表示寫出
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import pandas as pd

from src.core.config_validator import MODEL_JSON_SCHEMA, check_schema, read_json
from src.core.constants import SCHEMA_VERSION, Messages
from src.core.em_engine import MixtureModel
from src.core.emission_models import check_invariants
from src.core.exceptions import SchemaError, UnsupportedVersionError
from src.core.logging_config import get_logger
from src.core.type_aliases import LevelMap, PathLike
from src.estimators.inference import (
    FitReportStats,
    parameter_frame,
    parameter_table,
    rebased_covariate,
)

logger = get_logger("report")

RULE = "=" * 64
NUMBER_FORMAT = "{:.12g}"


def _number(value: float) -> str:
    return NUMBER_FORMAT.format(float(value))


def _table(frame: pd.DataFrame) -> List[str]:
    frame = frame.copy()
    frame.columns = [f"class {c}" for c in frame.columns]
    return frame.to_string(float_format=_number).splitlines()


def _stats_lines(stats: FitReportStats) -> List[str]:
    return [
        f"總對數概似 (LL): {_number(stats.total_log_likelihood)}",
        f"平均對數概似: {_number(stats.avg_log_likelihood)}",
        f"參數個數: {stats.n_parameters}",
        f"AIC: {_number(stats.aic)}",
        f"BIC: {_number(stats.bic)}",
        "類別比例: " + ", ".join(_number(s) for s in stats.class_sizes),
    ]


def render_report(model: MixtureModel, stats: FitReportStats, verbosity: int = 1) -> str:
    """
    產生模型報告

    Args:
        model: 已擬合的模型
        stats: 擬合統計量
        verbosity: 0 只列擬合統計；1 另列類別權重與參數表

    Returns:
        報告文字（相同輸入產生相同位元組）
    """
    meta = model.fit_meta
    lines = [
        RULE,
        "stepfit 模型報告",
        RULE,
        f"估計方法: {meta.estimator if meta else '未知'}",
        f"類別數 K: {model.n_components}",
        f"樣本數 N: {_number(stats.n)}",
        f"種子: {meta.seed if meta else '未知'}",
    ]
    if meta is not None:
        lines.append(f"迭代次數: {meta.n_iter}（{'已收斂' if meta.converged else '未收斂'}）")
    lines.extend(["", "擬合統計", "-" * 64, *_stats_lines(stats)])

    if verbosity >= 1:
        frame = parameter_frame(model)
        lines.extend(["", "類別權重", "-" * 64, *_table(parameter_table(frame, "cw"))])
        for title, module in (("測量模型", "mm"), ("結構模型", "sm")):
            if not (frame["module"] == module).any():
                continue
            lines.extend(["", title, "-" * 64, *_table(parameter_table(frame, module))])

        rebased = rebased_covariate(model, reference=0)
        if rebased is not None:
            table = pd.DataFrame(
                rebased.theta.T,
                index=[f"beta[{d}]" for d in range(rebased.n_features)] + ["intercept"],
            )
            lines.extend(["", "covariate 係數（以類別 0 為參考）", "-" * 64, *_table(table)])

    lines.append(RULE)
    return "\n".join(lines) + "\n"


def write_report(text: str, path: PathLike) -> Path:
    out = Path(path)
    out.write_text(text, encoding="utf-8")
    logger.info(Messages.REPORT_WRITTEN, path=str(out))
    return out


@dataclass(frozen=True, eq=False)
class SavedModel:
    """模型檔內容：模型、類別編碼表與（選用的）擬合統計"""

    model: MixtureModel
    encodings: Dict[str, LevelMap] = field(default_factory=dict)
    stats: Optional[FitReportStats] = None

    def level_maps(self, module: str) -> LevelMap:
        return dict(self.encodings.get(module, {}))


def model_to_dict(
    model: MixtureModel,
    stats: Optional[FitReportStats] = None,
    encodings: Optional[Mapping[str, LevelMap]] = None,
) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"schema_version": SCHEMA_VERSION, **model.to_dict()}
    payload["encodings"] = {
        module: {name: [float(x) for x in levels] for name, levels in maps.items()}
        for module, maps in (encodings or {}).items()
    }
    payload["stats"] = stats.to_dict() if stats is not None else None
    return payload


def save_model(
    model: MixtureModel,
    path: PathLike,
    stats: Optional[FitReportStats] = None,
    encodings: Optional[Mapping[str, LevelMap]] = None,
) -> Path:
    """寫出模型 JSON 檔"""
    out = Path(path)
    payload = model_to_dict(model, stats, encodings)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, allow_nan=False)
        f.write("\n")
    logger.info(Messages.MODEL_SAVED, path=str(out), n_components=model.n_components)
    return out


def model_from_dict(raw: Any) -> SavedModel:
    """
    由已解析的 JSON 建立模型並檢查所有型別不變量

    Raises:
        UnsupportedVersionError: schema_version 與目前版本不同
        SchemaError: 結構不符
        ValidationError: 參數違反不變量
    """
    if isinstance(raw, dict) and "schema_version" in raw:
        if raw["schema_version"] != SCHEMA_VERSION:
            raise UnsupportedVersionError(
                f"不支援的模型檔版本: {raw['schema_version']}",
                found_version=raw["schema_version"],
                expected_version=SCHEMA_VERSION,
            )
    check_schema(raw, MODEL_JSON_SCHEMA, "模型檔")
    try:
        model = MixtureModel.from_dict(raw)
    except (KeyError, TypeError) as e:
        raise SchemaError(f"模型檔缺少參數欄位: {e}", json_path="$.params") from e
    for block in model.blocks:
        check_invariants(block.params)

    stats = raw.get("stats")
    return SavedModel(
        model=model,
        encodings={k: dict(v) for k, v in (raw.get("encodings") or {}).items()},
        stats=FitReportStats.from_dict(stats) if stats else None,
    )


def load_saved(path: PathLike) -> SavedModel:
    return model_from_dict(read_json(path, "模型檔"))


def load_model(path: PathLike) -> MixtureModel:
    """讀取模型 JSON 檔"""
    return load_saved(path).model
