"""
資料模型模組

提供 Dataset（觀測值、缺失遮罩、樣本權重）、模型描述檔 (ModelDescriptor)、
CSV 讀寫與類別變數整數編碼。Dataset 與描述檔建立後不可變，可在並行估計間共享。
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config_validator import DESCRIPTOR_JSON_SCHEMA, check_schema
from .constants import ErrorMessages, Families, Numerics
from .exceptions import CsvParseError, DataError, DescriptorError, ValidationError
from .type_aliases import ArrayLike, BoolArray, ColumnRange, FloatArray, PathLike

MISSING_SENTINEL = "nan"


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """觀測資料集

    values 中未觀測的格子一律為 NaN；missing_mask 為 True 代表已觀測。
    """

    values: FloatArray
    missing_mask: BoolArray
    weights: FloatArray
    column_names: Tuple[str, ...]
    level_maps: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise ValidationError(
                "觀測矩陣必須為二維", field_name="values", field_value=values.ndim
            )
        n_units, n_columns = values.shape

        mask = np.array(self.missing_mask, dtype=bool).reshape(values.shape)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        names = tuple(str(c) for c in self.column_names)

        if weights.shape[0] != n_units:
            raise ValidationError(
                "樣本權重長度與觀測單位數不符",
                field_name="weights",
                field_value=weights.shape[0],
                expected=n_units,
            )
        if len(names) != n_columns:
            raise ValidationError(
                "欄位名稱數與欄位數不符",
                field_name="column_names",
                field_value=len(names),
                expected=n_columns,
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            bad = int(np.flatnonzero(~(np.isfinite(weights) & (weights >= 0)))[0])
            raise ValidationError(
                "樣本權重必須為非負有限實數",
                field_name="weights",
                field_value=float(weights[bad]),
                validation_rule="nonnegative",
                row=bad,
            )
        if not np.any(weights > 0):
            raise ValidationError(
                "至少需要一個正的樣本權重",
                field_name="weights",
                validation_rule="positive_total",
                record_count=n_units,
            )

        observed_bad = mask & ~np.isfinite(values)
        if observed_bad.any():
            row, col = (int(i) for i in np.argwhere(observed_bad)[0])
            raise ValidationError(
                "已觀測的格子必須為有限數值",
                field_name=names[col],
                validation_rule="finite_observed",
                row=row,
            )
        values = np.where(mask, values, np.nan)

        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "missing_mask", _readonly(mask))
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "column_names", names)
        object.__setattr__(
            self,
            "level_maps",
            {str(k): tuple(float(x) for x in v) for k, v in dict(self.level_maps).items()},
        )

    @classmethod
    def from_arrays(
        cls,
        values: ArrayLike,
        weights: Optional[ArrayLike] = None,
        column_names: Optional[Sequence[str]] = None,
        missing_mask: Optional[ArrayLike] = None,
    ) -> "Dataset":
        """由陣列建立資料集；未給遮罩時以 NaN 判定缺失"""
        matrix = np.asarray(values, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix.reshape(-1, 1)
        mask = ~np.isnan(matrix) if missing_mask is None else np.asarray(missing_mask)
        if weights is None:
            weights = np.ones(matrix.shape[0])
        if column_names is None:
            column_names = [f"x{j}" for j in range(matrix.shape[1])]
        return cls(matrix, mask, np.asarray(weights, dtype=np.float64), tuple(column_names))

    @property
    def n_units(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_columns(self) -> int:
        return int(self.values.shape[1])

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def fully_observed(self) -> bool:
        return bool(self.missing_mask.all())

    def columns(self, column_range: ColumnRange) -> "Dataset":
        """取出含頭含尾的欄位範圍"""
        lo, hi = column_range
        names = self.column_names[lo : hi + 1]
        return Dataset(
            self.values[:, lo : hi + 1],
            self.missing_mask[:, lo : hi + 1],
            self.weights,
            names,
            {k: v for k, v in self.level_maps.items() if k in names},
        )

    def take(self, indices: ArrayLike) -> "Dataset":
        """依索引重抽觀測單位（保留各單位的樣本權重）"""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.values[idx],
            self.missing_mask[idx],
            self.weights[idx],
            self.column_names,
            self.level_maps,
        )

    def with_weights(self, weights: ArrayLike) -> "Dataset":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))

    def with_values(self, values: FloatArray, level_maps: Mapping[str, Tuple[float, ...]]) -> "Dataset":
        return replace(self, values=values, level_maps=level_maps)

    def to_frame(self, weight_column: Optional[str] = None) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.column_names))
        if weight_column is not None:
            frame[weight_column] = self.weights
        return frame


def _parse_column(raw: pd.Series, column: str) -> Tuple[FloatArray, BoolArray]:
    stripped = raw.astype(str).str.strip()
    missing = (stripped == "") | (stripped.str.lower() == MISSING_SENTINEL)
    values = np.full(len(stripped), np.nan)
    observed = ~missing.to_numpy()
    cells = stripped.to_numpy()[observed]
    try:
        values[observed] = cells.astype(np.float64)
    except ValueError:
        for position, text in zip(np.flatnonzero(observed), cells):
            try:
                float(text)
            except ValueError:
                raise CsvParseError(
                    f"無法解析的數值 '{text}'",
                    row=int(position) + 1,
                    column=column,
                    data_type="csv",
                ) from None
    return values, observed


def load_csv(path: PathLike, weight_column: Optional[str] = None) -> Dataset:
    """
    讀取含標題列的 CSV 檔案

    空白格子與 "NaN"（不分大小寫）視為缺失。

    Args:
        path: CSV 檔案路徑
        weight_column: 樣本權重欄位名稱，讀取後自觀測矩陣移除

    Returns:
        Dataset

    Raises:
        CsvParseError: 非數值且非缺失標記的格子（含列號與欄位名稱）
        ValidationError: 權重欄位缺失、為負或無任何資料列
    """
    csv_path = Path(path)
    if not csv_path.exists():
        raise DataError(f"CSV 檔案不存在: {csv_path}", data_type="csv", file=str(csv_path))
    try:
        frame = pd.read_csv(
            csv_path,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError as e:
        raise DataError(f"CSV 檔案為空: {csv_path}", record_count=0, data_type="csv") from e
    except pd.errors.ParserError as e:
        raise CsvParseError(f"CSV 格式錯誤: {e}", data_type="csv") from e

    if frame.shape[0] == 0:
        raise DataError(f"CSV 檔案沒有任何資料列: {csv_path}", record_count=0, data_type="csv")

    weights = np.ones(frame.shape[0])
    if weight_column is not None:
        if weight_column not in frame.columns:
            raise ValidationError(
                f"找不到權重欄位: {weight_column}",
                field_name=weight_column,
                validation_rule="weight_column_present",
            )
        weight_values, observed = _parse_column(frame.pop(weight_column), weight_column)
        if not observed.all():
            raise ValidationError(
                "樣本權重不可缺失",
                field_name=weight_column,
                validation_rule="weight_observed",
                row=int(np.flatnonzero(~observed)[0]) + 1,
            )
        weights = weight_values

    columns = [str(c) for c in frame.columns]
    values = np.empty((frame.shape[0], len(columns)))
    mask = np.empty(values.shape, dtype=bool)
    for j, column in enumerate(columns):
        values[:, j], mask[:, j] = _parse_column(frame[column], column)

    return Dataset(values, mask, weights, tuple(columns))


def write_csv(data: Dataset, path: PathLike, weight_column: Optional[str] = None) -> None:
    """寫出 CSV；缺失格子寫為空白，浮點數使用最短往返表示"""
    frame = data.to_frame(weight_column)
    frame.to_csv(path, index=False, na_rep="")


# ---------------------------------------------------------------------------
# 模型描述檔
# ---------------------------------------------------------------------------


def parse_family(family: str) -> Tuple[str, bool]:
    """解析家族字串，"_nan" 後綴代表啟用 FIML"""
    text = family.strip().lower()
    if text.endswith(Families.FIML_SUFFIX):
        return text[: -len(Families.FIML_SUFFIX)], True
    return text, False


@dataclass(frozen=True)
class DescriptorBlock:
    """描述檔中的單一區塊"""

    name: str
    family: str
    columns: ColumnRange
    fiml: bool = False
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lo, hi = (int(c) for c in self.columns)
        object.__setattr__(self, "columns", (lo, hi))
        object.__setattr__(self, "options", dict(self.options))

    @property
    def width(self) -> int:
        return self.columns[1] - self.columns[0] + 1

    @property
    def n_levels(self) -> Optional[int]:
        value = self.options.get("n_levels")
        return int(value) if value is not None else None

    def with_options(self, **options: Any) -> "DescriptorBlock":
        return replace(self, options={**self.options, **options})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "family": self.family,
            "columns": [self.columns[0], self.columns[1]],
            "fiml": self.fiml,
            "options": dict(self.options),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], default_name: str) -> "DescriptorBlock":
        family, suffix_fiml = parse_family(str(raw["family"]))
        return cls(
            name=str(raw.get("name") or default_name),
            family=family,
            columns=(int(raw["columns"][0]), int(raw["columns"][1])),
            fiml=bool(raw.get("fiml", False)) or suffix_fiml,
            options=dict(raw.get("options") or {}),
        )


@dataclass(frozen=True)
class ModelDescriptor:
    """有序的區塊清單，指出各欄位範圍使用的分布家族"""

    blocks: Tuple[DescriptorBlock, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @classmethod
    def single(
        cls,
        family: str,
        n_columns: int,
        name: Optional[str] = None,
        fiml: bool = False,
        options: Optional[Mapping[str, Any]] = None,
    ) -> "ModelDescriptor":
        base, suffix_fiml = parse_family(family)
        block = DescriptorBlock(
            name=name or base,
            family=base,
            columns=(0, n_columns - 1),
            fiml=fiml or suffix_fiml,
            options=options or {},
        )
        return cls((block,))

    @classmethod
    def parse(
        cls, raw: Union[str, Mapping[str, Any], "ModelDescriptor"], n_columns: Optional[int]
    ) -> "ModelDescriptor":
        """
        由 JSON 物件或家族字串建立描述檔

        純字串代表單一區塊涵蓋所有欄位，此時需要 n_columns。
        """
        if isinstance(raw, ModelDescriptor):
            return raw
        if isinstance(raw, str):
            if n_columns is None or n_columns < 1:
                raise DescriptorError(
                    "家族字串簡寫需要已知的欄位數", block_name=raw, rule="range_exceeds"
                )
            return cls.single(raw, n_columns)
        check_schema(raw, DESCRIPTOR_JSON_SCHEMA, "描述檔")
        blocks = tuple(
            DescriptorBlock.from_dict(block, default_name=f"block{i}")
            for i, block in enumerate(raw["blocks"])
        )
        return cls(blocks)

    @property
    def covariate_block(self) -> Optional[DescriptorBlock]:
        for block in self.blocks:
            if block.family == Families.COVARIATE:
                return block
        return None

    @property
    def has_covariate(self) -> bool:
        return self.covariate_block is not None

    def replace_block(self, block: DescriptorBlock) -> "ModelDescriptor":
        return ModelDescriptor(
            tuple(block if b.name == block.name else b for b in self.blocks)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"blocks": [b.to_dict() for b in self.blocks]}

    def problems(self, n_columns: int, role: str = "structural") -> List[Tuple[str, str, str]]:
        """
        檢查描述檔不變量

        Args:
            n_columns: 資料欄位數
            role: "measurement" 或 "structural"

        Returns:
            (rule, block_name, 訊息) 列表，空列表代表通過
        """
        found: List[Tuple[str, str, str]] = []
        for block in self.blocks:
            if block.family not in Families.ALL:
                found.append(("unknown_family", block.name, f"未知的分布家族: {block.family}"))
            if block.fiml and block.family in Families.NO_FIML:
                found.append(
                    (
                        "fiml_unsupported",
                        block.name,
                        ErrorMessages.FIML_UNSUPPORTED.format(family=block.family),
                    )
                )
            lo, hi = block.columns
            if lo > hi or lo < 0 or hi >= n_columns:
                found.append(
                    (
                        "range_exceeds",
                        block.name,
                        f"區塊 {block.name} 的欄位範圍 [{lo}, {hi}] 超出資料欄位數 {n_columns}",
                    )
                )

        if role == "measurement":
            for block in self.blocks:
                if block.family == Families.COVARIATE:
                    found.append(
                        (
                            "covariate_in_measurement",
                            block.name,
                            "covariate 區塊不可出現在測量模型",
                        )
                    )
        covariates = [b for b in self.blocks if b.family == Families.COVARIATE]
        if len(covariates) > 1:
            found.append(
                (
                    "multiple_covariates",
                    covariates[1].name,
                    "結構模型最多只能有一個 covariate 區塊",
                )
            )

        claimed: Dict[int, str] = {}
        for block in self.blocks:
            lo, hi = block.columns
            for column in range(max(lo, 0), min(hi, n_columns - 1) + 1):
                if column in claimed:
                    found.append(
                        (
                            "overlap",
                            block.name,
                            f"欄位 {column} 同時屬於 {claimed[column]} 與 {block.name}",
                        )
                    )
                    break
                claimed[column] = block.name
        unclaimed = [c for c in range(n_columns) if c not in claimed]
        if unclaimed:
            found.append(
                ("coverage_gap", "", f"欄位 {unclaimed} 未被任何區塊涵蓋")
            )
        return found


@dataclass(frozen=True)
class ModelDescriptors:
    """測量模型與（選用的）結構模型描述檔"""

    measurement: ModelDescriptor
    structural: Optional[ModelDescriptor] = None


def validate_descriptor(desc: ModelDescriptor, data: Dataset, role: str = "structural") -> None:
    """
    檢查描述檔與資料形狀相符

    Raises:
        DescriptorError: 第一個違反的不變量，rule 欄位區分診斷種類
    """
    found = desc.problems(data.n_columns, role)
    if found:
        rule, block_name, message = found[0]
        raise DescriptorError(message, block_name=block_name or None, rule=rule)


def _encode_column(
    column: FloatArray,
    observed: BoolArray,
    name: str,
    n_levels: Optional[int],
    known: Optional[Sequence[float]],
) -> Tuple[FloatArray, Tuple[float, ...]]:
    present = np.unique(column[observed])
    if known is not None:
        levels = np.asarray(known, dtype=np.float64)
    else:
        if present.size > Numerics.MAX_CATEGORICAL_LEVELS:
            raise ValidationError(
                f"欄位 {name} 有 {present.size} 個不同值，超過類別變數上限",
                field_name=name,
                field_value=int(present.size),
                validation_rule="max_levels",
            )
        already_encoded = (
            n_levels is not None
            and present.size > 0
            and np.all(present == np.round(present))
            and present.min() >= 0
            and present.max() < n_levels
        )
        levels = np.arange(n_levels, dtype=np.float64) if already_encoded else present
    if n_levels is not None and levels.size > n_levels:
        raise ValidationError(
            f"欄位 {name} 的類別數 {levels.size} 超過指定的 n_levels={n_levels}",
            field_name=name,
            field_value=int(levels.size),
            validation_rule="n_levels",
        )

    encoded = column.copy()
    codes = np.searchsorted(levels, column[observed])
    codes = np.clip(codes, 0, max(levels.size - 1, 0))
    if levels.size == 0 or np.any(levels[codes] != column[observed]):
        raise ValidationError(
            f"欄位 {name} 含有編碼表以外的值",
            field_name=name,
            validation_rule="known_levels",
        )
    encoded[observed] = codes
    return encoded, tuple(float(x) for x in levels)


def encode_categorical(
    data: Dataset,
    block: DescriptorBlock,
    level_maps: Optional[Mapping[str, Sequence[float]]] = None,
) -> Dataset:
    """
    將區塊欄位中的觀測值依數值遞增順序編碼為 0..C-1

    Args:
        data: 資料集
        block: 類別區塊
        level_maps: 既有的編碼表（預測新資料時沿用訓練時的編碼）

    Returns:
        編碼後的新 Dataset，編碼表記錄於 level_maps
    """
    values = np.array(data.values)
    maps = dict(data.level_maps)
    lo, hi = block.columns
    for j in range(lo, hi + 1):
        name = data.column_names[j]
        known = None if level_maps is None else level_maps.get(name)
        values[:, j], maps[name] = _encode_column(
            values[:, j], data.missing_mask[:, j], name, block.n_levels, known
        )
    return data.with_values(values, maps)


def apply_encodings(data: Dataset, level_maps: Mapping[str, Sequence[float]]) -> Dataset:
    """以既有編碼表編碼同名欄位"""
    values = np.array(data.values)
    maps = dict(data.level_maps)
    for j, name in enumerate(data.column_names):
        if name in level_maps:
            values[:, j], maps[name] = _encode_column(
                values[:, j], data.missing_mask[:, j], name, None, level_maps[name]
            )
    return data.with_values(values, maps)


def encode_descriptor_columns(
    data: Dataset, descriptor: ModelDescriptor
) -> Tuple[Dataset, ModelDescriptor]:
    """
    編碼描述檔中所有類別區塊，並將觀察到的類別數寫回區塊選項

    寫回 n_levels 讓 bootstrap 重抽樣缺少某類別時仍維持相同的 C。
    """
    for block in descriptor.blocks:
        if block.family != Families.CATEGORICAL:
            continue
        data = encode_categorical(data, block)
        lo, hi = block.columns
        counts = [len(data.level_maps[data.column_names[j]]) for j in range(lo, hi + 1)]
        n_levels = max([block.n_levels or 0, *counts])
        descriptor = descriptor.replace_block(block.with_options(n_levels=n_levels))
    return data, descriptor
