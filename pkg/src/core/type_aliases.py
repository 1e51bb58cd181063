"""
型別別名定義模組

此模組提供專案中常用的型別別名，以提高程式碼可讀性和型別安全性。
所有型別別名都使用 TypeAlias 顯式標註，符合 PEP 613 標準。
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

# 陣列相關型別
FloatArray: TypeAlias = npt.NDArray[np.float64]
"""浮點陣列型別：觀測值、參數與責任矩陣"""

BoolArray: TypeAlias = npt.NDArray[np.bool_]
"""布林陣列型別：觀測遮罩 (True = 已觀測)"""

IntArray: TypeAlias = npt.NDArray[np.int64]
"""整數陣列型別：類別索引"""

ArrayLike: TypeAlias = npt.ArrayLike
"""可轉為 numpy 陣列的輸入"""

# 路徑相關型別
PathLike: TypeAlias = Union[str, Path]
"""檔案路徑型別：可以是字串或 Path 物件"""

# 參數與設定相關型別
ParamDict: TypeAlias = Dict[str, Any]
"""參數字典型別：區塊參數序列化後的內容"""

SolverOptions: TypeAlias = Dict[str, Any]
"""求解器選項型別：method、max_iter、step_size、tol 等"""

ColumnRange: TypeAlias = Tuple[int, int]
"""欄位範圍型別：含頭含尾的 (lo, hi)"""

Permutation: TypeAlias = Tuple[int, ...]
"""類別排列型別：位置 k 為對應到的類別索引"""

# 回呼函數型別
ProgressCallback: TypeAlias = Callable[[str], None]
"""進度回呼函數型別：接受字串訊息參數，無回傳值"""

# 日誌相關型別
LogContext: TypeAlias = Dict[str, Any]
"""日誌上下文型別：用於結構化日誌的額外資訊"""

# 驗證相關型別
ValidationReport: TypeAlias = Tuple[bool, List[str]]
"""驗證結果型別：(是否通過, 錯誤訊息列表)"""

LevelMap: TypeAlias = Dict[str, Sequence[float]]
"""類別編碼型別：欄位名稱對應到依序排列的原始值"""
