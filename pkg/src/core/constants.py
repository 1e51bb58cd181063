"""
stepfit 專案常數定義
集中管理所有數值預設值、門檻與訊息文字
"""

from typing import Tuple

SCHEMA_VERSION = 1


class Families:
    """發射分布家族名稱"""

    BINARY = "binary"
    CATEGORICAL = "categorical"
    GAUSSIAN_UNIT = "gaussian_unit"
    GAUSSIAN_SPHERICAL = "gaussian_spherical"
    GAUSSIAN_DIAG = "gaussian_diag"
    GAUSSIAN_FULL = "gaussian_full"
    COVARIATE = "covariate"

    ALL: Tuple[str, ...] = (
        BINARY,
        CATEGORICAL,
        GAUSSIAN_UNIT,
        GAUSSIAN_SPHERICAL,
        GAUSSIAN_DIAG,
        GAUSSIAN_FULL,
        COVARIATE,
    )

    # 不支援 FIML 的家族
    NO_FIML: Tuple[str, ...] = (GAUSSIAN_FULL, COVARIATE)

    # 家族字串後綴 "_nan" 代表啟用 FIML
    FIML_SUFFIX = "_nan"


class Numerics:
    """數值穩定性門檻"""

    PROB_CLAMP = 1e-15
    VARIANCE_FLOOR = 1e-6
    EIGENVALUE_FLOOR = 1e-6
    MAX_CATEGORICAL_LEVELS = 1000
    BCH_MAX_CONDITION = 1e12

    # 型別不變量的容許誤差
    ROW_SUM_TOL = 1e-10
    CLASS_WEIGHT_SUM_TOL = 1e-12
    MONOTONE_SLACK = 1e-8


class EmDefaults:
    """EM 演算法預設值"""

    MAX_ITER = 1000
    ABS_TOL = 1e-10
    REL_TOL = None
    N_INIT = 1
    SEED = 0


class SolverDefaults:
    """covariate 區塊數值求解器預設值"""

    METHOD = "newton"
    METHODS: Tuple[str, ...] = ("newton", "gradient")
    MAX_ITER = 100
    STEP_SIZE = 1e-3
    GRAD_TOL = 1e-8
    MAX_BACKTRACK = 50


class StepwiseDefaults:
    """逐步估計設定值"""

    N_STEPS: Tuple[int, ...] = (1, 2, 3)
    ASSIGNMENTS: Tuple[str, ...] = ("soft", "modal")
    CORRECTIONS: Tuple[str, ...] = ("none", "bch", "ml")


class BootstrapDefaults:
    """bootstrap 設定值"""

    MAX_FAILURE_RATIO = 0.2
    EXACT_ALIGNMENT_MAX_K = 8
    MIN_REPETITIONS = 2


class SimulationDefaults:
    """模擬研究設計參數"""

    N_CLASSES = 3
    N_INDICATORS = 6
    CLASS_WEIGHTS: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    OUTCOME_MEANS: Tuple[float, ...] = (-1.0, 1.0, 0.0)
    COVARIATE_BETA: Tuple[float, ...] = (0.0, -1.0, 1.0)
    COVARIATE_INTERCEPT: Tuple[float, ...] = (0.0, 2.35, -3.66)
    COVARIATE_LEVELS: Tuple[int, ...] = (1, 2, 3, 4, 5)
    SEPARATIONS: Tuple[float, ...] = (0.7, 0.8, 0.9)
    DEFAULT_SEPARATION = 0.8
    MISSING_RATIOS: Tuple[float, ...] = (0.0, 0.25, 0.5)
    SAMPLE_SIZES: Tuple[int, ...] = (500, 1000, 2000)
    DEFAULT_REPLICATIONS = 100
    STUDY_N_INIT = 3
    ESTIMATORS: Tuple[str, ...] = ("1-step", "2-step", "3-naive", "3-bch", "3-ml")
    KINDS: Tuple[str, ...] = ("response", "covariate", "complete")


class ExitCodes:
    """CLI 結束代碼"""

    OK = 0
    VALIDATION_ERROR = 1
    NUMERICAL_FAILURE = 2


class EnvVars:
    """環境變數名稱"""

    SEED = "STEPFIT_SEED"
    JOBS = "STEPFIT_JOBS"
    LOG_DIR = "STEPFIT_LOG_DIR"
    LOG_LEVEL = "LOG_LEVEL"


class Messages:
    """訊息文字常數"""

    MODEL_SAVED = "💾 模型已儲存"
    REPORT_WRITTEN = "📝 報告已輸出"
    STUDY_CELL_DONE = "📊 模擬設定完成"


class ErrorMessages:
    """錯誤訊息常數"""

    FIML_UNSUPPORTED = "FIML unsupported for {family}"
    DEGENERATE_CLASS = "類別 {class_index} 的有效權重為零"
    LIKELIHOOD_UNDERFLOW = "觀測單位 {unit_index} 在所有類別的聯合對數機率皆為 -inf"
    SAMPLING_WITH_COVARIATE = (
        "模型含 covariate 區塊：潛在類別 X 的邊際分布未明確指定，無法抽樣"
    )
    BCH_INFEASIBLE = "D 矩陣接近奇異 (條件數 {condition:.3g})，建議改用 ML 校正"


class LoggingConfig:
    """日誌設定"""

    LOG_LEVEL = "INFO"
    LOG_FILE_MAX_SIZE = 10 * 1024 * 1024  # 10MB
    LOG_BACKUP_COUNT = 5
    ROOT_LOGGER = "stepfit"
