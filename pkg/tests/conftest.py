"""
共用測試 fixture
"""

from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from src.core.constants import EnvVars
from src.core.data_model import Dataset, ModelDescriptor, ModelDescriptors
from src.core.em_engine import EmConfig
from src.estimators.simulation import BakkDesign, SimulatedData, generate

FIXTURES_DIR = Path(__file__).parent / "fixtures"

TWO_CLASS_PI = np.array([[0.9] * 5, [0.1] * 5])
TWO_CLASS_WEIGHTS = np.array([0.4, 0.6])


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch: pytest.MonkeyPatch) -> None:
    """清除執行設定環境變數；測試結束時一併移除 .env 載入的值"""
    for name in (EnvVars.SEED, EnvVars.JOBS, EnvVars.LOG_DIR, EnvVars.LOG_LEVEL):
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES_DIR


@pytest.fixture(scope="session")
def two_class_binary() -> Tuple[Dataset, np.ndarray]:
    """兩類別、五個二元指標的資料與真實類別"""
    rng = np.random.default_rng(3)
    classes = rng.choice(2, size=400, p=TWO_CLASS_WEIGHTS)
    values = (rng.random((400, 5)) < TWO_CLASS_PI[classes]).astype(np.float64)
    return Dataset.from_arrays(values), classes


@pytest.fixture(scope="session")
def binary_descriptors() -> ModelDescriptors:
    return ModelDescriptors(ModelDescriptor.single("binary", 5, name="items"))


@pytest.fixture(scope="session")
def response_data() -> SimulatedData:
    """distal outcome 設計，γ = 0.9"""
    return generate(BakkDesign("response", 1000, separation=0.9, seed=5))


@pytest.fixture
def quick_em() -> EmConfig:
    return EmConfig(n_init=2, seed=0)
