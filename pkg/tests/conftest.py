"""公共夹具: 样例文件路径、小型合成队列、小模型配置"""
import sys
from pathlib import Path

import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from core.config import ModelConfig, SynthSpec  # noqa: E402
from core.file_handler import FileHandler  # noqa: E402
from core.numeric import configure_determinism  # noqa: E402
from core.cohort import preprocess_cohort  # noqa: E402
from core import synth  # noqa: E402

TEST_FILES = ROOT / "test_files"


@pytest.fixture(autouse=True, scope="session")
def deterministic_torch():
    configure_determinism()
    yield


@pytest.fixture
def files():
    return TEST_FILES


@pytest.fixture
def raw_cohort():
    return FileHandler.parse_cohort(TEST_FILES / "triplets.csv", TEST_FILES / "static.csv",
                                    schema=FileHandler.read_schema(TEST_FILES / "schema.json"),
                                    metadata_file=TEST_FILES / "metadata.csv")


@pytest.fixture
def ranges():
    return FileHandler.read_ranges(TEST_FILES / "ranges.json")


def make_synth_cohort(**overrides):
    """生成并预处理一个合成队列"""
    values = dict(n_episodes=24, n_phenotypes=2, n_ts_features=3, n_static_features=2,
                  missingness_rate=0.6, separation=3.0, seed=3)
    values.update(overrides)
    spec = SynthSpec(**values)
    return preprocess_cohort(synth.generate(spec), synth.clinical_ranges(spec))


@pytest.fixture(scope="session")
def small_cohort():
    return make_synth_cohort()


@pytest.fixture
def tiny_config():
    return ModelConfig(n_blocks=1, d_model=4, n_heads=2, n_clusters=2, batch_size=8,
                       patience=2, pretrain_epochs=2, classifier_epochs=3, iterations=2,
                       kmeans_restarts=2, seed=5)


def double(tensor):
    return torch.as_tensor(tensor, dtype=torch.float64)
