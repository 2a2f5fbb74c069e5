import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unicd import ModelConfig  # noqa: E402
from unicd.gradsuite import tiny_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture(params=["bcd", "scd", "bda"])
def task(request):
    return request.param


@pytest.fixture
def tiny(task):
    return tiny_model(task)


def leaf(rng, *shape):
    from unicd.tensor import Tensor
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture(scope="session")
def trained_bcd():
    """Default-size BCD model trained for 500 steps on 16 synthetic 32x32 scenes."""
    from unicd import ChangeModel
    from unicd.data import generate_dataset
    from unicd.train import TrainConfig, train
    model = ChangeModel(ModelConfig(task="bcd"))
    train(model, generate_dataset("bcd", 16, 32, 32, seed=0), TrainConfig(task="bcd", max_iters=500, stage_split=1.0))
    return model.eval()


def pytest_terminal_summary(terminalreporter):
    import criteria
    if criteria.LINES:
        terminalreporter.section("acceptance criteria")
        for line in criteria.LINES:
            terminalreporter.write_line(line)
