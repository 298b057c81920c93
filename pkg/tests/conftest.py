import numpy as np
import pytest

from incseg import kernels
from incseg.datamodel import build_task_schedule
from incseg.synthetic import SyntheticWorldSpec, make_synthetic_data


@pytest.fixture(params=kernels.available_backends())
def impl(request):
    """Each available kernel backend in turn."""
    return kernels.load_backend(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def city_schedule():
    return build_task_schedule({"tasks": [
        ["road", "sidewalk", "vegetation", "terrain", "sky"],
        ["building", "wall", "fence", "pole", "traffic light", "traffic sign"],
        ["person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"],
    ]})


@pytest.fixture(scope="session")
def world():
    return SyntheticWorldSpec()


@pytest.fixture(scope="session")
def tiny_data(world):
    return make_synthetic_data(world, {"train_1": 24, "train_2": 12, "unlabeled_2": 16, "val": 8}, seed=3)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
