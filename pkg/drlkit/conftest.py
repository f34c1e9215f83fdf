"""
Pytest fixtures for drlkit tests.

Models are tiny (3 classes, 6-dim or 1×6×6 inputs) so gradient and attack
property loops stay fast.
"""

import logging

import numpy as np
import pytest

from drlkit.models.dataset import AugmentedDataset
from drlkit.models.schemas import ArchKind, ArchSpec, SyntheticTaskSpec
from drlkit.services.model_zoo import init_model
from drlkit.services.synthetic_task import make_image_task
from drlkit.utils.logging_config import set_run_context

TINY_TASK = SyntheticTaskSpec(num_classes=3, channels=1, size=6, n_train=60, n_test=30, smoothing=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_arch():
    return ArchSpec(kind=ArchKind.LINEAR, input_shape=(6,), num_classes=3)


@pytest.fixture
def mlp_arch():
    return ArchSpec(kind=ArchKind.MLP, input_shape=(1, 6, 6), num_classes=3, hidden=(8,))


@pytest.fixture
def conv_arch():
    return ArchSpec(kind=ArchKind.SMALL_CONV, input_shape=(1, 6, 6), num_classes=3, channels=(2, 3))


@pytest.fixture
def linear_model(linear_arch):
    return init_model(linear_arch, seed=0)


@pytest.fixture
def mlp_model(mlp_arch):
    return init_model(mlp_arch, seed=1)


@pytest.fixture
def conv_model(conv_arch):
    return init_model(conv_arch, seed=2)


@pytest.fixture(scope="session")
def tiny_task():
    """(train, test) example lists of the 3-class 6×6 synthetic task."""
    return make_image_task(TINY_TASK, seed=0)


@pytest.fixture(scope="session")
def tiny_clean(tiny_task):
    train, _ = tiny_task
    return AugmentedDataset.self_paired(train, {"data_amount": len(train)})


@pytest.fixture
def restore_root_logger():
    """Undo configure_logging() side effects on the root logger."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
    set_run_context()
