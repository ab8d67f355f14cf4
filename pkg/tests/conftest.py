"""Shared fixtures."""

import numpy as np
import pytest

from tataa import bfarith
from tataa.config import MachineConfig


@pytest.fixture
def config() -> MachineConfig:
    """Published machine with a single core."""
    return MachineConfig(cores=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def bf16(values) -> np.ndarray:
    return np.asarray(bfarith.from_float(np.asarray(values, dtype=np.float64)), dtype=np.uint16)


def ordered(bits) -> np.ndarray:
    """bf16 patterns on a monotonic integer line, for ULP distances."""
    b = np.asarray(bits).astype(np.int64)
    return np.where(b & 0x8000, -(b & 0x7FFF), b)
