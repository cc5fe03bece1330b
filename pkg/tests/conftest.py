# ruff: noqa: D100, D103

import pytest
import torch

from mixexpo.config import ModelConfig
from mixexpo.data import PairedDataset
from mixexpo.model import ExposureCorrectionNet

from tests.fixtures.images import TINY_MODEL, mixed_pair, small_extractor


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_net(tiny_config):
    torch.manual_seed(0)
    return ExposureCorrectionNet(tiny_config)


@pytest.fixture
def extractor():
    return small_extractor()


@pytest.fixture
def pairs():
    return PairedDataset([mixed_pair(seed) for seed in range(3)])
