from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from torchbridge import AdapterConfig, build_model

SMALL_RESNET = AdapterConfig(model="resnet18", input_size=64, n_classes=4, seed=1)
SMALL_VIT = AdapterConfig(model="vit_b_16", input_size=64, n_classes=4, seed=1)


@pytest.fixture(scope="session")
def resnet():
    return build_model(SMALL_RESNET)


@pytest.fixture(scope="session")
def vit():
    return build_model(SMALL_VIT)


@pytest.fixture(scope="session")
def images():
    rng = np.random.default_rng(7)
    return rng.uniform(0.0, 1.0, (3, 64, 64, 3)).astype(np.float32)
