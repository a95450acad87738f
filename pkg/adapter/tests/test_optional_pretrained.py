"""Checkpoint- and data-dependent checks, skipped unless the environment
provides them:

  TORCHBRIDGE_PRETRAINED=1    allow downloading torchvision weights
  RIVAL10_MANIFEST=<path>     real dataset manifest for the accuracy bar
"""

from __future__ import annotations

import os
import sys

import pytest

needs_pretrained = pytest.mark.skipif(
    os.environ.get("TORCHBRIDGE_PRETRAINED") != "1",
    reason="set TORCHBRIDGE_PRETRAINED=1 to download torchvision checkpoints",
)


@needs_pretrained
def test_pretrained_resnet50_loads():
    from torchbridge import AdapterConfig, build_model

    model = build_model(
        AdapterConfig(model="resnet50", weights="torchvision", input_size=224, n_classes=10)
    )
    assert model.feature_dim == 2048


@needs_pretrained
@pytest.mark.skipif("RIVAL10_MANIFEST" not in os.environ, reason="needs the real dataset")
def test_resnet50_linear_head_accuracy_bar():
    """Pretrained ResNet50 features plus a linear head reach at least 97%
    test accuracy on the real dataset (reported value: 99.10)."""
    import json

    regionprobe = pytest.importorskip("regionprobe")
    from regionprobe.bridge import TrainHyper, train_linear_head
    from regionprobe.bridge.remote import connect_command
    from regionprobe.dataset import load_manifest
    from regionprobe.metrics import default_class_index, evaluate_accuracy

    ds = load_manifest(os.environ["RIVAL10_MANIFEST"])
    config = {"model": "resnet50", "weights": "torchvision", "input_size": 224, "n_classes": 10}
    backend = connect_command(
        [sys.executable, "-m", "torchbridge", "--config", json.dumps(config)], timeout_s=600
    )
    try:
        trained = train_linear_head(backend, ds, TrainHyper())  # protocol defaults
        acc = evaluate_accuracy(trained, ds.test.samples, default_class_index(ds))
        assert acc >= 0.97
    finally:
        backend.close()
