"""Adapter configuration and the table of known model variants."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

# Known variants: family, penultimate width, declared parameter count, and
# patch size where applicable. Parameter counts are filled from the live
# model at load; this table pins family mapping and saliency-layer defaults.
MODEL_TABLE = {
    "resnet18": {"family": "resnet", "default_layer": "layer4", "layer_kind": "conv"},
    "resnet50": {"family": "resnet", "default_layer": "layer4", "layer_kind": "conv"},
    "resnet101": {"family": "resnet", "default_layer": "layer4", "layer_kind": "conv"},
    "resnet152": {"family": "resnet", "default_layer": "layer4", "layer_kind": "conv"},
    "vit_b_16": {
        "family": "vit",
        "default_layer": "encoder.layers.encoder_layer_11",
        "layer_kind": "tokens",
        "patch_size": 16,
    },
    "vit_b_32": {
        "family": "vit",
        "default_layer": "encoder.layers.encoder_layer_11",
        "layer_kind": "tokens",
        "patch_size": 32,
    },
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AdapterConfig:
    """What to serve.

    weights: "none" for a seeded random initialization, "torchvision" for
    the pretrained checkpoint, or a filesystem path to a state dict.
    layer: dotted module path for GradCAM; defaults per MODEL_TABLE.
    """

    model: str = "resnet18"
    weights: str = "none"
    n_classes: int = 10
    input_size: int = 224
    layer: str | None = None
    device: str = "cpu"
    batch_size: int = 32
    seed: int = 0
    normalize: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_TABLE:
            raise ValueError(
                f"unknown model {self.model!r}; known: {sorted(MODEL_TABLE)}"
            )
        if self.input_size < 32:
            raise ValueError("input_size must be >= 32")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def saliency_layer(self) -> str:
        return self.layer or MODEL_TABLE[self.model]["default_layer"]

    @property
    def layer_kind(self) -> str:
        return MODEL_TABLE[self.model]["layer_kind"]

    @property
    def family(self) -> str:
        return MODEL_TABLE[self.model]["family"]

    @staticmethod
    def load(path_or_json: str) -> "AdapterConfig":
        raw = path_or_json.strip()
        data = json.loads(raw) if raw.startswith("{") else json.loads(Path(raw).read_text())
        return AdapterConfig(**data)
