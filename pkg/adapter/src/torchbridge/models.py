"""Model construction and the feature/head split.

The torchvision classifier head is replaced with Identity so the model's
forward yields penultimate features; a separate linear head maps features to
the configured class count. The extractor's parameters are frozen at build
time and the module stays in eval mode, so inference is deterministic and
only the head can ever change.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torchvision import models as tvm

from torchbridge.config import IMAGENET_MEAN, IMAGENET_STD, MODEL_TABLE, AdapterConfig

_BUILDERS = {
    "resnet18": tvm.resnet18,
    "resnet50": tvm.resnet50,
    "resnet101": tvm.resnet101,
    "resnet152": tvm.resnet152,
    "vit_b_16": tvm.vit_b_16,
    "vit_b_32": tvm.vit_b_32,
}


class WrappedModel:
    """A frozen feature extractor plus a trainable linear head."""

    def __init__(self, config: AdapterConfig):
        self.config = config
        torch.manual_seed(config.seed)
        builder = _BUILDERS[config.model]
        kwargs = {}
        if config.family == "vit" and config.input_size != 224:
            kwargs["image_size"] = config.input_size

        if config.weights == "torchvision":
            extractor = builder(weights="DEFAULT", **kwargs)
        else:
            extractor = builder(weights=None, **kwargs)
            if config.weights not in ("none", ""):
                state = torch.load(config.weights, map_location="cpu", weights_only=True)
                extractor.load_state_dict(state)

        if config.family == "resnet":
            self.feature_dim = extractor.fc.in_features
            extractor.fc = nn.Identity()
        else:
            self.feature_dim = extractor.heads.head.in_features
            extractor.heads = nn.Identity()

        self.extractor = extractor.to(config.device)
        self.extractor.eval()
        for p in self.extractor.parameters():
            p.requires_grad_(False)

        torch.manual_seed(config.seed + 1)
        self.head = nn.Linear(self.feature_dim, config.n_classes).to(config.device)

        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self._mean = mean.to(config.device)
        self._std = std.to(config.device)

    # -- input handling -------------------------------------------------------

    def to_tensor(self, images: np.ndarray) -> torch.Tensor:
        """(B, H, W, 3) floats in [0, 1] or uint8 -> normalized NCHW tensor."""
        arr = np.asarray(images)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not arr.flags.writeable:  # frombuffer payloads are read-only
            arr = arr.copy()
        x = torch.from_numpy(arr)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) images, got {tuple(x.shape)}")
        size = self.config.input_size
        if x.shape[1] != size or x.shape[2] != size:
            raise ValueError(
                f"batch is {x.shape[1]}x{x.shape[2]} but this backend declared "
                f"input_size {size}; the caller resizes before dispatch"
            )
        x = x.permute(0, 3, 1, 2).to(self.config.device)
        if self.config.normalize:
            x = (x - self._mean) / self._std
        return x

    # -- inference -------------------------------------------------------------

    @torch.no_grad()
    def features(self, images: np.ndarray) -> np.ndarray:
        x = self.to_tensor(images)
        return self.extractor(x).cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> np.ndarray:
        x = self.to_tensor(images)
        logits = self.head(self.extractor(x))
        return torch.softmax(logits, dim=1).cpu().numpy().astype(np.float32)

    def saliency_module(self) -> nn.Module:
        modules = dict(self.extractor.named_modules())
        name = self.config.saliency_layer
        if name not in modules:
            raise KeyError(f"layer {name!r} not found in {self.config.model}")
        return modules[name]

    def extractor_fingerprint(self) -> float:
        """Cheap change detector over extractor weights."""
        total = 0.0
        for p in self.extractor.parameters():
            total += float(p.double().abs().sum())
        return total

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.extractor.parameters()) + sum(
            p.numel() for p in self.head.parameters()
        )

    def descriptor_extra(self) -> dict:
        meta = {
            "feature_dim": self.feature_dim,
            "n_classes": self.config.n_classes,
            "saliency_layer": self.config.saliency_layer,
            "weights": self.config.weights,
            **self.config.metadata,
        }
        table = MODEL_TABLE[self.config.model]
        if "patch_size" in table:
            meta["patch_size"] = table["patch_size"]
        return {
            "name": self.config.model,
            "family": self.config.family,
            "parameter_count": self.parameter_count(),
            "input_size": self.config.input_size,
            "metadata": meta,
            "capabilities": ["features", "predict", "saliency", "train_head"],
            "concurrent": False,
        }


def build_model(config: AdapterConfig) -> WrappedModel:
    return WrappedModel(config)
