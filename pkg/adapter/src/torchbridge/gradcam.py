"""GradCAM over a spatial activation layer or a ViT token grid.

The map is the ReLU of the activation weighted channel-wise by the
spatially-averaged gradient of the target, bilinearly upsampled to the input
resolution. Maps are returned unnormalized; the engine max-normalizes so all
backends share one convention.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from torchbridge.models import WrappedModel


def _tokens_to_grid(t: torch.Tensor) -> torch.Tensor:
    """(B, 1+N, C) token activations -> (B, C, G, G), dropping the class token."""
    spatial = t[:, 1:, :]
    n = spatial.shape[1]
    g = int(math.isqrt(n))
    if g * g != n:
        raise ValueError(f"token count {n} is not a square grid")
    return spatial.reshape(t.shape[0], g, g, t.shape[2]).permute(0, 3, 1, 2)


def _as_grid(raw: torch.Tensor, layer_kind: str) -> torch.Tensor:
    if layer_kind == "tokens":
        return _tokens_to_grid(raw)
    if raw.ndim != 4:
        raise ValueError(f"layer output has no spatial structure: shape {tuple(raw.shape)}")
    return raw


def _targets(model: WrappedModel, feats: torch.Tensor, kind: str, index: int) -> torch.Tensor:
    if kind == "feature":
        if not 0 <= index < model.feature_dim:
            raise IndexError(f"feature index {index} out of range")
        return feats[:, index]
    if kind == "class":
        logits = model.head(feats)
        if not 0 <= index < logits.shape[1]:
            raise IndexError(f"class id {index} out of range")
        return logits[:, index]
    raise ValueError(f"unknown saliency kind {kind!r}")


def gradcam(model: WrappedModel, images: np.ndarray, kind: str, index: int) -> np.ndarray:
    """Batched GradCAM via a single backward pass over summed targets
    (per-sample targets are independent, so the batch gradients are exact).
    """
    module = model.saliency_module()
    captured: dict[str, torch.Tensor] = {}

    def forward_hook(_module, _inputs, output):
        # Swap in a leaf tensor: backward stops here, which both yields the
        # activation gradient and skips the frozen layers below.
        leaf = output.detach().requires_grad_(True)
        captured["acts"] = leaf
        return leaf

    handle = module.register_forward_hook(forward_hook)
    try:
        x = model.to_tensor(images)
        with torch.enable_grad():
            feats = model.extractor(x)
            target = _targets(model, feats, kind, index).sum()
            target.backward()
    finally:
        handle.remove()

    leaf = captured["acts"]
    if leaf.grad is None:
        raise RuntimeError(f"layer {model.config.saliency_layer!r} does not feed the target")
    acts = _as_grid(leaf.detach(), model.config.layer_kind)
    grads = _as_grid(leaf.grad, model.config.layer_kind)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    size = model.config.input_size
    cam = F.interpolate(cam, size=(size, size), mode="bilinear", align_corners=False)
    return cam[:, 0].cpu().numpy().astype(np.float32)
