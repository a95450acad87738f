"""Resizing and quantization helpers shared by the bridge and corruption ops."""

from __future__ import annotations

import numpy as np
from PIL import Image


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (H, W) or (H, W, C) float array."""
    if arr.shape[:2] == (height, width):
        return arr.copy()
    if arr.ndim == 2:
        im = Image.fromarray(arr.astype(np.float32), mode="F")
        out = im.resize((width, height), resample=Image.BILINEAR)
        return np.asarray(out, dtype=np.float64)
    channels = [
        np.asarray(
            Image.fromarray(arr[:, :, c].astype(np.float32), mode="F").resize(
                (width, height), resample=Image.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(arr.shape[2])
    ]
    return np.stack(channels, axis=2)


def resize_mask_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of a binary mask; output stays in {0, 1}."""
    if mask.shape == (height, width):
        return mask.copy()
    im = Image.fromarray(mask.astype(np.float32), mode="F")
    out = np.asarray(im.resize((width, height), resample=Image.NEAREST), dtype=np.float64)
    return (out >= 0.5).astype(np.float64)


def quantize_bytes(arr: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] float image to uint8 with round-half-up."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
