from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regionprobe.bridge import ReferenceConfig, TrainHyper, reference_backend, train_linear_head
from regionprobe.dataset import ATTRIBUTES, Dataset, Sample, SynthSpec, synth_dataset

# Configuration used by the desk-scale end-to-end checks: subtle palette and
# large-ish objects so noise genuinely degrades accuracy, 8x8 pooling so the
# backend is robust to sub-cell perturbations.
E2E_SYNTH = dict(
    n_samples=200,
    image_size=64,
    n_classes=4,
    contrast=0.25,
    texture=0.01,
    area_range=(0.40, 0.60),
)
E2E_BACKEND = ReferenceConfig(image_size=64, n_classes=4, feature_dim=32, pooling_cell=8)
E2E_TRAIN = TrainHyper(lr=0.05, epochs=80, weight_decay=1e-5, seed=3)


@pytest.fixture(scope="session")
def fg_dataset() -> Dataset:
    return synth_dataset(SynthSpec(coding="foreground", seed=11, **E2E_SYNTH))


@pytest.fixture(scope="session")
def bg_dataset() -> Dataset:
    return synth_dataset(SynthSpec(coding="background", seed=11, **E2E_SYNTH))


@pytest.fixture(scope="session")
def trained_fg_backend(fg_dataset):
    backend = reference_backend(E2E_BACKEND, seed=3)
    return train_linear_head(backend, fg_dataset, E2E_TRAIN)


@pytest.fixture(scope="session")
def trained_bg_backend(bg_dataset):
    backend = reference_backend(E2E_BACKEND, seed=3)
    return train_linear_head(backend, bg_dataset, E2E_TRAIN)


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return synth_dataset(
        SynthSpec(n_samples=10, image_size=32, coding="foreground", n_classes=2, seed=5)
    )


def make_planted_dataset(
    n_per_class: int = 30,
    image_size: int = 64,
    cell: int = 8,
    seed: int = 0,
) -> tuple[Dataset, dict]:
    """Fixed-layout two-class dataset for attribution tests.

    Every sample's object is the same centered rectangle; the class-unique
    attribute region is a fixed 3x3-cell patch inside it, drawn much
    brighter than the body so a feature wired to those cells both
    top-activates on that class and matches the attribute mask. Returns the
    dataset plus the planted layout (pixel slices per attribute).
    """
    rng = np.random.default_rng(seed)
    size = image_size
    samples = []
    # Object: central rectangle spanning cells [1, 7) x [1, 7).
    obj = np.zeros((size, size))
    obj[cell : 7 * cell, cell : 7 * cell] = 1.0
    layout = {
        "beak": (slice(1 * cell, 4 * cell), slice(1 * cell, 4 * cell)),
        "ears": (slice(4 * cell, 7 * cell), slice(4 * cell, 7 * cell)),
    }
    class_attr = {"bird": "beak", "car": "ears"}
    # Patch channel sums clearly exceed the body's, so the patch dominates
    # any positively-weighted cell feature.
    patch_color = {"bird": (0.95, 0.90, 0.85), "car": (0.85, 0.90, 0.95)}
    for cls in ("bird", "car"):
        attr = class_attr[cls]
        for i in range(n_per_class):
            image = np.full((size, size, 3), 0.5)
            body = rng.uniform(0.55, 0.65, size=3)
            image[obj == 1.0] = body
            amask = np.zeros((size, size))
            amask[layout[attr]] = 1.0
            image[amask == 1.0] = patch_color[cls]
            attributes = {a: 0 for a in ATTRIBUTES}
            attributes[attr] = 1
            samples.append(
                Sample(
                    id=f"{cls}-{i:03d}",
                    split="train" if i < int(n_per_class * 0.6) else "test",
                    class_label=cls,
                    image=image,
                    object_mask=obj.copy(),
                    attributes=attributes,
                    attribute_masks={attr: amask},
                )
            )
    return Dataset(samples=samples), {"layout": layout, "class_attr": class_attr}


def make_attr_random_dataset(n: int = 100, seed: int = 0) -> Dataset:
    """Single-class dataset where one attribute is present on a coin flip
    and its patch matches the body's mean color, so attribute presence
    barely moves any cell-pooled feature. Used for ROC null checks."""
    rng = np.random.default_rng(seed)
    size, cell = 64, 8
    obj = np.zeros((size, size))
    obj[cell : 7 * cell, cell : 7 * cell] = 1.0
    patch = (slice(2 * cell, 3 * cell), slice(2 * cell, 3 * cell))
    samples = []
    for i in range(n):
        image = np.full((size, size, 3), 0.5)
        body = rng.uniform(0.55, 0.65, size=3)
        image[obj == 1.0] = body
        attributes = {a: 0 for a in ATTRIBUTES}
        attribute_masks = {}
        if i % 2 == 0:
            amask = np.zeros((size, size))
            amask[patch] = 1.0
            image[amask == 1.0] = 0.6
            attributes["beak"] = 1
            attribute_masks["beak"] = amask
        samples.append(
            Sample(
                id=f"bird-{i:03d}",
                split="train" if i < int(n * 0.6) else "test",
                class_label="bird",
                image=image,
                object_mask=obj.copy(),
                attributes=attributes,
                attribute_masks=attribute_masks,
            )
        )
    return Dataset(samples=samples)


@pytest.fixture(scope="session")
def planted():
    return make_planted_dataset()
