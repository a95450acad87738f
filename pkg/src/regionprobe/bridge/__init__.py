"""Uniform backend bridge: prediction, features, and saliency retrieval.

Backends are queried through a small capability-declared interface. Images
live in the dataset at annotation resolution; the bridge resizes them
(bilinear) to the backend's declared input size at dispatch time, and
resizes returned saliency maps back to each image's resolution before
max-normalizing them, so all backends are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from regionprobe.imageops import quantize_bytes, resize_bilinear

BACKEND_FAMILIES = (
    "resnet",
    "vit",
    "deit",
    "clip-resnet",
    "clip-vit",
    "robust-resnet",
    "simclr",
    "reference",
)

CAPABILITIES = ("predict", "features", "saliency", "train_head")

DEFAULT_BATCH_SIZE = 32
DEFAULT_TIMEOUT_S = 120.0

PROB_SUM_TOL = 1e-5


class BackendError(RuntimeError):
    """Backend crash, timeout, or contract violation."""


class CapabilityError(BackendError):
    """Requested an operation the backend did not declare."""


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    family: str
    parameter_count: int
    input_size: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in BACKEND_FAMILIES:
            raise ValueError(f"unknown backend family {self.family!r}")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")


@dataclass(frozen=True)
class TrainHyper:
    """Linear-head training configuration (Adam). Defaults: lr 1e-4,
    betas (0.9, 0.999), weight decay 1e-5, ten epochs."""

    lr: float = 1e-4
    epochs: int = 10
    weight_decay: float = 1e-5
    seed: int = 0
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)


@runtime_checkable
class Backend(Protocol):
    """What the bridge needs from any backend implementation."""

    def descriptor(self) -> BackendDescriptor: ...

    def capabilities(self) -> frozenset: ...

    def predict(self, images: np.ndarray) -> np.ndarray: ...

    def features(self, images: np.ndarray) -> np.ndarray: ...

    def saliency(self, images: np.ndarray, kind: str, index: int) -> np.ndarray: ...

    def train_head(
        self, batches: Iterable[tuple[np.ndarray, np.ndarray]], hyper: TrainHyper
    ) -> "Backend": ...


def _require(backend: Backend, capability: str) -> None:
    if capability not in backend.capabilities():
        raise CapabilityError(
            f"backend {backend.descriptor().name!r} lacks capability {capability!r}"
        )


def prepare_batch(backend: Backend, images: Sequence[np.ndarray]) -> np.ndarray:
    """Resize a list of (H, W, 3) images to the backend's input size."""
    size = backend.descriptor().input_size
    resized = [resize_bilinear(np.asarray(im, dtype=np.float64), size, size) for im in images]
    batch = np.stack(resized)
    if backend.descriptor().metadata.get("input_dtype") == "uint8":
        return quantize_bytes(batch)
    return batch


def _batched(images: Sequence[np.ndarray], batch_size: int):
    for start in range(0, len(images), batch_size):
        yield start, images[start : start + batch_size]


def predict_probs(
    backend: Backend, images: Sequence[np.ndarray], batch_size: int = DEFAULT_BATCH_SIZE
) -> np.ndarray:
    """Probability vectors for a batch of images, order-preserving."""
    _require(backend, "predict")
    if len(images) == 0:
        raise ValueError("batch must be nonempty")
    outs = []
    for _, chunk in _batched(images, batch_size):
        probs = np.asarray(backend.predict(prepare_batch(backend, chunk)), dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != len(chunk):
            raise BackendError(f"predict returned shape {probs.shape} for {len(chunk)} images")
        if probs.min() < -PROB_SUM_TOL:
            raise BackendError("predict returned negative probabilities")
        sums = probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise BackendError("probability vectors do not sum to 1")
        outs.append(probs)
    return np.concatenate(outs)


def get_features(
    backend: Backend, images: Sequence[np.ndarray], batch_size: int = DEFAULT_BATCH_SIZE
) -> np.ndarray:
    """Penultimate feature vectors, one per image, order-preserving."""
    _require(backend, "features")
    if len(images) == 0:
        raise ValueError("batch must be nonempty")
    outs = []
    dim = None
    for _, chunk in _batched(images, batch_size):
        feats = np.asarray(backend.features(prepare_batch(backend, chunk)), dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(chunk):
            raise BackendError(f"features returned shape {feats.shape} for {len(chunk)} images")
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise BackendError("feature dimension changed within a session")
        outs.append(feats)
    return np.concatenate(outs)


def normalize_saliency(raw: np.ndarray) -> np.ndarray:
    """Max-normalize a saliency map; an identically-zero map stays zero."""
    peak = float(raw.max()) if raw.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(raw, dtype=np.float64)
    return np.asarray(raw, dtype=np.float64) / peak


def _saliency(
    backend: Backend,
    images: Sequence[np.ndarray],
    kind: str,
    index: int,
    batch_size: int,
) -> list[np.ndarray]:
    _require(backend, "saliency")
    if len(images) == 0:
        raise ValueError("batch must be nonempty")
    maps: list[np.ndarray] = []
    for start, chunk in _batched(images, batch_size):
        raw = np.asarray(backend.saliency(prepare_batch(backend, chunk), kind, index))
        if raw.ndim != 3 or raw.shape[0] != len(chunk):
            raise BackendError(f"saliency returned shape {raw.shape} for {len(chunk)} images")
        for offset, m in enumerate(raw):
            h, w = images[start + offset].shape[:2]
            maps.append(normalize_saliency(resize_bilinear(np.maximum(m, 0.0), h, w)))
    return maps


def get_feature_saliency(
    backend: Backend,
    images: Sequence[np.ndarray],
    feature_index: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[np.ndarray]:
    """Max-normalized saliency of one penultimate feature, per image, at
    each image's own resolution."""
    dim = int(backend.descriptor().metadata.get("feature_dim", 0))
    if dim and not 0 <= feature_index < dim:
        raise IndexError(f"feature index {feature_index} out of range [0, {dim})")
    return _saliency(backend, images, "feature", feature_index, batch_size)


def get_class_saliency(
    backend: Backend,
    images: Sequence[np.ndarray],
    class_id: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[np.ndarray]:
    """Max-normalized saliency of one class logit, per image."""
    n_classes = int(backend.descriptor().metadata.get("n_classes", 0))
    if n_classes and not 0 <= class_id < n_classes:
        raise IndexError(f"class id {class_id} out of range [0, {n_classes})")
    return _saliency(backend, images, "class", class_id, batch_size)


def train_linear_head(backend: Backend, ds, hyper: TrainHyper) -> Backend:
    """Fit the backend's linear classification head on a dataset's train
    split; the feature extractor stays frozen.

    Returns the backend carrying the updated head (a new object for
    in-process backends, the same connection for remote ones).
    """
    _require(backend, "train_head")
    train = ds.train.samples
    if not train:
        raise ValueError("dataset has no training samples")
    classes = sorted({s.class_label for s in train})
    class_index = {c: i for i, c in enumerate(classes)}

    def batches():
        for start in range(0, len(train), hyper.batch_size):
            chunk = train[start : start + hyper.batch_size]
            images = prepare_batch(backend, [s.image for s in chunk])
            labels = np.array([class_index[s.class_label] for s in chunk], dtype=np.int64)
            yield images, labels

    return backend.train_head(batches(), hyper)


def probe_batch(input_size: int, seed: int = 0x5EED) -> np.ndarray:
    """Deterministic batch used to verify backend determinism on handshake."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(2, input_size, input_size, 3))


def verify_determinism(backend: Backend) -> None:
    """Predict a probe batch twice; identical outputs are required."""
    batch = probe_batch(backend.descriptor().input_size)
    if "predict" not in backend.capabilities():
        return
    first = backend.predict(batch)
    second = backend.predict(batch)
    if not np.array_equal(first, second):
        raise BackendError("backend violated the determinism contract on the probe batch")


from regionprobe.bridge.reference import (  # noqa: E402
    ReferenceBackend,
    ReferenceConfig,
    reference_backend,
)
from regionprobe.bridge.remote import RemoteBackend, open_backend  # noqa: E402

__all__ = [
    "Backend",
    "BackendDescriptor",
    "BackendError",
    "CapabilityError",
    "TrainHyper",
    "predict_probs",
    "get_features",
    "get_feature_saliency",
    "get_class_saliency",
    "train_linear_head",
    "normalize_saliency",
    "prepare_batch",
    "probe_batch",
    "verify_determinism",
    "ReferenceBackend",
    "ReferenceConfig",
    "reference_backend",
    "RemoteBackend",
    "open_backend",
]
