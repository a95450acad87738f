"""Built-in analytically-differentiable reference backend.

A two-stage classifier small enough to run anywhere: images are
average-pooled over a grid of square cells, the pooled cells pass through
one linear map with a tanh nonlinearity to give the feature vector, and a
linear head produces class logits. Every gradient is computed in closed
form, which makes the saliency analog exact and lets tests check it against
finite differences. The saliency analog weights each pooled cell's
activation by the gradient of the target at that cell, rectifies, and
upsamples to input resolution.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from regionprobe.bridge import BackendDescriptor, TrainHyper
from regionprobe.imageops import resize_bilinear


@dataclass(frozen=True)
class ReferenceConfig:
    image_size: int = 64
    n_classes: int = 4
    feature_dim: int = 32
    pooling_cell: int = 8

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.image_size % self.pooling_cell != 0:
            raise ValueError("image_size must be a multiple of pooling_cell")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.feature_dim < self.n_classes:
            raise ValueError("feature_dim must be >= n_classes")

    @property
    def grid(self) -> int:
        return self.image_size // self.pooling_cell

    @property
    def pooled_dim(self) -> int:
        return self.grid * self.grid * 3


class ReferenceBackend:
    """In-process deterministic backend with analytic gradients."""

    def __init__(self, config: ReferenceConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        p = config.pooled_dim
        d = config.feature_dim
        k = config.n_classes
        # Small weights keep tanh in its near-linear regime.
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(p), size=(d, p))
        self.b1 = np.zeros(d)
        self.w2 = rng.normal(0.0, 0.1 / np.sqrt(d), size=(k, d))
        self.b2 = np.zeros(k)

    # -- bridge interface ---------------------------------------------------

    def descriptor(self) -> BackendDescriptor:
        c = self.config
        params = self.w1.size + self.b1.size + self.w2.size + self.b2.size
        return BackendDescriptor(
            name=f"reference-{c.image_size}x{c.image_size}-d{c.feature_dim}",
            family="reference",
            parameter_count=int(params),
            input_size=c.image_size,
            metadata={
                "feature_dim": c.feature_dim,
                "n_classes": c.n_classes,
                "pooling_cell": c.pooling_cell,
                "seed": self.seed,
            },
        )

    def capabilities(self) -> frozenset:
        return frozenset({"predict", "features", "saliency", "train_head"})

    def predict(self, images: np.ndarray) -> np.ndarray:
        logits = self._logits(self._features(self._pool(images)))
        return _softmax(logits)

    def features(self, images: np.ndarray) -> np.ndarray:
        return self._features(self._pool(images))

    def saliency(self, images: np.ndarray, kind: str, index: int) -> np.ndarray:
        """Rectified gradient-weighted pooled activations, upsampled.

        map[i, j] = relu(sum_ch d(target)/d(cell[i, j, ch]) * cell[i, j, ch])
        """
        images = np.asarray(images, dtype=np.float64)
        cells = self._pool_cells(images)  # (B, G, G, 3)
        b = images.shape[0]
        g = self.config.grid
        pooled = cells.reshape(b, -1)
        grad = self._pooled_gradient_batch(pooled, kind, index)  # (B, P)
        weighted = (grad * pooled).reshape(b, g, g, 3).sum(axis=3)
        rect = np.maximum(weighted, 0.0)
        size = self.config.image_size
        return np.stack([resize_bilinear(m, size, size) for m in rect])

    def train_head(
        self, batches: Iterable[tuple[np.ndarray, np.ndarray]], hyper: TrainHyper
    ) -> "ReferenceBackend":
        """Adam on the linear head only; returns a new backend instance.

        The feature extractor (pooling plus the tanh layer) is untouched, so
        features before and after training are bit-identical.
        """
        # Materialize features once; the extractor is frozen anyway.
        feats: list[np.ndarray] = []
        labels: list[np.ndarray] = []
        for images, y in batches:
            feats.append(self.features(np.asarray(images, dtype=np.float64)))
            labels.append(np.asarray(y, dtype=np.int64))
        if not feats:
            raise ValueError("empty training stream")
        x = np.concatenate(feats)
        y = np.concatenate(labels)

        trained = copy.deepcopy(self)
        trained.w2, trained.b2 = _adam_softmax_head(
            x, y, self.config.n_classes, self.w2, self.b2, hyper
        )
        return trained

    # -- analytic internals ---------------------------------------------------

    def _pool_cells(self, images: np.ndarray) -> np.ndarray:
        b = images.shape[0]
        g, c = self.config.grid, self.config.pooling_cell
        return images.reshape(b, g, c, g, c, 3).mean(axis=(2, 4))

    def _pool(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (
            self.config.image_size,
            self.config.image_size,
            3,
        ):
            raise ValueError(
                f"expected batch of shape (B, {self.config.image_size}, "
                f"{self.config.image_size}, 3), got {images.shape}"
            )
        return self._pool_cells(images).reshape(images.shape[0], -1)

    def _features(self, pooled: np.ndarray) -> np.ndarray:
        return np.tanh(pooled @ self.w1.T + self.b1)

    def _logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.w2.T + self.b2

    def _pooled_gradient_batch(self, pooled: np.ndarray, kind: str, index: int) -> np.ndarray:
        """d(target)/d(pooled cells) for each batch element."""
        z = self._features(pooled)
        sech2 = 1.0 - z * z  # tanh'
        if kind == "feature":
            if not 0 <= index < self.config.feature_dim:
                raise IndexError(f"feature index {index} out of range")
            return sech2[:, index : index + 1] * self.w1[index][None, :]
        if kind == "class":
            if not 0 <= index < self.config.n_classes:
                raise IndexError(f"class id {index} out of range")
            return (sech2 * self.w2[index][None, :]) @ self.w1
        raise ValueError(f"unknown saliency kind {kind!r}")

    def target_value(self, image: np.ndarray, kind: str, index: int) -> float:
        """Scalar the saliency gradients differentiate: a feature activation
        or a class logit."""
        pooled = self._pool(image[None])
        if kind == "feature":
            return float(self._features(pooled)[0, index])
        if kind == "class":
            return float(self._logits(self._features(pooled))[0, index])
        raise ValueError(f"unknown target kind {kind!r}")

    def input_gradient(self, image: np.ndarray, kind: str, index: int) -> np.ndarray:
        """d(target)/d(pixel), distributing each cell gradient uniformly
        over the pixels it pools."""
        pooled = self._pool(image[None])
        g_cells = self._pooled_gradient_batch(pooled, kind, index)[0].reshape(
            self.config.grid, self.config.grid, 3
        )
        c = self.config.pooling_cell
        per_pixel = g_cells / (c * c)
        return np.repeat(np.repeat(per_pixel, c, axis=0), c, axis=1)

    # -- diagnostics ----------------------------------------------------------

    def wire_feature(
        self, index: int, cell_weights: np.ndarray, bias: float = 0.0
    ) -> "ReferenceBackend":
        """Return a copy with feature `index` tied to an explicit (G, G, 3)
        pooled-cell weight pattern. Used to plant region-specific features."""
        g = self.config.grid
        if cell_weights.shape != (g, g, 3):
            raise ValueError(f"cell_weights must have shape ({g}, {g}, 3)")
        wired = copy.deepcopy(self)
        wired.w1[index] = cell_weights.reshape(-1)
        wired.b1[index] = bias
        return wired


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _adam_softmax_head(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    w0: np.ndarray,
    b0: np.ndarray,
    hyper: TrainHyper,
) -> tuple[np.ndarray, np.ndarray]:
    """Adam on softmax cross-entropy over a fixed design matrix."""
    rng = np.random.default_rng(hyper.seed)
    w = w0.copy()
    b = b0.copy()
    beta1, beta2 = hyper.betas
    eps = 1e-8
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)
    onehot = np.eye(n_classes)
    n = x.shape[0]
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xb, yb = x[idx], y[idx]
            probs = _softmax(xb @ w.T + b)
            err = (probs - onehot[yb]) / len(idx)
            gw = err.T @ xb + hyper.weight_decay * w
            gb = err.sum(axis=0) + hyper.weight_decay * b
            step += 1
            m_w = beta1 * m_w + (1 - beta1) * gw
            v_w = beta2 * v_w + (1 - beta2) * gw * gw
            m_b = beta1 * m_b + (1 - beta1) * gb
            v_b = beta2 * v_b + (1 - beta2) * gb * gb
            mw_hat = m_w / (1 - beta1**step)
            vw_hat = v_w / (1 - beta2**step)
            mb_hat = m_b / (1 - beta1**step)
            vb_hat = v_b / (1 - beta2**step)
            w -= hyper.lr * mw_hat / (np.sqrt(vw_hat) + eps)
            b -= hyper.lr * mb_hat / (np.sqrt(vb_hat) + eps)
    return w, b


def reference_backend(config: ReferenceConfig | None = None, seed: int = 0) -> ReferenceBackend:
    """Construct the built-in backend; fully deterministic for a fixed seed."""
    return ReferenceBackend(config or ReferenceConfig(), seed)
