"""Linear-head training on frozen features.

Defaults follow the evaluation protocol: Adam with learning rate 1e-4, betas
(0.9, 0.999), weight decay 1e-5, ten epochs. Only the head's parameters are
optimized; the extractor never leaves eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from torchbridge.models import WrappedModel


@dataclass(frozen=True)
class HeadHyper:
    lr: float = 1e-4
    epochs: int = 10
    weight_decay: float = 1e-5
    seed: int = 0
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)


def train_head(
    model: WrappedModel,
    stream: Iterable[tuple[np.ndarray, np.ndarray]],
    hyper: HeadHyper = HeadHyper(),
) -> dict:
    """Fit the head on (images, labels) batches; returns training stats."""
    feats: list[torch.Tensor] = []
    labels: list[torch.Tensor] = []
    for images, y in stream:
        feats.append(torch.from_numpy(model.features(images)))
        labels.append(torch.from_numpy(np.asarray(y, dtype=np.int64)))
    if not feats:
        raise ValueError("empty training stream")
    x = torch.cat(feats).to(model.config.device)
    y = torch.cat(labels).to(model.config.device)

    torch.manual_seed(hyper.seed)
    optimizer = torch.optim.Adam(
        model.head.parameters(),
        lr=hyper.lr,
        betas=hyper.betas,
        weight_decay=hyper.weight_decay,
    )
    loss_fn = nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(hyper.seed)

    epochs_run = 0
    for _ in range(hyper.epochs):
        order = torch.randperm(x.shape[0], generator=generator)
        for start in range(0, x.shape[0], hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model.head(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
        epochs_run += 1

    with torch.no_grad():
        accuracy = float((model.head(x).argmax(dim=1) == y).float().mean())
    return {"train_accuracy": accuracy, "epochs": epochs_run, "n_samples": int(x.shape[0])}
