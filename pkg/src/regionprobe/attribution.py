"""Neural-node attribution: tie penultimate features to semantic attributes.

For each (class, attribute) pair, every feature is scored by the mean IOU
between its binarized saliency and the ground-truth attribute mask over its
top-k activating images; the best feature per attribute is then evaluated
on held-out samples carrying the same labels. A class-free variant scores
the whole pool without filtering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from regionprobe.bridge import Backend, get_feature_saliency, get_features
from regionprobe.dataset import WHOLE_OBJECT_ATTRIBUTES, Dataset, Sample
from regionprobe.saliency import binarize, iou

DEFAULT_TOP_K = 10
DEFAULT_TAU = 0.5
DEFAULT_IOU_VARIANT = "standard"


@dataclass(frozen=True)
class AttributionResult:
    """Held-out evaluation of one attributed feature."""

    class_id: str  # "all" for the class-free variant
    attribute_id: str
    feature_index: int
    train_mean_iou: float
    test_rows: tuple[tuple[str, float, float], ...]  # (sample_id, activation, iou)
    whole_object: bool = False

    @property
    def test_ious(self) -> tuple[float, ...]:
        return tuple(row[2] for row in self.test_rows)

    @property
    def test_mean_iou(self) -> float:
        return float(np.mean(self.test_ious)) if self.test_rows else 0.0

    @property
    def test_median_iou(self) -> float:
        return float(np.median(self.test_ious)) if self.test_rows else 0.0


@dataclass
class SelectionReport:
    """Best feature per (class-or-all, attribute), plus skipped attributes."""

    mapping: dict[tuple[str, str], tuple[int, float]] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)
    flagged_whole_object: list[tuple[str, str]] = field(default_factory=list)


def _pool(ds: Dataset, class_filter: str | None) -> list[Sample]:
    if class_filter is None:
        return list(ds.samples)
    return [s for s in ds.samples if s.class_label == class_filter]


def top_activating(
    backend: Backend,
    ds: Dataset,
    feature_index: int,
    k: int,
    class_filter: str | None = None,
    batch_size: int = 32,
) -> list[str]:
    """Ids of the k samples with the highest activation of one feature.

    Ties break lexicographically by sample id, so the result is independent
    of dataset ordering.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = _pool(ds, class_filter)
    if len(pool) < k:
        raise ValueError(f"pool of {len(pool)} samples is smaller than k={k}")
    feats = get_features(backend, [s.image for s in pool], batch_size=batch_size)
    acts = feats[:, feature_index]
    order = sorted(range(len(pool)), key=lambda i: (-acts[i], pool[i].id))
    return [pool[i].id for i in order[:k]]


def feature_attr_score(
    backend: Backend,
    ds: Dataset,
    sample_ids: Sequence[str],
    feature_index: int,
    attribute_id: str,
    tau: float = DEFAULT_TAU,
    iou_variant: str = DEFAULT_IOU_VARIANT,
    batch_size: int = 32,
) -> float:
    """Mean IOU of binarized feature saliency against the attribute masks."""
    samples = [ds.by_id(sid) for sid in sample_ids]
    for s in samples:
        if attribute_id not in s.attribute_masks:
            raise ValueError(f"sample {s.id!r} has no mask for attribute {attribute_id!r}")
    maps = get_feature_saliency(
        backend, [s.image for s in samples], feature_index, batch_size=batch_size
    )
    scores = [
        iou(binarize(m, tau), s.attribute_masks[attribute_id], iou_variant)
        for m, s in zip(maps, samples)
    ]
    return float(np.mean(scores))


def select_best_features(
    backend: Backend,
    ds_train: Dataset,
    class_filter: str | None = None,
    k: int = DEFAULT_TOP_K,
    tau: float = DEFAULT_TAU,
    iou_variant: str = DEFAULT_IOU_VARIANT,
    attributes: Sequence[str] | None = None,
    batch_size: int = 32,
) -> SelectionReport:
    """Score every feature against every attribute; keep the argmax feature.

    For each attribute, the candidate pool is the class pool restricted to
    positive samples (the score needs a ground-truth mask on every image).
    Attributes with fewer than k positives are skipped with a report entry.
    Ties resolve to the lower feature index. Whole-object attributes alias
    the object mask, so their scores degenerate to foreground alignment;
    they are scored but flagged.
    """
    class_key = class_filter if class_filter is not None else "all"
    feature_dim = int(backend.descriptor().metadata.get("feature_dim", 0))
    if feature_dim <= 0:
        raise ValueError("backend does not declare feature_dim metadata")

    pool = _pool(ds_train, class_filter)
    report = SelectionReport()
    attr_names = tuple(attributes) if attributes is not None else ds_train.attribute_names

    for attr in attr_names:
        positives = [s for s in pool if s.attributes.get(attr, 0) and attr in s.attribute_masks]
        if len(positives) < k:
            report.skipped.append(
                {
                    "class": class_key,
                    "attribute": attr,
                    "reason": f"{len(positives)} positive samples in pool (need {k})",
                }
            )
            continue
        sub = Dataset(samples=positives, attribute_names=ds_train.attribute_names)
        best: tuple[float, int] | None = None
        for f in range(feature_dim):
            ids = top_activating(backend, sub, f, k, batch_size=batch_size)
            score = feature_attr_score(
                backend, sub, ids, f, attr, tau, iou_variant, batch_size=batch_size
            )
            if best is None or score > best[0]:
                best = (score, f)
        report.mapping[(class_key, attr)] = (best[1], best[0])
        if attr in WHOLE_OBJECT_ATTRIBUTES:
            report.flagged_whole_object.append((class_key, attr))
    return report


def generalization_eval(
    backend: Backend,
    ds_test: Dataset,
    mapping: Mapping[tuple[str, str], tuple[int, float]],
    tau: float = DEFAULT_TAU,
    iou_variant: str = DEFAULT_IOU_VARIANT,
    batch_size: int = 32,
) -> list[AttributionResult]:
    """Per-sample IOUs of each selected feature on all matching test samples."""
    results = []
    for (class_key, attr), (feature_index, train_iou) in sorted(mapping.items()):
        pool = _pool(ds_test, None if class_key == "all" else class_key)
        matching = [s for s in pool if s.attributes.get(attr, 0) and attr in s.attribute_masks]
        if not matching:
            raise ValueError(f"no test samples with class {class_key!r} and attribute {attr!r}")
        images = [s.image for s in matching]
        feats = get_features(backend, images, batch_size=batch_size)
        maps = get_feature_saliency(backend, images, feature_index, batch_size=batch_size)
        rows = tuple(
            (
                s.id,
                float(feats[i, feature_index]),
                iou(binarize(maps[i], tau), s.attribute_masks[attr], iou_variant),
            )
            for i, s in enumerate(matching)
        )
        results.append(
            AttributionResult(
                class_id=class_key,
                attribute_id=attr,
                feature_index=feature_index,
                train_mean_iou=train_iou,
                test_rows=rows,
                whole_object=attr in WHOLE_OBJECT_ATTRIBUTES,
            )
        )
    return results


def roc_area(positive: np.ndarray, negative: np.ndarray) -> float:
    """Area under the ROC curve of a score separating two groups, computed
    from average ranks (ties shared)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both groups must be nonempty")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    starts = np.concatenate([[0], boundary + 1])
    ends = np.concatenate([boundary, [scores.size - 1]])
    for st, en in zip(starts, ends):
        ranks[order[st : en + 1]] = (st + en) / 2.0 + 1.0
    pos_rank_sum = ranks[: pos.size].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def activation_attribute_split(
    backend: Backend,
    ds_test: Dataset,
    feature_index: int,
    attribute_id: str,
    bins: int = 20,
    batch_size: int = 32,
) -> dict:
    """Histogram a feature's activations by attribute presence.

    Returns shared bin edges, per-group counts, and the ROC area of the
    activation as an attribute detector.
    """
    acts = get_features(backend, [s.image for s in ds_test.samples], batch_size=batch_size)[
        :, feature_index
    ]
    present = np.array([bool(s.attributes.get(attribute_id, 0)) for s in ds_test.samples])
    pos, neg = acts[present], acts[~present]
    if pos.size == 0 or neg.size == 0:
        raise ValueError(
            f"attribute {attribute_id!r} needs both positive and negative test samples"
        )
    lo, hi = float(acts.min()), float(acts.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    pos_counts, _ = np.histogram(pos, bins=edges)
    neg_counts, _ = np.histogram(neg, bins=edges)
    return {
        "edges": [float(e) for e in edges],
        "positive_counts": [int(c) for c in pos_counts],
        "negative_counts": [int(c) for c in neg_counts],
        "roc_area": roc_area(pos, neg),
    }


def write_attribution_report(
    results: Sequence[AttributionResult],
    path: str | Path,
    splits: Mapping[tuple[str, str], dict] | None = None,
    hist_bins: int = 20,
) -> None:
    """JSON report with per-pair IOU histograms and optional activation splits."""
    pairs = []
    for res in results:
        ious = np.asarray(res.test_ious)
        counts, edges = np.histogram(ious, bins=hist_bins, range=(0.0, 1.0))
        entry = {
            "class": res.class_id,
            "attribute": res.attribute_id,
            "feature": res.feature_index,
            "train_iou": res.train_mean_iou,
            "test_iou_mean": res.test_mean_iou,
            "test_iou_median": res.test_median_iou,
            "test_iou_hist": {
                "edges": [float(e) for e in edges],
                "counts": [int(c) for c in counts],
            },
            "whole_object": res.whole_object,
        }
        if splits and (res.class_id, res.attribute_id) in splits:
            entry["roc_area"] = splits[(res.class_id, res.attribute_id)]["roc_area"]
        pairs.append(entry)
    Path(path).write_text(
        json.dumps({"pairs": pairs}, indent=2, sort_keys=True), encoding="utf-8"
    )


def write_pair_csv(result: AttributionResult, path: str | Path) -> None:
    """(sample_id, activation, iou) rows for one pair's scatter plot."""
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "activation", "iou"])
        for sid, act, score in result.test_rows:
            writer.writerow([sid, repr(act), repr(score)])
