"""Saliency-map alignment against ground-truth masks.

All metrics take a max-normalized saliency map s in [0,1] and a binary mask
m of the same shape. Two IOU variants are exposed: the standard
intersection-over-union, and a sum-denominator variant I/(|a|+|b|) whose
range tops out at 0.5 for identical masks. Delta densities likewise comes
in difference and ratio forms. Degenerate inputs (empty mask, zero
saliency) score 0 and are flagged so aggregates can exclude them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from regionprobe.bridge import Backend, get_class_saliency, get_feature_saliency
from regionprobe.dataset import Dataset

DEFAULT_TAU = 0.5
DEFAULT_MASS_FRACTION = 0.75

METRIC_NAMES = (
    "iou_standard",
    "iou_paper_formula",
    "delta_density_diff",
    "delta_density_ratio",
    "average_precision",
    "saliency_precision",
    "saliency_recall",
)


def binarize(s: np.ndarray, tau: float) -> np.ndarray:
    """Pixels with saliency at least tau become 1."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return (np.asarray(s) >= tau).astype(np.float64)


def iou(a: np.ndarray, b: np.ndarray, variant: str = "standard") -> float:
    """Mask overlap. standard: I/(|a|+|b|-I); paper_formula: I/(|a|+|b|).

    Both return 0 when both masks are empty.
    """
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float((a * b).sum())
    sa, sb = float(a.sum()), float(b.sum())
    if sa + sb == 0.0:
        return 0.0
    if variant == "standard":
        return inter / (sa + sb - inter)
    if variant == "paper_formula":
        return inter / (sa + sb)
    raise ValueError(f"unknown iou variant {variant!r}")


def delta_densities(s: np.ndarray, m: np.ndarray, variant: str = "difference") -> float:
    """Compare mean saliency inside vs outside the mask.

    difference: mean(s on m) - mean(s off m), with an empty side
    contributing mean 0. ratio: mean-in over mean-out, math.inf when the
    outside mean is 0; both sides must be nonempty.
    """
    if s.shape != m.shape:
        raise ValueError(f"shapes differ: {s.shape} vs {m.shape}")
    inside = float(m.sum())
    outside = float((1.0 - m).sum())
    mean_in = float((s * m).sum() / inside) if inside > 0 else 0.0
    mean_out = float((s * (1.0 - m)).sum() / outside) if outside > 0 else 0.0
    if variant == "difference":
        return mean_in - mean_out
    if variant == "ratio":
        if inside == 0 or outside == 0:
            raise ValueError("ratio needs a nonempty mask and a nonempty complement")
        if mean_out == 0.0:
            return math.inf
        return mean_in / mean_out
    raise ValueError(f"unknown delta_densities variant {variant!r}")


def average_precision(s: np.ndarray, m: np.ndarray) -> float:
    """AP of pixel saliency as a foreground detector.

    Thresholds are the distinct saliency values in descending order; at each
    one, pixels with s >= threshold are predicted positive. AP sums
    precision weighted by recall increments.
    """
    if s.shape != m.shape:
        raise ValueError(f"shapes differ: {s.shape} vs {m.shape}")
    positives = float(m.sum())
    if positives == 0:
        raise ValueError("mask is empty")
    flat_s = np.asarray(s, dtype=np.float64).ravel()
    flat_m = np.asarray(m, dtype=np.float64).ravel()

    order = np.argsort(-flat_s, kind="stable")
    sorted_s = flat_s[order]
    sorted_m = flat_m[order]
    tp = np.cumsum(sorted_m)
    predicted = np.arange(1, flat_s.size + 1, dtype=np.float64)
    # Last index of each run of equal values = the full s >= v prediction set.
    boundary = np.nonzero(np.diff(sorted_s))[0]
    last = np.concatenate([boundary, [flat_s.size - 1]])

    precision = tp[last] / predicted[last]
    recall = tp[last] / positives
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def saliency_precision(s: np.ndarray, m: np.ndarray) -> float:
    """Fraction of total saliency mass inside the mask; 0 when s is all zero."""
    if s.shape != m.shape:
        raise ValueError(f"shapes differ: {s.shape} vs {m.shape}")
    total = float(s.sum())
    if total == 0.0:
        return 0.0
    return float((s * m).sum() / total)


def mass_threshold(s: np.ndarray, mass_fraction: float) -> float:
    """Largest threshold t such that pixels with s >= t hold at least
    mass_fraction of the total saliency mass."""
    flat = np.sort(np.asarray(s, dtype=np.float64).ravel())[::-1]
    total = float(flat.sum())
    if total <= 0.0:
        raise ValueError("saliency map is identically zero")
    cum = np.cumsum(flat)
    # Ties: s >= v includes the whole run of pixels equal to v, so the mass
    # achieved at a value is the cumsum at the run's last index.
    boundary = np.nonzero(np.diff(flat))[0]
    last = np.concatenate([boundary, [flat.size - 1]])
    masses = cum[last]
    values = flat[last]
    hits = np.nonzero(masses >= mass_fraction * total - 1e-12)[0]
    return float(values[hits[0]])


def saliency_recall(
    s: np.ndarray, m: np.ndarray, mass_fraction: float = DEFAULT_MASS_FRACTION
) -> float:
    """Fraction of the mask covered by the most-salient pixels holding
    mass_fraction of total saliency."""
    if s.shape != m.shape:
        raise ValueError(f"shapes differ: {s.shape} vs {m.shape}")
    if float(m.sum()) == 0:
        raise ValueError("mask is empty")
    tau_star = mass_threshold(s, mass_fraction)
    selected = (np.asarray(s) >= tau_star).astype(np.float64)
    return float((selected * m).sum() / m.sum())


# --------------------------------------------------------------------------
# Per-sample scoring
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentScores:
    """All alignment metrics for one (saliency map, mask) pair.

    `degenerate` names the metrics that returned the 0 convention because
    the inputs were empty or all-zero.
    """

    iou_standard: float
    iou_paper_formula: float
    delta_density_diff: float
    delta_density_ratio: float
    average_precision: float
    saliency_precision: float
    saliency_recall: float
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def score_pair(s: np.ndarray, m: np.ndarray, tau: float = DEFAULT_TAU) -> AlignmentScores:
    """Compute every alignment metric with degenerate-input conventions."""
    degenerate: list[str] = []
    s_tau = binarize(s, tau)
    mask_empty = float(m.sum()) == 0
    comp_empty = float((1.0 - m).sum()) == 0
    zero_saliency = float(s.sum()) == 0.0

    iou_std = iou(s_tau, m, "standard")
    iou_paper = iou(s_tau, m, "paper_formula")
    if mask_empty or zero_saliency:
        degenerate += ["iou_standard", "iou_paper_formula"]

    dd_diff = delta_densities(s, m, "difference")
    if mask_empty or comp_empty:
        dd_ratio = 0.0
        degenerate.append("delta_density_ratio")
    else:
        dd_ratio = delta_densities(s, m, "ratio")

    if mask_empty or zero_saliency:
        ap = 0.0
        recall = 0.0
        degenerate += ["average_precision", "saliency_recall"]
    else:
        ap = average_precision(s, m)
        recall = saliency_recall(s, m)

    precision = saliency_precision(s, m)
    if zero_saliency:
        degenerate.append("saliency_precision")

    return AlignmentScores(
        iou_standard=iou_std,
        iou_paper_formula=iou_paper,
        delta_density_diff=dd_diff,
        delta_density_ratio=dd_ratio,
        average_precision=ap,
        saliency_precision=precision,
        saliency_recall=recall,
        degenerate=tuple(dict.fromkeys(degenerate)),
    )


def score_alignment(
    backend: Backend,
    ds: Dataset,
    target: str | tuple[str, int] = "true_class",
    tau: float = DEFAULT_TAU,
    class_to_index: dict[str, int] | None = None,
    batch_size: int = 32,
) -> list[tuple[str, AlignmentScores]]:
    """Alignment of backend saliency with each sample's object mask.

    target: "true_class" scores each sample against its own class logit;
    ("class", k) or ("feature", d) fixes the saliency target.
    """
    if class_to_index is None:
        classes = sorted({s.class_label for s in ds.samples})
        class_to_index = {c: i for i, c in enumerate(classes)}

    samples = ds.samples
    images = [s.image for s in samples]
    if target == "true_class":
        maps: list[np.ndarray] = [None] * len(samples)  # type: ignore[list-item]
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            by_class.setdefault(class_to_index[s.class_label], []).append(i)
        for class_id in sorted(by_class):
            idxs = by_class[class_id]
            got = get_class_saliency(
                backend, [images[i] for i in idxs], class_id, batch_size=batch_size
            )
            for i, m in zip(idxs, got):
                maps[i] = m
    elif isinstance(target, tuple) and target[0] == "class":
        maps = get_class_saliency(backend, images, int(target[1]), batch_size=batch_size)
    elif isinstance(target, tuple) and target[0] == "feature":
        maps = get_feature_saliency(backend, images, int(target[1]), batch_size=batch_size)
    else:
        raise ValueError(f"unknown saliency target {target!r}")

    return [(s.id, score_pair(m, s.object_mask, tau)) for s, m in zip(samples, maps)]


def rank_misaligned(
    scores: Sequence[tuple[str, AlignmentScores]], metric: str, k: int
) -> list[str]:
    """Worst-k sample ids by a metric, ascending, ties broken by sample id."""
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}")
    if k > len(scores):
        raise ValueError(f"k={k} exceeds {len(scores)} scored samples")
    ordered = sorted(scores, key=lambda item: (getattr(item[1], metric), item[0]))
    return [sid for sid, _ in ordered[:k]]


def write_alignment_csv(scores: Sequence[tuple[str, AlignmentScores]], path: str | Path) -> None:
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *METRIC_NAMES, "degenerate"])
        for sid, sc in scores:
            row = [sid]
            for name in METRIC_NAMES:
                value = getattr(sc, name)
                row.append("inf" if value == math.inf else repr(float(value)))
            row.append("|".join(sc.degenerate))
            writer.writerow(row)


def write_misaligned_report(
    scores: Sequence[tuple[str, AlignmentScores]],
    metric: str,
    k: int,
    path: str | Path,
) -> None:
    ranked = rank_misaligned(scores, metric, k)
    table = {sid: sc for sid, sc in scores}
    payload = {
        "metric": metric,
        "k": k,
        "worst": [
            {
                "sample_id": sid,
                "value": None if table[sid].as_dict()[metric] == math.inf
                else table[sid].as_dict()[metric],
            }
            for sid in ranked
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
