"""Relative foreground sensitivity metrics and the noise-sweep orchestrator.

rfs normalizes the accuracy gap between background-corrupted and
foreground-corrupted inputs by the largest gap attainable at the model's
general noise robustness, giving a [-1, 1] score where positive means the
model leans on the foreground. irfs is the per-instance analog computed
from true-class probabilities.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from regionprobe.bridge import Backend, TrainHyper, predict_probs, train_linear_head
from regionprobe.corruption import (
    NoiseSpec,
    apply_region_noise,
    gaussian_noise,
    gray_ablate,
    l2_normalize_noise,
    trial_seed,
)
from regionprobe.dataset import Dataset, Sample


def rfs(a_fg: float, a_bg: float) -> float:
    """Relative foreground sensitivity from region accuracies.

    (a_bg - a_fg) / (2 * min(mean, 1 - mean)); 0 by convention when the mean
    accuracy is exactly 0 or 1 (the gap is necessarily 0 there).
    """
    if not (0.0 <= a_fg <= 1.0 and 0.0 <= a_bg <= 1.0):
        raise ValueError("accuracies must lie in [0, 1]")
    mean = (a_fg + a_bg) / 2.0
    denom = 2.0 * min(mean, 1.0 - mean)
    if denom == 0.0:
        return 0.0
    # The true value lies in [-1, 1]; clamp the ulp-level float leakage.
    return max(-1.0, min(1.0, (a_bg - a_fg) / denom))


def irfs(p_fg: float, p_bg: float) -> float:
    """Instance-wise sensitivity from true-class probabilities."""
    return rfs(p_fg, p_bg)


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    """One corrupted-image model response."""

    sample_id: str
    region: str
    kind: str
    level_index: int
    trial: int
    probs: tuple[float, ...]
    correct: bool
    model: str | None = None

    def key(self) -> tuple[str, str, int, int]:
        return (self.sample_id, self.region, self.level_index, self.trial)

    def to_json(self) -> str:
        rec = {
            "sample_id": self.sample_id,
            "region": self.region,
            "kind": self.kind,
            "level_index": self.level_index,
            "trial": self.trial,
            "probs": list(self.probs),
            "correct": self.correct,
        }
        if self.model is not None:
            rec["model"] = self.model
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "TrialRecord":
        rec = json.loads(line)
        return TrialRecord(
            sample_id=rec["sample_id"],
            region=rec["region"],
            kind=rec["kind"],
            level_index=int(rec["level_index"]),
            trial=int(rec["trial"]),
            probs=tuple(float(p) for p in rec["probs"]),
            correct=bool(rec["correct"]),
            model=rec.get("model"),
        )


@dataclass(frozen=True)
class SensitivityRecord:
    """Aggregated region accuracies and rfs for one group."""

    group_key: tuple[tuple[str, str], ...]
    a_fg: float | None
    a_bg: float | None
    mean: float | None
    rfs: float | None
    n_trials: int
    rfs_per_level_mean: float | None = None

    def key_string(self) -> str:
        if not self.group_key:
            return "all"
        return ";".join(f"{k}={v}" for k, v in self.group_key)


@dataclass(frozen=True)
class InstanceSensitivity:
    sample_id: str
    p_fg: float
    p_bg: float
    p_mean: float
    irfs: float


# --------------------------------------------------------------------------
# Sweep orchestration
# --------------------------------------------------------------------------


def default_class_index(ds: Dataset) -> dict[str, int]:
    classes = sorted({s.class_label for s in ds.samples})
    return {c: i for i, c in enumerate(classes)}


def _sample_records(
    sample: Sample,
    backend: Backend,
    spec: NoiseSpec,
    label_index: int,
    model_name: str | None,
    batch_size: int,
    skip: set | None = None,
) -> list[TrialRecord]:
    """All records for one sample in canonical (level, trial, region) order.

    One noise tensor is drawn per (level, trial) and shared by every region,
    so foreground and background applications form a paired comparison.
    """
    images: list[np.ndarray] = []
    metas: list[tuple[str, int, int]] = []
    x, m = sample.image, sample.object_mask
    for level_index, level in enumerate(spec.levels):
        for trial in range(spec.trials):
            pending = [
                r
                for r in spec.regions
                if skip is None or (sample.id, r, level_index, trial) not in skip
            ]
            if not pending:
                continue
            seed = trial_seed(spec.base_seed, sample.id, level_index, trial)
            if spec.kind == "linf_gaussian":
                noise = gaussian_noise(x.shape, level, seed)
                per_region = {r: noise for r in pending}
            else:
                raw = gaussian_noise(x.shape, 1.0, seed)
                per_region = {r: l2_normalize_noise(raw, m, r, level) for r in pending}
            for region in pending:
                images.append(apply_region_noise(x, m, per_region[region], region))
                metas.append((region, level_index, trial))

    if not images:
        return []
    probs = predict_probs(backend, images, batch_size=batch_size)
    records = []
    for (region, level_index, trial), p in zip(metas, probs):
        records.append(
            TrialRecord(
                sample_id=sample.id,
                region=region,
                kind=spec.kind,
                level_index=level_index,
                trial=trial,
                probs=tuple(float(v) for v in p),
                correct=bool(int(p.argmax()) == label_index),
                model=model_name,
            )
        )
    return records


def iter_sweep_records(
    ds: Dataset,
    backend: Backend,
    spec: NoiseSpec,
    class_to_index: Mapping[str, int] | None = None,
    batch_size: int = 32,
    workers: int = 1,
    skip: set | None = None,
    model_name: str | None = None,
) -> Iterable[list[TrialRecord]]:
    """Yield each sample's records in dataset order.

    Record content is a pure function of (spec.base_seed, sample, level,
    trial), so the stream is identical for any worker count; with several
    workers, completed samples are re-emitted in canonical order.
    """
    if class_to_index is None:
        class_to_index = default_class_index(ds)
    if model_name is None:
        model_name = backend.descriptor().name

    def work(sample: Sample) -> list[TrialRecord]:
        return _sample_records(
            sample, backend, spec, class_to_index[sample.class_label], model_name,
            batch_size, skip,
        )

    if workers <= 1:
        for sample in ds.samples:
            yield work(sample)
        return

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(work, s) for s in ds.samples]
        for fut in futures:  # canonical order, not completion order
            yield fut.result()


def noise_sweep(
    ds: Dataset,
    backend: Backend,
    spec: NoiseSpec,
    class_to_index: Mapping[str, int] | None = None,
    batch_size: int = 32,
    workers: int = 1,
) -> list[TrialRecord]:
    """Run the sweep in memory: one record per (sample, region, level, trial)."""
    out: list[TrialRecord] = []
    for records in iter_sweep_records(
        ds, backend, spec, class_to_index, batch_size, workers
    ):
        out.extend(records)
    return out


def expected_record_count(n_samples: int, spec: NoiseSpec) -> int:
    return n_samples * len(spec.regions) * len(spec.levels) * spec.trials


class CheckpointError(RuntimeError):
    pass


def _truncate_partial_line(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        keep = data.rfind(b"\n") + 1
        with path.open("wb") as fh:
            fh.write(data[:keep])


def sweep_to_file(
    path: str | Path,
    ds: Dataset,
    backend: Backend,
    spec: NoiseSpec,
    class_to_index: Mapping[str, int] | None = None,
    batch_size: int = 32,
    workers: int = 1,
    limit: int | None = None,
) -> int:
    """Stream sweep records to a JSONL checkpoint, resuming if it exists.

    Records are written in canonical (sample, level, trial, region) order,
    so an interrupted file is a prefix of the full stream and resuming
    appends the remainder, yielding bytes identical to an uninterrupted run.
    A trailing partial line from a hard interrupt is truncated first.
    `limit` stops after that many records have been written in total (used
    to exercise resumption and for smoke runs). Returns the total record
    count now in the file.
    """
    path = Path(path)
    done: set = set()
    if path.exists():
        _truncate_partial_line(path)
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    done.add(TrialRecord.from_json(line).key())

    count = len(done)
    with path.open("a", encoding="utf-8") as fh:
        for records in iter_sweep_records(
            ds, backend, spec, class_to_index, batch_size, workers, skip=done or None
        ):
            for rec in records:
                fh.write(rec.to_json() + "\n")
                count += 1
                if limit is not None and count >= limit:
                    return count
    expected = expected_record_count(len(ds.samples), spec)
    if limit is None and count != expected:
        raise CheckpointError(
            f"checkpoint holds {count} records but the sweep defines {expected}; "
            "the file does not belong to this configuration"
        )
    return count


def load_records(path: str | Path) -> list[TrialRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrialRecord.from_json(line))
    return out


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------

GROUP_DIMS = ("model", "class", "level")


def _group_key(
    rec: TrialRecord, group_by: Sequence[str], class_labels: Mapping[str, str] | None
) -> tuple[tuple[str, str], ...]:
    parts = []
    for dim in GROUP_DIMS:
        if dim not in group_by:
            continue
        if dim == "model":
            parts.append(("model", rec.model or "unknown"))
        elif dim == "class":
            if class_labels is None:
                raise ValueError("grouping by class requires class_labels")
            parts.append(("class", class_labels[rec.sample_id]))
        elif dim == "level":
            parts.append(("level", str(rec.level_index)))
    return tuple(parts)


def _accuracy(records: list[TrialRecord]) -> float | None:
    if not records:
        return None
    return sum(1 for r in records if r.correct) / len(records)


def aggregate(
    records: Sequence[TrialRecord],
    group_by: Sequence[str] = (),
    class_labels: Mapping[str, str] | None = None,
) -> list[SensitivityRecord]:
    """Group records and compute (a_fg, a_bg, rfs) per group.

    Accuracies are exact counts, so the result is invariant to record order
    and to how the sweep was parallelized. Groups missing one region are
    reported with rfs omitted. When not grouping by level, the mean of
    per-level rfs values is also reported alongside the default
    accuracies-first rfs.
    """
    if not records:
        raise ValueError("no records to aggregate")
    for dim in group_by:
        if dim not in GROUP_DIMS:
            raise ValueError(f"unknown group dimension {dim!r}")

    groups: dict[tuple, list[TrialRecord]] = {}
    for rec in records:
        if rec.region not in ("foreground", "background"):
            continue
        groups.setdefault(_group_key(rec, group_by, class_labels), []).append(rec)

    out: list[SensitivityRecord] = []
    for key in sorted(groups):
        recs = groups[key]
        fg = [r for r in recs if r.region == "foreground"]
        bg = [r for r in recs if r.region == "background"]
        a_fg, a_bg = _accuracy(fg), _accuracy(bg)
        if a_fg is None or a_bg is None:
            out.append(
                SensitivityRecord(
                    group_key=key, a_fg=a_fg, a_bg=a_bg, mean=None, rfs=None, n_trials=len(recs)
                )
            )
            continue
        per_level_mean = None
        if "level" not in group_by:
            level_vals = []
            for level in sorted({r.level_index for r in recs}):
                lf = _accuracy([r for r in fg if r.level_index == level])
                lb = _accuracy([r for r in bg if r.level_index == level])
                if lf is not None and lb is not None:
                    level_vals.append(rfs(lf, lb))
            if level_vals:
                per_level_mean = float(np.mean(level_vals))
        out.append(
            SensitivityRecord(
                group_key=key,
                a_fg=a_fg,
                a_bg=a_bg,
                mean=(a_fg + a_bg) / 2.0,
                rfs=rfs(a_fg, a_bg),
                n_trials=len(recs),
                rfs_per_level_mean=per_level_mean,
            )
        )
    return out


def instance_sensitivity(
    records: Sequence[TrialRecord], true_labels: Mapping[str, int]
) -> list[InstanceSensitivity]:
    """Per-sample irfs from trial-averaged true-class probabilities.

    Probabilities are averaged over trials (and levels) before the ratio,
    which stabilizes the normalization.
    """
    by_sample: dict[str, dict[str, list[float]]] = {}
    for rec in records:
        if rec.region not in ("foreground", "background"):
            continue
        label = true_labels[rec.sample_id]
        by_sample.setdefault(rec.sample_id, {}).setdefault(rec.region, []).append(
            rec.probs[label]
        )

    out = []
    for sid in sorted(by_sample):
        regions = by_sample[sid]
        if "foreground" not in regions or "background" not in regions:
            missing = {"foreground", "background"} - set(regions)
            raise ValueError(f"sample {sid!r} is missing region(s): {sorted(missing)}")
        p_fg = float(np.mean(regions["foreground"]))
        p_bg = float(np.mean(regions["background"]))
        out.append(
            InstanceSensitivity(
                sample_id=sid,
                p_fg=p_fg,
                p_bg=p_bg,
                p_mean=(p_fg + p_bg) / 2.0,
                irfs=irfs(p_fg, p_bg),
            )
        )
    return out


# --------------------------------------------------------------------------
# Background-removal evaluation
# --------------------------------------------------------------------------


def evaluate_accuracy(
    backend: Backend,
    samples: Sequence[Sample],
    class_to_index: Mapping[str, int],
    transform: Callable[[Sample], np.ndarray] | None = None,
    batch_size: int = 32,
) -> float:
    if not samples:
        raise ValueError("no samples to evaluate")
    images = [transform(s) if transform else s.image for s in samples]
    probs = predict_probs(backend, images, batch_size=batch_size)
    labels = np.array([class_to_index[s.class_label] for s in samples])
    return float((probs.argmax(axis=1) == labels).mean())


def background_removal_eval(
    ds: Dataset,
    backend: Backend,
    finetune: bool = False,
    hyper: TrainHyper | None = None,
    batch_size: int = 32,
) -> dict[str, float]:
    """Accuracy with backgrounds grayed out, next to clean accuracy.

    With finetune=True the linear head is additionally trained on
    background-ablated training images (continuing from the current head,
    extractor frozen) and re-evaluated on ablated test images.
    """
    class_to_index = default_class_index(ds)
    test = ds.test.samples

    def ablate(s: Sample) -> np.ndarray:
        return gray_ablate(s.image, s.object_mask, "background")

    result = {
        "clean_acc": evaluate_accuracy(backend, test, class_to_index, batch_size=batch_size),
        "ablated_acc": evaluate_accuracy(
            backend, test, class_to_index, transform=ablate, batch_size=batch_size
        ),
    }
    if finetune:
        ablated_train = Dataset(
            samples=[
                Sample(
                    id=s.id,
                    split=s.split,
                    class_label=s.class_label,
                    image=ablate(s),
                    object_mask=s.object_mask,
                    attributes=s.attributes,
                    attribute_masks=s.attribute_masks,
                )
                for s in ds.samples
            ],
            attribute_names=ds.attribute_names,
        )
        tuned = train_linear_head(backend, ablated_train, hyper or TrainHyper())
        result["finetuned_ablated_acc"] = evaluate_accuracy(
            tuned, test, class_to_index, transform=ablate, batch_size=batch_size
        )
    return result
