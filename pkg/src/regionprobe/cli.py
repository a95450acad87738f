"""Command-line entry point and plot-ready table emission.

Every analysis takes a dataset (a manifest path or an inline synth spec), a
backend locator, an output directory, and a mandatory seed; it writes a run
manifest echoing the configuration, the analysis outputs, and a summary.
Outputs are plot-ready CSV/JSON tables, re-derivable from the run manifest
alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import regionprobe
from regionprobe import bridge
from regionprobe.corruption import (
    DEFAULT_L2_LEVELS,
    DEFAULT_LINF_LEVELS,
    NoiseSpec,
    attribute_ablate,
)
from regionprobe.dataset import (
    WHOLE_OBJECT_ATTRIBUTES,
    Dataset,
    SynthSpec,
    attribute_linear_probe,
    load_manifest,
    synth_dataset,
    validate_dataset,
)
from regionprobe import attribution, metrics, saliency

BACKEND_ENV_VAR = "REGIONPROBE_BACKEND"

ANALYSES = (
    "ingest-validate",
    "sweep",
    "ablate",
    "saliency-align",
    "attribute-nodes",
    "probe",
    "figure-data",
)

FIGURES = (
    "fg_bg_scatter",
    "accuracy_curves",
    "irfs_histograms",
    "alignment_bars",
    "attribution_histograms",
)

IRFS_HIST_BINS = 40


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    analysis: str
    output_dir: str
    base_seed: int
    dataset: str | None = None
    backend: str | None = None
    split: str = "test"
    kind: str = "linf_gaussian"
    levels: tuple[float, ...] | None = None
    trials: int = 10
    regions: tuple[str, ...] = ("foreground", "background")
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    batch_size: int = 32
    train: bool = True
    train_epochs: int = 10
    train_lr: float = 1e-4
    train_weight_decay: float = 1e-5
    finetune: bool = False
    ablate_attributes: bool = False
    tau: float = 0.5
    rank_metric: str = "delta_density_diff"
    rank_k: int = 10
    top_k: int = 10
    attr_class: str = "all"
    figure: str | None = None
    results_dir: str | None = None

    def validate(self) -> None:
        if self.analysis not in ANALYSES:
            raise ConfigError(f"unknown analysis {self.analysis!r}")
        if self.base_seed is None:
            raise ConfigError("a seed is mandatory; there is no wall-clock default")
        if self.analysis == "figure-data":
            if self.figure not in FIGURES:
                raise ConfigError(f"--figure must be one of {FIGURES}")
            if not self.results_dir:
                raise ConfigError("figure-data needs --results pointing at a prior run")
            return
        if not self.dataset:
            raise ConfigError(f"analysis {self.analysis!r} needs --dataset")
        needs_backend = self.analysis in ("sweep", "ablate", "saliency-align", "attribute-nodes")
        if needs_backend and not self.backend:
            raise ConfigError(
                f"analysis {self.analysis!r} needs --backend (or ${BACKEND_ENV_VAR})"
            )


def _parse_synth(arg: str, base_seed: int) -> SynthSpec:
    params: dict[str, str] = {}
    body = arg[len("synth:") :]
    for part in body.split(","):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad synth parameter {part!r} (expected key=value)")
        key, value = part.split("=", 1)
        params[key.strip()] = value.strip()
    coding = params.get("coding", "foreground")
    return SynthSpec(
        n_samples=int(params.get("n", 200)),
        image_size=int(params.get("size", 64)),
        coding=coding,
        n_classes=int(params.get("classes", 4)),
        seed=int(params.get("seed", base_seed)),
        jitter=params.get("jitter", "1") not in ("0", "false", "no"),
    )


def load_dataset_arg(arg: str, base_seed: int) -> Dataset:
    if arg.startswith("synth:"):
        return synth_dataset(_parse_synth(arg, base_seed))
    return load_manifest(arg)


def _resolve_backend(config: RunConfig) -> bridge.Backend:
    return bridge.open_backend(config.backend)


def _maybe_train(backend: bridge.Backend, ds: Dataset, config: RunConfig) -> bridge.Backend:
    if not config.train or "train_head" not in backend.capabilities():
        return backend
    desc = backend.descriptor()
    n_classes = len({s.class_label for s in ds.samples})
    declared = int(desc.metadata.get("n_classes", 0))
    if declared and declared != n_classes:
        raise ConfigError(
            f"backend predicts {declared} classes but the dataset has {n_classes}"
        )
    hyper = bridge.TrainHyper(
        lr=config.train_lr,
        epochs=config.train_epochs,
        weight_decay=config.train_weight_decay,
        seed=config.base_seed,
        batch_size=config.batch_size,
    )
    return bridge.train_linear_head(backend, ds, hyper)


def _write_manifest(out: Path, config: RunConfig, extra: dict | None = None) -> None:
    payload = {
        "tool": "regionprobe",
        "version": regionprobe.__version__,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": dataclasses.asdict(config),
    }
    if extra:
        payload.update(extra)
    (out / "run_manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
    )


def _write_summary(out: Path, lines: list[str]) -> None:
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if value == math.inf:
        return "inf"
    return repr(float(value))


def write_aggregates_csv(records: list[metrics.SensitivityRecord], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["group_key", "a_fg", "a_bg", "mean", "rfs", "n", "rfs_per_level_mean"]
        )
        for rec in records:
            writer.writerow(
                [
                    rec.key_string(),
                    _fmt(rec.a_fg),
                    _fmt(rec.a_bg),
                    _fmt(rec.mean),
                    _fmt(rec.rfs),
                    rec.n_trials,
                    _fmt(rec.rfs_per_level_mean),
                ]
            )


def write_instances_csv(rows: list[metrics.InstanceSensitivity], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "p_fg", "p_bg", "p_mean", "irfs"])
        for r in rows:
            writer.writerow([r.sample_id, _fmt(r.p_fg), _fmt(r.p_bg), _fmt(r.p_mean), _fmt(r.irfs)])


# --------------------------------------------------------------------------
# Analyses
# --------------------------------------------------------------------------


def _run_ingest_validate(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    violations = validate_dataset(ds)
    report = {
        "n_samples": len(ds.samples),
        "violations": [
            {"sample_id": v.sample_id, "field": v.field, "rule": v.rule} for v in violations
        ],
    }
    (out / "violations.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(out, config)
    _write_summary(
        out,
        [f"samples: {len(ds.samples)}", f"violations: {len(violations)}"],
    )
    return 0 if not violations else 3


def _sweep_spec(config: RunConfig) -> NoiseSpec:
    levels = config.levels
    if levels is None:
        levels = DEFAULT_LINF_LEVELS if config.kind == "linf_gaussian" else DEFAULT_L2_LEVELS
    return NoiseSpec(
        kind=config.kind,
        levels=tuple(levels),
        regions=tuple(config.regions),
        trials=config.trials,
        base_seed=config.base_seed,
    )


def _run_sweep(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    backend = _resolve_backend(config)
    backend = _maybe_train(backend, ds, config)
    swept = ds.split(config.split) if config.split != "all" else ds
    if not swept.samples:
        raise ConfigError(f"split {config.split!r} is empty")
    spec = _sweep_spec(config)
    class_to_index = metrics.default_class_index(ds)

    records_path = out / "records.jsonl"
    count = metrics.sweep_to_file(
        records_path,
        swept,
        backend,
        spec,
        class_to_index=class_to_index,
        batch_size=config.batch_size,
        workers=config.workers,
    )
    records = metrics.load_records(records_path)
    labels = {s.id: s.class_label for s in swept.samples}
    label_index = {sid: class_to_index[c] for sid, c in labels.items()}

    overall = metrics.aggregate(records)
    by_level = metrics.aggregate(records, group_by=("level",))
    by_class = metrics.aggregate(records, group_by=("class",), class_labels=labels)
    write_aggregates_csv(overall + by_level + by_class, out / "aggregates.csv")
    instances = metrics.instance_sensitivity(records, label_index)
    write_instances_csv(instances, out / "instances.csv")

    desc = backend.descriptor()
    (out / "backend.json").write_text(
        json.dumps(dataclasses.asdict(desc), indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(
        out, config, extra={"records": count, "levels": list(spec.levels)}
    )
    head = overall[0]
    _write_summary(
        out,
        [
            f"records: {count}",
            f"a_fg: {head.a_fg:.4f}",
            f"a_bg: {head.a_bg:.4f}",
            f"rfs: {head.rfs:.4f}",
            f"median irfs: {float(np.median([i.irfs for i in instances])):.4f}",
        ],
    )
    return 0


def _run_ablate(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    backend = _resolve_backend(config)
    backend = _maybe_train(backend, ds, config)
    hyper = bridge.TrainHyper(
        lr=config.train_lr,
        epochs=config.train_epochs,
        weight_decay=config.train_weight_decay,
        seed=config.base_seed,
        batch_size=config.batch_size,
    )
    result = metrics.background_removal_eval(
        ds, backend, finetune=config.finetune, hyper=hyper, batch_size=config.batch_size
    )
    (out / "ablation.json").write_text(
        json.dumps(result, indent=2, sort_keys=True), encoding="utf-8"
    )

    lines = [f"{k}: {v:.4f}" for k, v in sorted(result.items())]
    if config.ablate_attributes:
        rows = _attribute_ablation_rows(ds, backend, config.batch_size)
        with (out / "attribute_ablation.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attribute", "n", "clean_acc", "ablated_acc", "drop"])
            writer.writerows(rows)
        lines.append(f"attribute ablation rows: {len(rows)}")
    _write_manifest(out, config)
    _write_summary(out, lines)
    return 0


def _attribute_ablation_rows(ds: Dataset, backend: bridge.Backend, batch_size: int) -> list:
    """Accuracy drop per part-level attribute, over its positive test samples."""
    class_to_index = metrics.default_class_index(ds)
    rows = []
    for attr in ds.attribute_names:
        if attr in WHOLE_OBJECT_ATTRIBUTES:
            continue
        pool = [
            s
            for s in ds.test.samples
            if s.attributes.get(attr, 0) and attr in s.attribute_masks
        ]
        if not pool:
            continue
        clean = metrics.evaluate_accuracy(backend, pool, class_to_index, batch_size=batch_size)
        ablated = metrics.evaluate_accuracy(
            backend,
            pool,
            class_to_index,
            transform=lambda s, a=attr: attribute_ablate(s, a),
            batch_size=batch_size,
        )
        rows.append([attr, len(pool), repr(clean), repr(ablated), repr(clean - ablated)])
    return rows


def _run_saliency_align(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    backend = _resolve_backend(config)
    backend = _maybe_train(backend, ds, config)
    scored = saliency.score_alignment(
        backend,
        ds.split(config.split) if config.split != "all" else ds,
        tau=config.tau,
        batch_size=config.batch_size,
    )
    saliency.write_alignment_csv(scored, out / "alignment.csv")
    k = min(config.rank_k, len(scored))
    saliency.write_misaligned_report(scored, config.rank_metric, k, out / "misaligned.json")
    _write_manifest(out, config)
    means = {
        name: float(np.mean([getattr(sc, name) for _, sc in scored if name not in sc.degenerate]))
        for name in ("iou_standard", "saliency_precision")
    }
    _write_summary(
        out,
        [f"scored: {len(scored)}"] + [f"mean {k}: {v:.4f}" for k, v in sorted(means.items())],
    )
    return 0


def _run_attribute_nodes(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    backend = _resolve_backend(config)
    backend = _maybe_train(backend, ds, config)
    class_filter = None if config.attr_class == "all" else config.attr_class
    report = attribution.select_best_features(
        backend,
        ds.train,
        class_filter=class_filter,
        k=config.top_k,
        tau=config.tau,
        batch_size=config.batch_size,
    )
    results = attribution.generalization_eval(
        backend, ds.test, report.mapping, tau=config.tau, batch_size=config.batch_size
    )
    splits = {}
    for res in results:
        pool = ds.test
        try:
            splits[(res.class_id, res.attribute_id)] = attribution.activation_attribute_split(
                backend, pool, res.feature_index, res.attribute_id, batch_size=config.batch_size
            )
        except ValueError:
            pass  # one-sided pools are simply not reported
    attribution.write_attribution_report(results, out / "attribution.json", splits=splits)
    pairs_dir = out / "pairs"
    pairs_dir.mkdir(exist_ok=True)
    for res in results:
        attribution.write_pair_csv(
            res, pairs_dir / f"{res.class_id}__{res.attribute_id}.csv"
        )
    (out / "selection_skipped.json").write_text(
        json.dumps(report.skipped, indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(out, config)
    _write_summary(
        out,
        [f"pairs: {len(results)}", f"skipped attributes: {len(report.skipped)}"]
        + [
            f"{r.class_id}/{r.attribute_id}: feature {r.feature_index} "
            f"train_iou {r.train_mean_iou:.3f} test_iou {r.test_mean_iou:.3f}"
            for r in results
        ],
    )
    return 0


def _run_probe(config: RunConfig, out: Path) -> int:
    ds = load_dataset_arg(config.dataset, config.base_seed)
    result = attribute_linear_probe(ds, seed=config.base_seed)
    (out / "probe.json").write_text(
        json.dumps(result, indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(out, config)
    _write_summary(out, [f"{k}: {v:.4f}" for k, v in sorted(result.items())])
    return 0


# --------------------------------------------------------------------------
# Figure data
# --------------------------------------------------------------------------


def emit_figure_data(results_dir: str | Path, figure: str, out_dir: str | Path) -> Path:
    """Produce one plot-ready file for a figure from a prior run's outputs."""
    results = Path(results_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if figure in ("fg_bg_scatter", "accuracy_curves"):
        records = metrics.load_records(results / "records.jsonl")
        if not records:
            raise ConfigError(f"no records found under {results}")
        params = 0
        backend_file = results / "backend.json"
        if backend_file.exists():
            params = json.loads(backend_file.read_text()).get("parameter_count", 0)
        path = out / f"{figure}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if figure == "fg_bg_scatter":
                writer.writerow(["model", "parameter_count", "a_fg", "a_bg", "rfs"])
                for rec in metrics.aggregate(records, group_by=("model",)):
                    writer.writerow(
                        [
                            dict(rec.group_key)["model"],
                            params,
                            _fmt(rec.a_fg),
                            _fmt(rec.a_bg),
                            _fmt(rec.rfs),
                        ]
                    )
            else:
                writer.writerow(["model", "region", "level_index", "accuracy", "n"])
                for rec in metrics.aggregate(records, group_by=("model", "level")):
                    key = dict(rec.group_key)
                    for region, acc in (("foreground", rec.a_fg), ("background", rec.a_bg)):
                        writer.writerow(
                            [key["model"], region, key["level"], _fmt(acc), rec.n_trials // 2]
                        )
        return path

    if figure == "irfs_histograms":
        values = []
        with (results / "instances.csv").open("r", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                values.append(float(row["irfs"]))
        counts, edges = np.histogram(values, bins=IRFS_HIST_BINS, range=(-1.0, 1.0))
        path = out / "irfs_histograms.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            for i, c in enumerate(counts):
                writer.writerow([_fmt(edges[i]), _fmt(edges[i + 1]), int(c)])
        return path

    if figure == "alignment_bars":
        rows = []
        with (results / "alignment.csv").open("r", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        path = out / "alignment_bars.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "mean", "n"])
            for name in saliency.METRIC_NAMES:
                vals = [
                    float(r[name])
                    for r in rows
                    if name not in r["degenerate"].split("|") and r[name] != "inf"
                ]
                if vals:
                    writer.writerow([name, _fmt(float(np.mean(vals))), len(vals)])
        return path

    if figure == "attribution_histograms":
        report = json.loads((results / "attribution.json").read_text())
        path = out / "attribution_histograms.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "attribute", "feature", "bin_left", "bin_right", "count"])
            for pair in report["pairs"]:
                edges = pair["test_iou_hist"]["edges"]
                for i, c in enumerate(pair["test_iou_hist"]["counts"]):
                    writer.writerow(
                        [
                            pair["class"],
                            pair["attribute"],
                            pair["feature"],
                            _fmt(edges[i]),
                            _fmt(edges[i + 1]),
                            int(c),
                        ]
                    )
        return path

    raise ConfigError(f"unknown figure {figure!r}")


def _run_figure_data(config: RunConfig, out: Path) -> int:
    path = emit_figure_data(config.results_dir, config.figure, out / "figures")
    _write_manifest(out, config)
    _write_summary(out, [f"wrote {path}"])
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

_RUNNERS = {
    "ingest-validate": _run_ingest_validate,
    "sweep": _run_sweep,
    "ablate": _run_ablate,
    "saliency-align": _run_saliency_align,
    "attribute-nodes": _run_attribute_nodes,
    "probe": _run_probe,
    "figure-data": _run_figure_data,
}


def run(config: RunConfig) -> int:
    """Validate the config, execute the analysis, and write artifacts."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[config.analysis](config, out)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", help="manifest path or synth:<k=v,...> spec")
    parser.add_argument("--backend", help="cmd:<argv> | socket:<addr> | reference:<config>")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="base seed (mandatory)")
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("--split", help="dataset split to analyze (train|test|all)")
    parser.add_argument("--workers", type=int, help="worker pool size")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--no-train", action="store_true", help="skip linear-head training")
    parser.add_argument("--train-epochs", type=int, dest="train_epochs")
    parser.add_argument("--train-lr", type=float, dest="train_lr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionprobe",
        description="Region-sensitivity analysis of image classifiers",
    )
    sub = parser.add_subparsers(dest="analysis")

    for name in ANALYSES:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--kind", choices=("linf_gaussian", "l2_normalized"))
            p.add_argument("--levels", help="comma-separated noise levels")
            p.add_argument("--trials", type=int)
            p.add_argument("--regions", help="comma-separated regions")
        if name == "ablate":
            p.add_argument("--finetune", action="store_true")
            p.add_argument(
                "--attributes", action="store_true", help="also ablate each part attribute"
            )
        if name == "saliency-align":
            p.add_argument("--tau", type=float)
            p.add_argument("--rank-metric", dest="rank_metric")
            p.add_argument("--rank-k", type=int, dest="rank_k")
        if name == "attribute-nodes":
            p.add_argument("--tau", type=float)
            p.add_argument("--top-k", type=int, dest="top_k")
            p.add_argument("--attr-class", dest="attr_class", help="class name or 'all'")
        if name == "figure-data":
            p.add_argument("--figure", choices=FIGURES)
            p.add_argument("--results", dest="results_dir", help="prior run output directory")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        base.update(json.loads(Path(args.config).read_text(encoding="utf-8")))

    base["analysis"] = args.analysis
    base["output_dir"] = args.out

    overrides = {
        "dataset": args.dataset,
        "backend": args.backend,
        "base_seed": args.seed,
        "split": getattr(args, "split", None),
        "workers": getattr(args, "workers", None),
        "batch_size": getattr(args, "batch_size", None),
        "train_epochs": getattr(args, "train_epochs", None),
        "train_lr": getattr(args, "train_lr", None),
        "kind": getattr(args, "kind", None),
        "trials": getattr(args, "trials", None),
        "tau": getattr(args, "tau", None),
        "rank_metric": getattr(args, "rank_metric", None),
        "rank_k": getattr(args, "rank_k", None),
        "top_k": getattr(args, "top_k", None),
        "attr_class": getattr(args, "attr_class", None),
        "figure": getattr(args, "figure", None),
        "results_dir": getattr(args, "results_dir", None),
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if getattr(args, "no_train", False):
        base["train"] = False
    if getattr(args, "finetune", False):
        base["finetune"] = True
    if getattr(args, "attributes", False):
        base["ablate_attributes"] = True
    if getattr(args, "levels", None):
        base["levels"] = tuple(float(v) for v in args.levels.split(","))
    if getattr(args, "regions", None):
        base["regions"] = tuple(args.regions.split(","))

    if not base.get("backend"):
        env = os.environ.get(BACKEND_ENV_VAR)
        if env:
            base["backend"] = env
    if "base_seed" not in base or base["base_seed"] is None:
        raise ConfigError("--seed is mandatory (no wall-clock default)")

    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(base) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if "levels" in base and base["levels"] is not None:
        base["levels"] = tuple(base["levels"])
    if "regions" in base:
        base["regions"] = tuple(base["regions"])
    return RunConfig(**base)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.analysis:
        parser.print_usage(sys.stderr)
        return 2
    try:
        config = _config_from_args(args)
        return run(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # dataset/backend failures, with context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
