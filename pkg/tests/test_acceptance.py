"""Acceptance suite: every exit criterion at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line
per criterion.
"""

from __future__ import annotations

import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

import oracles
from conftest import E2E_BACKEND, E2E_SYNTH, E2E_TRAIN, make_planted_dataset
from regionprobe import metrics, saliency
from regionprobe.bridge import (
    ReferenceConfig,
    reference_backend,
    train_linear_head,
)
from regionprobe.corruption import (
    DEFAULT_LINF_LEVELS,
    NoiseSpec,
    apply_region_noise,
    gaussian_noise,
    l2_normalize_noise,
    trial_seed,
)
from regionprobe.dataset import SynthSpec, attribute_linear_probe, load_manifest, synth_dataset
from regionprobe.metrics import (
    aggregate,
    default_class_index,
    expected_record_count,
    instance_sensitivity,
    noise_sweep,
    rfs,
    sweep_to_file,
)
from regionprobe.attribution import generalization_eval, select_best_features


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL: {name}")
        raise
    print(f"ACCEPTANCE PASS: {name}")


# --------------------------------------------------------------------------
# 1. RFS geometric-oracle equivalence
# --------------------------------------------------------------------------


def test_rfs_geometric_oracle_equivalence():
    with criterion("RFS geometric-oracle equivalence (10k pairs + boundary, <1e-12, <1s)"):
        rng = np.random.default_rng(2024)
        pairs = rng.uniform(0.0, 1.0, size=(10_000, 2)).tolist()
        edges = [0.0, 0.25, 0.5, 0.75, 1.0]
        pairs += [(a, b) for a in edges for b in edges]
        start = time.perf_counter()
        worst = max(
            abs(rfs(a, b) - oracles.rfs_distance_ratio(a, b)) for a, b in pairs
        )
        elapsed = time.perf_counter() - start
        assert worst < 1e-12, f"worst deviation {worst}"
        assert elapsed < 1.0, f"took {elapsed:.3f}s"


# --------------------------------------------------------------------------
# 2. RFS/iRFS property suite on the exhaustive grid
# --------------------------------------------------------------------------


def test_rfs_property_suite_exhaustive_grid():
    with criterion("RFS/iRFS property suite (0.01-step grid)"):
        grid = np.round(np.arange(0.0, 1.0001, 0.01), 2)
        for a in grid:
            for b in grid:
                a_f, b_f = float(a), float(b)
                value = rfs(a_f, b_f)
                assert -1.0 <= value <= 1.0
                assert rfs(b_f, a_f) == pytest.approx(-value, abs=1e-12)
                if a_f == b_f:
                    assert value == 0.0
                else:
                    mean = (a_f + b_f) / 2.0
                    if 0.0 < mean < 1.0:
                        assert (value > 0) == (b_f > a_f)
                        assert (value < 0) == (a_f > b_f)


# --------------------------------------------------------------------------
# 3. Corruption correctness on 1,000 random fixtures
# --------------------------------------------------------------------------


def test_corruption_correctness_random_fixtures():
    with criterion("Corruption correctness (1,000 random fixtures)"):
        rng = np.random.default_rng(99)
        for case in range(1_000):
            h = int(rng.integers(8, 24))
            w = int(rng.integers(8, 24))
            # Conditioning: x away from the clip boundary and sigma large
            # enough that additions never round to zero.
            x = rng.uniform(0.05, 0.95, (h, w, 3))
            m = (rng.uniform(size=(h, w)) > rng.uniform(0.2, 0.8)).astype(float)
            if m.sum() == 0 or m.sum() == m.size:
                m[0, 0] = 1.0 - m[0, 0]
            sigma = float(rng.uniform(0.05, 0.5))
            seed = trial_seed(7, f"fix-{case}", case % 7, case % 10)
            n = gaussian_noise((h, w, 3), sigma, seed)

            fg = apply_region_noise(x, m, n, "foreground")
            bg = apply_region_noise(x, m, n, "background")

            # Clipping.
            assert fg.min() >= 0.0 and fg.max() <= 1.0
            assert bg.min() >= 0.0 and bg.max() <= 1.0

            # Untouched-region bit-identity.
            assert np.array_equal(fg[m == 0.0], x[m == 0.0])
            assert np.array_equal(bg[m == 1.0], x[m == 1.0])

            # Region exclusivity: changed pixel sets are disjoint and cover
            # the mask split exactly for well-conditioned fixtures.
            changed_fg = np.any(fg != x, axis=2)
            changed_bg = np.any(bg != x, axis=2)
            assert not (changed_fg & changed_bg).any()
            assert np.array_equal(changed_fg, m == 1.0)
            assert np.array_equal(changed_bg, m == 0.0)

            # Per-trial determinism.
            n2 = gaussian_noise((h, w, 3), sigma, seed)
            assert np.array_equal(n, n2)

            # L2 target met within 1e-6 relative, on the region only.
            target = float(rng.uniform(5.0, 200.0))
            region = "foreground" if case % 2 else "background"
            scaled = l2_normalize_noise(n, m, region, target)
            sel = m if region == "foreground" else 1.0 - m
            sel3 = sel[:, :, None] * np.ones(3)
            norm = math.sqrt(float((scaled[sel3 == 1.0] ** 2).sum()))
            assert abs(norm - target) / target < 1e-6
            assert not scaled[sel3 == 0.0].any()


# --------------------------------------------------------------------------
# 4. Metric-oracle equivalence on random 8x8 fixtures
# --------------------------------------------------------------------------


def test_metric_oracle_equivalence():
    with criterion("Metric-oracle equivalence (100+ random 8x8 fixtures, 1e-9)"):
        rng = np.random.default_rng(123)
        checked = 0
        while checked < 120:
            if checked % 3 == 0:
                s = rng.integers(0, 5, size=(8, 8)).astype(float) / 4.0  # ties
            else:
                s = rng.uniform(0.0, 1.0, (8, 8))
            if s.max() > 0:
                s = s / s.max()
            m = (rng.uniform(size=(8, 8)) > rng.uniform(0.2, 0.8)).astype(float)
            if m.sum() == 0 or m.sum() == m.size or s.sum() == 0:
                continue
            checked += 1
            s_tau = saliency.binarize(s, 0.5)
            assert abs(
                saliency.iou(s_tau, m, "standard") - oracles.iou_pixels(s_tau, m, "standard")
            ) < 1e-9
            assert abs(
                saliency.iou(s_tau, m, "paper_formula")
                - oracles.iou_pixels(s_tau, m, "paper_formula")
            ) < 1e-9
            assert abs(
                saliency.average_precision(s, m)
                - oracles.average_precision_threshold_sweep(s, m)
            ) < 1e-9
            assert abs(
                saliency.delta_densities(s, m, "difference")
                - oracles.delta_densities_loops(s, m, "difference")
            ) < 1e-9
            ratio = saliency.delta_densities(s, m, "ratio")
            ratio_oracle = oracles.delta_densities_loops(s, m, "ratio")
            if math.isinf(ratio) or math.isinf(ratio_oracle):
                assert ratio == ratio_oracle
            else:
                assert abs(ratio - ratio_oracle) < 1e-9 * max(1.0, abs(ratio_oracle))
            assert abs(
                saliency.saliency_precision(s, m) - oracles.saliency_precision_sums(s, m)
            ) < 1e-9
            assert abs(
                saliency.saliency_recall(s, m)
                - oracles.saliency_recall_sorted_scan(s, m, 0.75)
            ) < 1e-9


# --------------------------------------------------------------------------
# 5. End-to-end directional check
# --------------------------------------------------------------------------


def _directional_run(coding: str) -> tuple[float, float]:
    """Train on the synthetic dataset, sweep its test split, return
    (group rfs, median irfs)."""
    ds = synth_dataset(SynthSpec(coding=coding, seed=11, **E2E_SYNTH))
    backend = reference_backend(E2E_BACKEND, seed=3)
    trained = train_linear_head(backend, ds, E2E_TRAIN)
    cti = default_class_index(ds)
    spec = NoiseSpec(
        kind="linf_gaussian", levels=DEFAULT_LINF_LEVELS, trials=10, base_seed=99
    )
    records = noise_sweep(ds.test, trained, spec, class_to_index=cti)
    assert len(records) == expected_record_count(len(ds.test.samples), spec)
    (agg,) = aggregate(records)
    instances = instance_sensitivity(
        records, {s.id: cti[s.class_label] for s in ds.test.samples}
    )
    return agg.rfs, float(np.median([inst.irfs for inst in instances]))


def test_end_to_end_directional_check():
    with criterion(
        "End-to-end directional check (fg RFS>0.3, median iRFS>0, bg RFS<-0.3, <60s)"
    ):
        start = time.perf_counter()
        fg_rfs, fg_median_irfs = _directional_run("foreground")
        bg_rfs, _ = _directional_run("background")
        elapsed = time.perf_counter() - start
        assert fg_rfs > 0.3, f"foreground-coded rfs {fg_rfs:.3f}"
        assert fg_median_irfs > 0.0, f"median irfs {fg_median_irfs:.3f}"
        assert bg_rfs < -0.3, f"background-coded rfs {bg_rfs:.3f}"
        assert elapsed < 60.0, f"took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# 6. Background-removal check
# --------------------------------------------------------------------------


def test_background_removal_check(
    fg_dataset, bg_dataset, trained_fg_backend, trained_bg_backend
):
    with criterion("Background-removal check (bg-coded to chance, fg-coded < 2 points)"):
        bg_result = metrics.background_removal_eval(bg_dataset, trained_bg_backend)
        chance = 1.0 / E2E_SYNTH["n_classes"]
        assert abs(bg_result["ablated_acc"] - chance) <= 0.10, bg_result

        fg_result = metrics.background_removal_eval(fg_dataset, trained_fg_backend)
        assert fg_result["ablated_acc"] >= fg_result["clean_acc"] - 0.02, fg_result


# --------------------------------------------------------------------------
# 7. Attribution planted-ground-truth check
# --------------------------------------------------------------------------


def test_attribution_planted_ground_truth():
    with criterion("Attribution planted check (train IOU>0.8, test IOU>0.8)"):
        ds, meta = make_planted_dataset()
        config = ReferenceConfig(image_size=64, n_classes=2, feature_dim=6, pooling_cell=8)
        backend = reference_backend(config, seed=17)
        rows, cols = meta["layout"]["beak"]
        weights = np.zeros((config.grid, config.grid, 3))
        weights[rows.start // 8 : rows.stop // 8, cols.start // 8 : cols.stop // 8, :] = 1.0
        weights /= weights.sum()
        wired = backend.wire_feature(1, weights)

        report = select_best_features(wired, ds.train, class_filter="bird", k=10)
        feature_index, train_iou = report.mapping[("bird", "beak")]
        assert feature_index == 1, f"selected feature {feature_index}"
        assert train_iou > 0.8, f"train mean IOU {train_iou:.3f}"

        (result,) = generalization_eval(wired, ds.test, report.mapping)
        assert result.test_mean_iou > 0.8, f"test mean IOU {result.test_mean_iou:.3f}"


# --------------------------------------------------------------------------
# 8. Reference-backend gradient check
# --------------------------------------------------------------------------


def test_reference_gradient_check():
    with criterion("Reference-backend gradients vs central differences (100 probes, <1e-3)"):
        rng = np.random.default_rng(777)
        worst = 0.0
        for probe in range(100):
            cell = int(rng.choice((4, 8)))
            config = ReferenceConfig(
                image_size=16, n_classes=3, feature_dim=8, pooling_cell=cell
            )
            backend = reference_backend(config, seed=int(rng.integers(10_000)))
            image = rng.uniform(0.1, 0.9, (16, 16, 3))
            kind = "feature" if probe % 2 else "class"
            index = int(rng.integers(8 if kind == "feature" else 3))
            analytic = backend.input_gradient(image, kind, index)

            # Central differences on a random subset of coordinates.
            step = 1e-4
            for _ in range(24):
                ij = (
                    int(rng.integers(16)),
                    int(rng.integers(16)),
                    int(rng.integers(3)),
                )
                xp = image.copy()
                xm = image.copy()
                xp[ij] += step
                xm[ij] -= step
                numeric = (
                    backend.target_value(xp, kind, index)
                    - backend.target_value(xm, kind, index)
                ) / (2 * step)
                scale = max(abs(analytic[ij]), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic[ij] - numeric) / scale)
        assert worst < 1e-3, f"worst relative error {worst:.2e}"


# --------------------------------------------------------------------------
# 9. Sweep accounting and checkpoint resume
# --------------------------------------------------------------------------


def test_sweep_accounting_and_resume(tmp_path):
    with criterion("Sweep accounting (exact counts, byte-identical resume)"):
        ds = synth_dataset(
            SynthSpec(n_samples=10, image_size=32, coding="foreground", n_classes=2, seed=8)
        )
        backend = reference_backend(
            ReferenceConfig(image_size=32, n_classes=2, feature_dim=8, pooling_cell=8),
            seed=2,
        )
        spec = NoiseSpec(
            kind="linf_gaussian", levels=(0.1, 0.3, 0.5), trials=4, base_seed=55
        )
        records = noise_sweep(ds, backend, spec)
        expected = expected_record_count(len(ds.samples), spec)
        assert len(records) == expected == 10 * 2 * 3 * 4
        assert len({r.key() for r in records}) == expected

        full = tmp_path / "full.jsonl"
        sweep_to_file(full, ds, backend, spec)
        resumed = tmp_path / "resumed.jsonl"
        sweep_to_file(resumed, ds, backend, spec, limit=expected // 3)
        sweep_to_file(resumed, ds, backend, spec)
        assert resumed.read_bytes() == full.read_bytes()


# --------------------------------------------------------------------------
# 10. Conditional: RIVAL10 linear probe
# --------------------------------------------------------------------------


def test_rival10_attribute_probe_conditional():
    manifest = os.environ.get("RIVAL10_MANIFEST")
    if not manifest:
        print("ACCEPTANCE SKIP: RIVAL10 probe (set RIVAL10_MANIFEST to enable)")
        pytest.skip("RIVAL10 data not available")
    with criterion("RIVAL10 attribute probe (93.3% +/- 2 points)"):
        ds = load_manifest(manifest)
        result = attribute_linear_probe(ds, seed=0)
        assert abs(result["test_accuracy"] - 0.933) <= 0.02, result
