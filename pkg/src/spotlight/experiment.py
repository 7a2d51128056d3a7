"""Baseline (plain MSE) vs foreground-aware training on synthetic phantoms.

Both arms share phantoms, network config, seed and iteration budget; only the
target standardization, patch filtering and loss differ.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from spotlight import nets
from spotlight.errors import SpotlightError
from spotlight.foreground import foreground_mask, otsu_threshold, standardize, standardize_mean
from spotlight.losses import LossConfig
from spotlight.metrics import evaluate, format_value, rescale_to_target_range
from spotlight.plots import write_histogram_svg
from spotlight.segeval import (
    FEATURE_NAMES,
    SegConfig,
    extract_features,
    profile_distance,
    segment_and_score,
    threshold_sweep,
)
from spotlight.synth import PhantomConfig, SynthSample, generate_phantom

log = logging.getLogger(__name__)

ARMS = ("mse", "spotlight")


class StageError(SpotlightError):
    """Wraps a failure with the pipeline stage and sample it happened in."""

    def __init__(self, stage: str, sample: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed on {sample}: {cause}")
        self.exit_code = getattr(cause, "exit_code", 3)


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = PhantomConfig()
    n_train: int = 16
    n_test: int = 4
    net: nets.NetConfig = nets.NetConfig()
    train: nets.TrainConfig = nets.TrainConfig()
    loss: LossConfig = LossConfig()
    seg: SegConfig = SegConfig()
    taus: tuple[float, ...] = (0.25, 0.5, 0.75)
    sweep_thresholds: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4)
    seed: int = 0
    frc_bin_delta: int = 5

    def arm_train_config(self, arm: str) -> nets.TrainConfig:
        return replace(self.train, loss=arm, loss_cfg=self.loss, rng_seed=self.seed)

    def phantom_config(self, split: str, index: int) -> PhantomConfig:
        offset = 0 if split == "train" else 1000
        return replace(self.phantom, seed=self.seed * 10_000 + offset + index)


@dataclass
class PreparedVolume:
    """Raw sample plus the standardized arrays each arm trains on."""

    sample: SynthSample
    input_std: np.ndarray
    target_std: dict  # arm -> standardized target
    mask: np.ndarray  # foreground mask from the target's Otsu threshold


def prepare(sample: SynthSample) -> PreparedVolume:
    inp, _, _ = standardize_mean(sample.input)
    target = sample.target
    otsu = otsu_threshold(target)
    spot, _ = standardize(target, otsu.threshold)
    base, _, _ = standardize_mean(target)
    mask = foreground_mask(target, otsu.threshold).bits
    return PreparedVolume(sample, inp.data, {"mse": base.data, "spotlight": spot.data}, mask)


@dataclass
class ArmResult:
    params: nets.NetParams
    trace: list
    rescale: tuple  # (train_min, train_max, std_min, std_max)
    predictions: list = field(default_factory=list)  # rescaled, per test sample


def _rescale_bounds(train: list[PreparedVolume], arm: str) -> tuple:
    raw_min = min(float(p.sample.target.data.min()) for p in train)
    raw_max = max(float(p.sample.target.data.max()) for p in train)
    std_min = min(float(p.target_std[arm].min()) for p in train)
    std_max = max(float(p.target_std[arm].max()) for p in train)
    return raw_min, raw_max, std_min, std_max


def train_arm(cfg: ExperimentConfig, arm: str, train: list[PreparedVolume]) -> ArmResult:
    dataset = [(p.input_std, p.target_std[arm], p.mask) for p in train]
    params, trace = nets.train(cfg.arm_train_config(arm), cfg.net, dataset)
    return ArmResult(params, trace, _rescale_bounds(train, arm))


def predict_rescaled(result: ArmResult, prepared: PreparedVolume) -> np.ndarray:
    std_pred = nets.predict(result.params, prepared.input_std)
    return rescale_to_target_range(std_pred.astype(np.float64), *result.rescale)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def _stage(name, sample, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise StageError(name, sample, exc) from exc


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the full comparison and write CSV tables, SVG histograms and a summary.

    Returns the summary dictionary (also written to ``summary.txt``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    train = [
        _stage("synth", f"train-{i}", lambda i=i: prepare(generate_phantom(cfg.phantom_config("train", i))))
        for i in range(cfg.n_train)
    ]
    test = [
        _stage("synth", f"test-{i}", lambda i=i: prepare(generate_phantom(cfg.phantom_config("test", i))))
        for i in range(cfg.n_test)
    ]

    results = {}
    for arm in ARMS:
        log.info("training %s arm (%d iterations)", arm, cfg.train.iterations)
        results[arm] = _stage("train", arm, train_arm, cfg, arm, train)
        nets.save_checkpoint(results[arm].params, out / f"{arm}.ckpt", dict(zip(
            ("train_min", "train_max", "std_min", "std_max"), results[arm].rescale)))

    metric_rows, ap_rows, feat_rows, prof_rows, sweep_rows = [], [], [], [], []
    target_feats = {}
    for j, prep in enumerate(test):
        sid = f"test-{j}"
        target = prep.sample.target.data.astype(np.float64)
        gt = prep.sample.labels
        seg, aps = _stage("segment", sid, segment_and_score, target, gt, cfg.seg, cfg.taus)
        ap_rows += [("target", sid, r.tau, r.tp, r.fp, r.fn, r.ap) for r in aps]
        target_feats[sid] = _stage("features", sid, extract_features, seg, target)

    for arm in ARMS:
        for j, prep in enumerate(test):
            sid = f"test-{j}"
            target = prep.sample.target.data.astype(np.float64)
            gt = prep.sample.labels
            pred = _stage("predict", sid, predict_rescaled, results[arm], prep)
            results[arm].predictions.append(pred)
            report = _stage("evaluate", sid, evaluate, pred, target, prep.mask, cfg.frc_bin_delta)
            metric_rows += [(arm, *row) for row in report.rows(sid)]
            seg, aps = _stage("segment", sid, segment_and_score, pred, gt, cfg.seg, cfg.taus)
            ap_rows += [(arm, sid, r.tau, r.tp, r.fp, r.fn, r.ap) for r in aps]
            feats = _stage("features", sid, extract_features, seg, pred)
            feat_rows += [(arm, sid, f.label, *f.vector()) for f in feats]
            try:
                dist = profile_distance(target_feats[sid], feats)
            except SpotlightError:
                dist = math.nan  # no instances on one side
            prof_rows.append((arm, sid, dist))
            sweep = _stage(
                "sweep", sid, threshold_sweep, pred, cfg.sweep_thresholds, gt, target,
                cfg.seg, cfg.taus, prep.mask,
            )
            sweep_rows += [(arm, sid, *row) for row in sweep]

    _write_csv(out / "metrics.csv", ["arm", "sample_id", "metric", "scope", "value"], metric_rows)
    _write_csv(out / "ap.csv", ["arm", "sample_id", "tau", "tp", "fp", "fn", "ap"], ap_rows)
    _write_csv(out / "features.csv", ["arm", "sample_id", "label", *FEATURE_NAMES], feat_rows)
    _write_csv(out / "profiles.csv", ["arm", "sample_id", "cosine_distance"], prof_rows)
    _write_csv(
        out / "sweep.csv", ["arm", "sample_id", "threshold", "metric", "scope", "value"], sweep_rows
    )
    _write_csv(
        out / "loss_trace.csv",
        ["arm", "iteration", "loss"],
        [(arm, i, v) for arm in ARMS for i, v in enumerate(results[arm].trace)],
    )
    for arm in ARMS:
        write_histogram_svg(
            results[arm].predictions, cfg.sweep_thresholds, out / f"hist_{arm}.svg",
            title=f"{arm} test predictions",
        )

    summary = summarize(metric_rows, ap_rows, sweep_rows, prof_rows)
    summary["runtime_s"] = round(time.perf_counter() - t0, 1)
    with open(out / "summary.txt", "w") as fh:
        for key in sorted(summary):
            fh.write(f"{key}={format_value(summary[key])}\n")
    return summary


def summarize(metric_rows, ap_rows, sweep_rows, prof_rows) -> dict:
    """Per-arm means of the headline numbers used by the acceptance checks."""
    summary = {}
    for arm in ("target", *ARMS):
        for tau in sorted({r[2] for r in ap_rows}):
            vals = [r[6] for r in ap_rows if r[0] == arm and r[2] == tau]
            if vals:
                summary[f"{arm}.ap@{tau:g}"] = float(np.mean(vals))
    for arm in ARMS:
        for metric in ("psnr", "ssim", "frc_resolution_px"):
            for scope in ("whole", "fg"):
                vals = [r[4] for r in metric_rows if r[0] == arm and r[2] == metric and r[3] == scope]
                if vals:
                    summary[f"{arm}.{metric}.{scope}"] = float(np.mean(vals))
        dists = [r[2] for r in prof_rows if r[0] == arm and math.isfinite(r[2])]
        summary[f"{arm}.profile_distance"] = float(np.mean(dists)) if dists else math.nan

        # AP@0.5 per sweep threshold, averaged over samples
        per_t = {}
        for r in sweep_rows:
            if r[0] == arm and r[3] == "ap@0.5":
                per_t.setdefault(r[2], []).append(r[5])
        curve = {t: float(np.mean(v)) for t, v in per_t.items()}
        swept = [v for t, v in curve.items() if t != -math.inf]
        if swept:
            summary[f"{arm}.sweep.ap@0.5.std"] = float(np.std(swept))
            summary[f"{arm}.sweep.ap@0.5.best"] = float(max(swept))
            summary[f"{arm}.sweep.ap@0.5.unthresholded"] = curve[-math.inf]
    return summary
