"""Command line entry point: ``spotlight <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from spotlight import nets
from spotlight.config import dump_config, load_config, parse_config
from spotlight.errors import ConfigError, Incompatible, SpotlightError
from spotlight.experiment import (
    ARMS,
    ExperimentConfig,
    _rescale_bounds,
    _write_csv,
    prepare,
    run_experiment,
)
from spotlight.foreground import foreground_mask, otsu_threshold, standardize_mean
from spotlight.metrics import evaluate, rescale_to_target_range, write_metric_rows
from spotlight.plots import write_histogram_svg
from spotlight.segeval import (
    FEATURE_NAMES,
    ap_table,
    extract_features,
    postprocess,
    segment_watershed,
    threshold_sweep,
)
from spotlight.synth import SynthSample, generate_phantom
from spotlight.volume import (
    LabelVolume,
    Volume,
    crop_to_multiple,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)

log = logging.getLogger("spotlight")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- manifest ----------------------------------------------------------------------


def write_manifest(path: Path, cfg: ExperimentConfig, rows) -> None:
    lines = ["# spotlight synth manifest", "[config]", dump_config(cfg).rstrip("\n"), "[samples]"]
    lines.append("id,split,input,target,labels")
    lines += [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[ExperimentConfig, list[dict]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    cfg_part, sep, sample_part = text.partition("[samples]")
    if not sep:
        raise ConfigError(f"{path} has no [samples] section")
    cfg = parse_config(cfg_part.replace("[config]", ""))
    lines = [ln for ln in sample_part.splitlines() if ln.strip()]
    header = lines[0].split(",")
    samples = []
    for ln in lines[1:]:
        rec = dict(zip(header, ln.split(",")))
        for key in ("input", "target", "labels"):
            rec[key] = path.parent / rec[key]
        samples.append(rec)
    return cfg, samples


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out(args)
    rows = []
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        for i in range(count):
            sample = generate_phantom(cfg.phantom_config(split, i))
            sid = f"{split}-{i}"
            names = (f"{sid}_input.vol", f"{sid}_target.vol", f"{sid}_labels.vol")
            save_volume(sample.input, out / names[0])
            save_volume(sample.target, out / names[1])
            save_labels(sample.labels, out / names[2])
            rows.append((sid, split, *names))
    write_manifest(out / "manifest.txt", cfg, rows)
    print(out / "manifest.txt")
    return 0


def _load_sample(rec) -> SynthSample:
    return SynthSample(load_volume(rec["input"]), load_volume(rec["target"]), load_labels(rec["labels"]))


def cmd_train(args) -> int:
    manifest_cfg, samples = read_manifest(args.manifest)
    cfg = load_config(args.config) if args.config else manifest_cfg
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out(args)
    train = [prepare(_load_sample(r)) for r in samples if r["split"] == "train"]
    if not train:
        raise ConfigError("manifest lists no training samples")
    dataset = [(p.input_std, p.target_std[args.arm], p.mask) for p in train]
    params, trace = nets.train(cfg.arm_train_config(args.arm), cfg.net, dataset)
    bounds = _rescale_bounds(train, args.arm)
    ckpt = out / f"{args.arm}.ckpt"
    nets.save_checkpoint(params, ckpt, dict(zip(("train_min", "train_max", "std_min", "std_max"), bounds)))
    _write_csv(out / f"{args.arm}_loss_trace.csv", ["iteration", "loss"], list(enumerate(trace)))
    print(ckpt)
    return 0


def cmd_predict(args) -> int:
    params, meta = nets.load_checkpoint(args.checkpoint)
    vol = load_volume(args.input)
    div = params.config.divisor
    try:
        vol = crop_to_multiple(vol, div)
    except SpotlightError as exc:
        raise Incompatible(f"input {vol.shape} incompatible with network: {exc}") from None
    inp, _, _ = standardize_mean(vol)
    pred = nets.predict(params, inp.data)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(vol.with_data(pred.astype(np.float32)), out)
    if {"train_min", "train_max", "std_min", "std_max"} <= meta.keys():
        rescaled = rescale_to_target_range(
            pred.astype(np.float64), meta["train_min"], meta["train_max"], meta["std_min"], meta["std_max"]
        )
        save_volume(vol.with_data(rescaled.astype(np.float32)), rescaled_path(out))
    print(out)
    return 0


def rescaled_path(path: Path) -> Path:
    return path.with_name(path.stem + ".rescaled" + path.suffix)


def cmd_segment(args) -> int:
    cfg = _config(args)
    vol = load_volume(args.input)
    labels = postprocess(segment_watershed(vol, cfg.seg), cfg.seg)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_labels(labels, out)
    if args.features:
        feats = extract_features(labels, vol)
        _write_csv(Path(args.features), ["label", *FEATURE_NAMES], [(f.label, *f.vector()) for f in feats])
    print(f"{labels.n_instances} instances -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    pred = load_volume(args.pred)
    target = load_volume(args.target)
    mask = foreground_mask(target, otsu_threshold(target).threshold)
    report = evaluate(pred, target, mask, cfg.frc_bin_delta)
    write_metric_rows(out / "metrics.csv", report.rows(args.sample_id))
    if args.labels:
        gt = load_labels(args.labels)
        seg = postprocess(segment_watershed(pred, cfg.seg), cfg.seg)
        rows = [(r.tau, r.tp, r.fp, r.fn, r.ap) for r in ap_table(seg, gt, cfg.taus)]
        _write_csv(out / "ap.csv", ["tau", "tp", "fp", "fn", "ap"], rows)
    print(out / "metrics.csv")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out(args)
    pred = load_volume(args.pred)
    target = load_volume(args.target)
    gt = load_labels(args.labels)
    mask = foreground_mask(target, otsu_threshold(target).threshold)
    thresholds = tuple(args.thresholds) if args.thresholds else cfg.sweep_thresholds
    rows = threshold_sweep(pred, thresholds, gt, target, cfg.seg, cfg.taus, mask)
    _write_csv(out / "sweep.csv", ["threshold", "metric", "scope", "value"], rows)
    print(out / "sweep.csv")
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    summary = run_experiment(cfg, _out(args))
    for key in sorted(summary):
        print(f"{key}={summary[key]}")
    return 0


def cmd_plot_hist(args) -> int:
    vols = [load_volume(p) for p in args.volumes]
    labels = args.labels or [Path(p).stem for p in args.volumes]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_histogram_svg(vols, args.thresholds or (), out, labels=labels)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotlight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="key=value experiment config file")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate train/test phantoms and a manifest")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one arm on the phantoms of a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arm", choices=ARMS, default="spotlight")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="inference-mode prediction from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("segment", help="watershed segmentation + post-processing")
    common(p, out=False)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--features", help="optional per-instance feature CSV")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="image-quality metrics and AP for one prediction")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--labels", help="ground-truth labels; enables the AP table")
    p.add_argument("--sample-id", default="sample")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="threshold sweep of one prediction")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--thresholds", type=float, nargs="*")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("experiment", help="full baseline vs foreground-aware comparison")
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot-hist", help="overlaid log-scale intensity histograms as SVG")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--thresholds", type=float, nargs="*")
    p.add_argument("--labels", nargs="*")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_plot_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except SpotlightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
