"""Run the default comparison for several seeds and collect the summaries."""

import argparse
import dataclasses
from pathlib import Path

from spotlight.experiment import ExperimentConfig, run_experiment


def read_summary(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        key, value = line.split("=", 1)
        out[key] = float(value)
    return out


def run_seeds(seeds, out_dir: Path, iterations=None, force=False) -> dict:
    """Run (or reuse) one experiment per seed; returns seed -> summary."""
    results = {}
    for seed in seeds:
        run_dir = out_dir / f"seed_{seed}"
        summary = run_dir / "summary.txt"
        if force or not summary.exists():
            cfg = dataclasses.replace(ExperimentConfig(), seed=seed)
            if iterations is not None:
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, iterations=iterations))
            run_experiment(cfg, run_dir)
        results[seed] = read_summary(summary)
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)
    results = run_seeds(args.seeds, args.out, args.iterations, args.force)
    keys = sorted(next(iter(results.values())))
    with open(args.out / "seeds.csv", "w") as fh:
        fh.write("seed," + ",".join(keys) + "\n")
        for seed, summary in results.items():
            fh.write(f"{seed}," + ",".join(repr(summary[k]) for k in keys) + "\n")
    for seed, s in results.items():
        print(
            f"seed {seed}: ap@0.5 spotlight={s['spotlight.ap@0.5']:.3f} mse={s['mse.ap@0.5']:.3f} "
            f"runtime={s['runtime_s']:.0f}s"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
