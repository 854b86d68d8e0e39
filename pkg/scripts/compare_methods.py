"""Run every method on one benchmark and print a comparison table.

    python scripts/compare_methods.py --benchmark splitmnist --out results/compare
    python scripts/compare_methods.py --benchmark synthetic --particles 10

Each method's raw results (scores.csv, curves.csv, summary.json) go into
``<out>/<method>/``; the table is also written to ``<out>/comparison.csv``.
"""

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from permfilter import benchmarks as bm
from permfilter.cli import build_tasks, continual_config
from permfilter.io import ExperimentConfig, emit_results, load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base JSON config; flags below override it")
    ap.add_argument("--benchmark", choices=("splitmnist", "synthetic"))
    ap.add_argument("--methods", default=",".join(bm.METHODS))
    ap.add_argument("--particles", type=int)
    ap.add_argument("--sigma-sq", type=float)
    ap.add_argument("--permutations", type=int)
    ap.add_argument("--max-train-per-task", type=int)
    ap.add_argument("--data-dir")
    ap.add_argument("--out", default="results/compare")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"benchmark": args.benchmark, "n_particles": args.particles, "sigma_sq": args.sigma_sq,
                 "n_permutations": args.permutations, "max_train_per_task": args.max_train_per_task}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    tasks = build_tasks(cfg, args.data_dir)
    out = Path(args.out)

    rows = []
    for method in args.methods.split(","):
        t0 = time.perf_counter()
        mcfg = replace(cfg, method=method, output_dir=str(out / method))
        table = bm.run_benchmark(method, tasks, continual_config(mcfg), n_permutations=cfg.n_permutations,
                                 epochs_per_task=cfg.epochs_per_task, batch_size=cfg.batch_size,
                                 shuffle_seed=cfg.seeds["shuffle"], perm_seed=cfg.seeds["permutation"])
        emit_results(table, out / method, mcfg)
        row = {
            "method": method,
            "average_accuracy": bm.average_accuracy(table),
            "normalized_variance": bm.normalized_variance(table) if cfg.n_permutations > 1 else float("nan"),
            "mean_forgetting": float(np.mean(bm.mean_forgetting(table))),
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        print(f"{method:<11} acc {row['average_accuracy']:.4f}  var {row['normalized_variance']:.5f}  "
              f"forgetting {row['mean_forgetting']:.4f}  ({row['seconds']:.0f}s)", flush=True)

    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
