"""GD vs WPF average accuracy across init noise levels on SplitMNIST.

    python scripts/sweep_init_noise.py --noise 0.01,0.1 --max-train-per-task 2000
"""

import argparse
import sys

from permfilter import benchmarks as bm
from permfilter.io import load_mnist


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noise", default="0.0,0.01,0.1")
    ap.add_argument("--particles", type=int, default=20)
    ap.add_argument("--sigma-sq", type=float, default=1e-2)
    ap.add_argument("--permutations", type=int, default=5)
    ap.add_argument("--init", choices=("independent", "shared"), default="independent")
    ap.add_argument("--max-train-per-task", type=int)
    ap.add_argument("--data-dir")
    args = ap.parse_args(argv)

    tasks = bm.build_splitmnist(load_mnist(args.data_dir), max_train_per_task=args.max_train_per_task)
    print("noise,method,average_accuracy,normalized_variance")
    for noise in (float(s) for s in args.noise.split(",")):
        cfg = bm.ContinualConfig(n_particles=args.particles, sigma_sq=args.sigma_sq, init_noise_std=noise,
                                 init=args.init)
        for method in ("gd", "wpf"):
            t = bm.run_benchmark(method, tasks, cfg, n_permutations=args.permutations)
            print(f"{noise},{method},{bm.average_accuracy(t):.4f},{bm.normalized_variance(t):.5f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
