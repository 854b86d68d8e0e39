"""Command-line entry point: ``permfilter {run,check-theorem3,perm-check,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from permfilter import benchmarks as bm
from permfilter.errors import PermFilterError
from permfilter.filter import EnsembleConfig, init_ensemble, normalize_weights, wpf_run
from permfilter.io import (
    ExperimentConfig,
    emit_results,
    load_config,
    load_mnist,
    read_curves,
    read_scores,
)
from permfilter.oracles import mmd_discrepancy, random_linear_losses, theorem3_check

RATIO_TOL = 1e-8
POSITION_TOL = 1e-9
LOGWEIGHT_TOL = 1e-8
MMD_TOL = 1e-9

log = logging.getLogger("permfilter")


class UsageError(Exception):
    pass


def _option_strings(parser):
    out = []
    for action in parser._actions:
        out.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                out.extend(_option_strings(sub))
    return out


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 with a did-you-mean hint."""

    def error(self, message):
        hint = ""
        if "unrecognized arguments:" in message:
            bad = message.split("unrecognized arguments:", 1)[1].split()
            known = _option_strings(self)
            for b in bad:
                close = difflib.get_close_matches(b.split("=")[0], known, n=1)
                if close:
                    hint += f"\n  did you mean {close[0]!r} instead of {b!r}?"
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}{hint}")


# ------------------------------------------------------------------ run


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for key in ("method", "benchmark", "n_particles", "sigma_sq", "init_noise_std", "epochs_per_task",
                "batch_size", "n_permutations", "output_dir", "max_train_per_task", "head", "prediction"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seeds"] = {k: args.seed for k in cfg.seeds}
    return replace(cfg, **overrides) if overrides else cfg


def build_tasks(cfg: ExperimentConfig, data_dir=None):
    seeds = cfg.seeds
    if cfg.benchmark == "splitmnist":
        data = load_mnist(data_dir)
        return bm.build_splitmnist(data, head=cfg.head, max_train_per_task=cfg.max_train_per_task,
                                   hidden=cfg.hidden_units, seed=seeds["data"])
    syn = cfg.synthetic
    return bm.build_synthetic(k_tasks=int(syn.get("k_tasks", 5)), dim=int(syn.get("dim", 2)),
                              separation=float(syn.get("separation", 4.0)), seed=seeds["data"])


def continual_config(cfg: ExperimentConfig) -> bm.ContinualConfig:
    return bm.ContinualConfig(
        n_particles=cfg.n_particles, sigma_sq=cfg.sigma_sq, init_noise_std=cfg.init_noise_std,
        seed=cfg.seeds["init"], perturb_std=cfg.perturb_std, resample_every=cfg.resample_every,
        prediction=cfg.prediction, init=cfg.init,
    )


def cmd_run(args):
    cfg = _config_from_args(args)
    out = Path(cfg.output_dir)
    if cfg.benchmark == "linear-oracle":
        lo = cfg.linear_oracle
        worst = theorem3_suite(int(lo.get("instances", 20)), int(lo.get("dim", 10)), int(lo.get("steps", 20)),
                               cfg.n_particles, cfg.seeds["init"], cfg.sigma_sq)
        perm = linear_permutation_suite(int(lo.get("dim", 10)), int(lo.get("steps", 20)), cfg.n_particles,
                                        cfg.n_permutations, cfg.seeds["permutation"], cfg.sigma_sq)
        out.mkdir(parents=True, exist_ok=True)
        summary = {"method": cfg.method, "benchmark": cfg.benchmark, "theorem3_max_discrepancy": worst,
                   "permutation": perm, "config": cfg.to_dict(), "seeds": cfg.seeds}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        print(json.dumps({"theorem3_max_discrepancy": worst, **perm}, indent=2))
        return 0
    tasks = build_tasks(cfg, args.data_dir)
    table = bm.run_benchmark(
        cfg.method, tasks, continual_config(cfg), n_permutations=cfg.n_permutations,
        epochs_per_task=cfg.epochs_per_task, batch_size=cfg.batch_size,
        shuffle_seed=cfg.seeds["shuffle"], perm_seed=cfg.seeds["permutation"],
        progress=lambda r, res: print(f"run {r}: order {res.permutation.tolist()} "
                                      f"mean accuracy {res.accuracies.mean():.4f}", flush=True),
    )
    emit_results(table, out, cfg)
    print(f"average accuracy {bm.average_accuracy(table):.4f}")
    if table.scores.shape[1] > 1:
        print(f"normalized variance {bm.normalized_variance(table):.6f}")
    print(f"results written to {out}")
    return 0


# ------------------------------------------------- weight-ratio check


def theorem3_suite(instances, dim, steps, particles, seed, sigma_sq=1e-2, noise=1.0):
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        losses = random_linear_losses(dim, steps, rng)
        cfg = EnsembleConfig(n_particles=particles, sigma_sq=sigma_sq, init_noise_std=noise, seed=seed + k)
        worst = max(worst, theorem3_check(cfg, losses))
    return worst


def cmd_check_theorem3(args):
    for name in ("dim", "steps", "particles", "instances"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    t0 = time.perf_counter()
    worst = theorem3_suite(args.instances, args.dim, args.steps, args.particles, args.seed, args.sigma_sq)
    ok = worst < RATIO_TOL
    print(f"max log-ratio discrepancy: {worst:.3e} ({'PASS' if ok else 'FAIL'} at {RATIO_TOL:g}; "
          f"{args.instances} instance(s), {time.perf_counter() - t0:.2f}s)")
    return 0 if ok else 2


# -------------------------------------------------------- perm-check


def linear_permutation_suite(dim, steps, particles, n_perms, seed, sigma_sq=1e-2):
    """Max spread of WPF output over random orderings of one set of linear losses."""
    rng = np.random.default_rng([seed, 3])
    losses = random_linear_losses(dim, steps, rng)
    ens0 = init_ensemble(EnsembleConfig(particles, sigma_sq, 1.0, seed), np.zeros(dim))
    outs = []
    for p in range(n_perms):
        order = np.arange(steps) if p == 0 else rng.permutation(steps)
        outs.append(normalize_weights(wpf_run(ens0, [losses[i] for i in order])))
    pos = max(float(np.max(np.abs(o.positions - outs[0].positions))) for o in outs)
    lw = max(float(np.max(np.abs(o.log_weights - outs[0].log_weights))) for o in outs)
    mmd = max(mmd_discrepancy(a, b) for i, a in enumerate(outs) for b in outs[i + 1:]) if len(outs) > 1 else 0.0
    return {"max_position_gap": pos, "max_log_weight_gap": lw, "max_mmd": mmd}


def logistic_order_experiment(n_seeds=10, particles=16, sigma_sq=0.05, noise=0.5, epochs=1, batch_size=50,
                              seed=0):
    """Mean MMD between order-swapped runs vs between independently initialised runs.

    Two logistic tasks; for each seed the filter is run (a) from one init on
    both task orders and (b) from a second, independent init on the forward
    order. Returns ``(mean_swap_mmd, mean_independent_mmd)``.
    """
    swap, indep = [], []
    for s in range(n_seeds):
        tasks = bm.build_synthetic(k_tasks=2, dim=2, separation=4.0, seed=seed + s)
        cfg = bm.ContinualConfig(n_particles=particles, sigma_sq=sigma_sq, init_noise_std=noise,
                                 seed=seed + s, init="shared")
        runs = []
        for perm, init_seed in (((0, 1), seed + s), ((1, 0), seed + s), ((0, 1), seed + s + 10_000)):
            seq = bm.TaskSequence(tasks, perm, epochs, batch_size, shuffle_seed=seed + s)
            runs.append(bm.run_continual("wpf", seq, replace(cfg, seed=init_seed)).ensemble)
        swap.append(mmd_discrepancy(runs[0], runs[1]))
        indep.append(mmd_discrepancy(runs[0], runs[2]))
    return float(np.mean(swap)), float(np.mean(indep))


def cmd_perm_check(args):
    ok = True
    if args.suite in ("linear", "all"):
        res = linear_permutation_suite(args.dim, args.steps, args.particles, args.permutations, args.seed)
        lin_ok = (res["max_position_gap"] < POSITION_TOL and res["max_log_weight_gap"] < LOGWEIGHT_TOL
                  and res["max_mmd"] < MMD_TOL)
        ok &= lin_ok
        print(f"linear: position gap {res['max_position_gap']:.2e}, log-weight gap "
              f"{res['max_log_weight_gap']:.2e}, mmd {res['max_mmd']:.2e} -> {'PASS' if lin_ok else 'FAIL'}")
    if args.suite in ("logistic", "all"):
        swap, indep = logistic_order_experiment(n_seeds=args.logistic_seeds, seed=args.seed)
        log_ok = swap < indep
        ok &= log_ok
        print(f"logistic: mean mmd swapped order {swap:.4e} vs independent init {indep:.4e} "
              f"-> {'PASS' if log_ok else 'FAIL'}")
    return 0 if ok else 2


# ------------------------------------------------------------- report


def cmd_report(args):
    d = Path(args.directory)
    scores_path = d / "scores.csv"
    if not scores_path.exists():
        raise FileNotFoundError(f"no scores.csv in {d}")
    tasks, scores = read_scores(scores_path)
    method = ""
    if (d / "summary.json").exists():
        method = json.loads((d / "summary.json").read_text()).get("method", "")
    histories = read_curves(d / "curves.csv") if (d / "curves.csv").exists() else []
    table = bm.MetricsTable(scores, method=method, task_names=tasks, histories=histories)
    print(f"method: {method or '?'}")
    print(f"tasks: {', '.join(tasks)} ({scores.shape[1]} run(s))")
    print(f"average accuracy: {bm.average_accuracy(table):.6f}")
    if scores.shape[1] > 1:
        print(f"normalized variance: {bm.normalized_variance(table):.6f}")
    if histories:
        print("forgetting: " + ", ".join(f"{t}={f:.4f}" for t, f in zip(tasks, bm.mean_forgetting(table))))
    return 0


# --------------------------------------------------------------- main


def build_parser():
    p = _Parser(prog="permfilter", description="Weighted particle filter experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="run a benchmark from a JSON config (flags override)")
    r.add_argument("--config")
    r.add_argument("--method", choices=bm.METHODS)
    r.add_argument("--benchmark", choices=("splitmnist", "synthetic", "linear-oracle"))
    r.add_argument("--n-particles", type=int)
    r.add_argument("--sigma-sq", type=float)
    r.add_argument("--init-noise-std", type=float)
    r.add_argument("--epochs-per-task", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--n-permutations", type=int)
    r.add_argument("--max-train-per-task", type=int)
    r.add_argument("--head", choices=("domain", "class"))
    r.add_argument("--prediction", choices=("mean_accuracy", "vote"))
    r.add_argument("--seed", type=int, help="set every seed to this value")
    r.add_argument("--output-dir", "--out")
    r.add_argument("--data-dir", help="dataset cache root (default $PERMFILTER_DATA_DIR)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("check-theorem3", help="filter log-weight gaps vs exact posterior on linear losses")
    t.add_argument("--dim", type=int, default=10)
    t.add_argument("--steps", type=int, default=20)
    t.add_argument("--particles", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--instances", type=int, default=1)
    t.add_argument("--sigma-sq", type=float, default=1e-2)
    t.set_defaults(func=cmd_check_theorem3)

    q = sub.add_parser("perm-check", help="permutation-invariance suites")
    q.add_argument("--suite", choices=("linear", "logistic", "all"), default="all")
    q.add_argument("--dim", type=int, default=10)
    q.add_argument("--steps", type=int, default=20)
    q.add_argument("--particles", type=int, default=16)
    q.add_argument("--permutations", type=int, default=10)
    q.add_argument("--logistic-seeds", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_perm_check)

    s = sub.add_parser("report", help="re-aggregate an emitted results directory")
    s.add_argument("directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PermFilterError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
