"""Sequential task benchmarks and their metrics.

Training follows the usual continual-learning protocol: tasks are visited
in a permuted order, each for a few epochs of shuffled minibatches, one
filter step per minibatch. Minibatch order inside a task depends only on
the task's canonical index, the epoch and ``shuffle_seed``, so two
permutations see exactly the same minibatches, just in a different task
order. Metrics are always keyed by canonical task index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from permfilter.baselines import ResamplingConfig, averaging_predict, resampling_pf_step
from permfilter.errors import InvalidConfigError, InvalidInputError, NumericalFailureError
from permfilter.filter import (
    Ensemble,
    EnsembleConfig,
    init_ensemble,
    normalize_weights,
    weighted_statistic,
    wpf_step,
)
from permfilter.losses import LogisticLoss, MinibatchLoss, MLPSpec, logistic_predict, mlp_predict

log = logging.getLogger(__name__)

METHODS = ("wpf", "gd", "averaging", "resampling")
SPLITMNIST_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


# ----------------------------------------------------------------- models


class MLPModel:
    """Adapter giving a :class:`MLPSpec` the loss/predict/init surface used here."""

    def __init__(self, spec: MLPSpec):
        self.spec = spec
        self.dim = spec.n_params

    def loss(self, inputs, labels):
        return MinibatchLoss(inputs, labels, self.spec)

    def predict(self, P, inputs):
        return mlp_predict(self.spec, P, inputs)

    def init(self, rng, n):
        return self.spec.init_params(rng, n)


class LogisticModel:
    """Linear classifier on {0, 1} labels (mapped to -1/+1 internally)."""

    def __init__(self, n_features):
        self.dim = int(n_features) + 1

    def loss(self, inputs, labels):
        return LogisticLoss(inputs, 2.0 * np.asarray(labels) - 1.0)

    def predict(self, P, inputs):
        return (logistic_predict(P, inputs) > 0).astype(np.intp)

    def init(self, rng, n):
        bound = 1.0 / np.sqrt(self.dim - 1)
        return rng.uniform(-bound, bound, size=(n, self.dim))


# ------------------------------------------------------------------ tasks


@dataclass
class TaskSpec:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    model: object

    def loss_builder(self, inputs, labels):
        return self.model.loss(inputs, labels)


@dataclass
class TaskSequence:
    tasks: Sequence[TaskSpec]
    permutation: Sequence[int]
    epochs_per_task: int = 1
    batch_size: int = 64
    shuffle_seed: int = 0

    def __post_init__(self):
        K = len(self.tasks)
        perm = np.asarray(self.permutation, dtype=int)
        if perm.shape != (K,) or sorted(perm.tolist()) != list(range(K)):
            raise InvalidInputError(f"permutation {list(self.permutation)} is not a bijection on 0..{K - 1}")
        self.permutation = perm
        if self.epochs_per_task < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs_per_task must be >= 0 and batch_size >= 1")

    def minibatches(self, k, epoch):
        """Index arrays for canonical task ``k`` in ``epoch``."""
        n = self.tasks[k].train_x.shape[0]
        rng = np.random.default_rng([self.shuffle_seed, k, epoch])
        order = rng.permutation(n)
        return [order[i : i + self.batch_size] for i in range(0, n, self.batch_size)]


def build_splitmnist(data, head="domain", max_train_per_task=None, max_test_per_task=None,
                     hidden=64, seed=0) -> list[TaskSpec]:
    """Five binary digit-pair tasks from MNIST.

    ``data`` needs ``train_images``, ``train_labels``, ``test_images`` and
    ``test_labels`` (images flattened or not, already scaled to [0, 1]).
    ``head="domain"`` remaps each pair to labels {0, 1} and shares a two-way
    output; ``head="class"`` keeps the digit as a label with a ten-way output.
    """
    if head not in ("domain", "class"):
        raise InvalidConfigError(f"unknown head {head!r}")
    n_out = 2 if head == "domain" else 10
    tr_x = np.asarray(data.train_images, dtype=np.float64).reshape(len(data.train_labels), -1)
    te_x = np.asarray(data.test_images, dtype=np.float64).reshape(len(data.test_labels), -1)
    tr_y = np.asarray(data.train_labels)
    te_y = np.asarray(data.test_labels)
    model = MLPModel(MLPSpec((tr_x.shape[1], hidden, n_out)))
    rng = np.random.default_rng(seed)
    tasks = []
    for lo, hi in SPLITMNIST_PAIRS:
        parts = []
        for x, y, cap in ((tr_x, tr_y, max_train_per_task), (te_x, te_y, max_test_per_task)):
            idx = np.flatnonzero((y == lo) | (y == hi))
            if not np.any(y[idx] == lo) or not np.any(y[idx] == hi):
                raise InvalidInputError(f"digits {lo} and {hi} must both be present")
            if cap is not None and idx.size > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            labels = (y[idx] == hi).astype(np.intp) if head == "domain" else y[idx].astype(np.intp)
            parts.append((x[idx], labels))
        (a, b), (c, d) = parts
        tasks.append(TaskSpec(f"{lo}v{hi}", a, b, c, d, model))
    return tasks


def build_synthetic(k_tasks=5, dim=2, separation=4.0, seed=0, n_train=500, n_test=200,
                    model=None) -> list[TaskSpec]:
    """Binary tasks made of two unit-variance Gaussian clusters.

    Each task gets a seeded random centre and direction; the class means sit
    ``separation`` apart along that direction. Classes are balanced.
    """
    if not separation > 0:
        raise InvalidInputError("separation must be positive")
    rng = np.random.default_rng(seed)
    model = model or LogisticModel(dim)
    tasks = []
    for k in range(k_tasks):
        centre = rng.normal(0.0, 1.0, dim)
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        means = (centre - 0.5 * separation * u, centre + 0.5 * separation * u)

        def draw(n):
            y = np.arange(n) % 2
            x = np.where(y[:, None] == 1, means[1], means[0]) + rng.normal(size=(n, dim))
            return x, y.astype(np.intp)

        tr_x, tr_y = draw(n_train)
        te_x, te_y = draw(n_test)
        tasks.append(TaskSpec(f"syn{k}", tr_x, tr_y, te_x, te_y, model))
    return tasks


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class ContinualConfig:
    n_particles: int = 20
    sigma_sq: float = 1e-2
    init_noise_std: float = 1e-2
    seed: int = 0
    perturb_std: float = 1e-2
    resample_every: str = "minibatch"
    prediction: str = "mean_accuracy"
    # "independent": every particle gets its own network init; "shared": one init plus noise
    init: str = "independent"

    def __post_init__(self):
        if self.resample_every not in ("minibatch", "task"):
            raise InvalidConfigError(f"resample_every must be 'minibatch' or 'task', got {self.resample_every!r}")
        if self.prediction not in ("mean_accuracy", "vote"):
            raise InvalidConfigError(f"prediction must be 'mean_accuracy' or 'vote', got {self.prediction!r}")
        if self.init not in ("independent", "shared"):
            raise InvalidConfigError(f"init must be 'independent' or 'shared', got {self.init!r}")


@dataclass
class RunResult:
    ensemble: Ensemble
    accuracies: np.ndarray  # final accuracy per canonical task
    history: np.ndarray  # canonical task x checkpoint (one checkpoint after each visited task)
    method: str
    permutation: np.ndarray


class RunAborted(NumericalFailureError):
    def __init__(self, message, task=None, step=None, particle=None):
        super().__init__(message, particle=particle)
        self.task = task
        self.step = step


def initial_ensemble(method, model, config: ContinualConfig) -> Ensemble:
    n = 1 if method == "gd" else config.n_particles
    rng = np.random.default_rng([config.seed, 0])
    if config.init == "independent":
        base = model.init(rng, n)
    else:
        base = model.init(rng, 1)[0]
    ecfg = EnsembleConfig(n_particles=n, sigma_sq=config.sigma_sq,
                          init_noise_std=config.init_noise_std, seed=config.seed)
    return init_ensemble(ecfg, base)


def per_particle_accuracy(model, ensemble, inputs, labels):
    pred = model.predict(ensemble.positions, inputs)
    return np.mean(pred == np.asarray(labels)[None, :], axis=1)


def predictive_accuracy(method, model, ensemble, inputs, labels, prediction="mean_accuracy"):
    """Accuracy of an ensemble on one test set under the method's prediction rule."""
    if method == "gd":
        return float(per_particle_accuracy(model, ensemble, inputs, labels)[0])
    if prediction == "vote":
        pred = model.predict(ensemble.positions, inputs)
        n_cls = int(max(pred.max(), np.max(labels))) + 1
        if method == "averaging":
            w = np.full(ensemble.n_particles, 1.0 / ensemble.n_particles)
        else:
            w = np.exp(normalize_weights(ensemble).log_weights)
        votes = np.zeros((inputs.shape[0], n_cls))
        for i in range(ensemble.n_particles):
            votes[np.arange(inputs.shape[0]), pred[i]] += w[i]
        return float(np.mean(np.argmax(votes, axis=1) == labels))
    accs = per_particle_accuracy(model, ensemble, inputs, labels)
    if method == "averaging":
        return averaging_predict(ensemble, accs)
    return weighted_statistic(normalize_weights(ensemble), accs)


def evaluate_all(method, sequence, ensemble, prediction):
    return np.array([
        predictive_accuracy(method, t.model, ensemble, t.test_x, t.test_y, prediction)
        for t in sequence.tasks
    ])


def run_continual(method: str, sequence: TaskSequence, config: ContinualConfig,
                  progress: Callable | None = None) -> RunResult:
    """Train one method over the permuted task sequence and evaluate every task."""
    if method not in METHODS:
        raise InvalidConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    model = sequence.tasks[0].model
    ens = initial_ensemble(method, model, config)
    rcfg = ResamplingConfig(n_particles=ens.n_particles, perturb_std=config.perturb_std, seed=config.seed)
    rs_rng = np.random.default_rng([config.seed, 1])
    checkpoints = []
    for pos, k in enumerate(sequence.permutation):
        task = sequence.tasks[k]
        batches = [b for e in range(sequence.epochs_per_task) for b in sequence.minibatches(k, e)]
        for step, idx in enumerate(batches):
            loss = task.loss_builder(task.train_x[idx], task.train_y[idx])
            try:
                if method == "resampling":
                    last = step == len(batches) - 1
                    if config.resample_every == "minibatch" or last:
                        ens = resampling_pf_step(ens, loss, rcfg, rng=rs_rng)
                    else:
                        ens = Ensemble(ens.positions, -loss.values(ens.positions), ens.sigma_sq,
                                       ens.step + 1, ens.meta)
                else:
                    ens = wpf_step(ens, loss)
            except NumericalFailureError as exc:
                raise RunAborted(f"{method}: task {task.name} (position {pos}), step {step}: {exc}",
                                 task=task.name, step=step, particle=exc.particle) from exc
        checkpoints.append(evaluate_all(method, sequence, ens, config.prediction))
        if progress is not None:
            progress(pos, task.name, checkpoints[-1])
    if checkpoints:
        history = np.stack(checkpoints, axis=1)
        final = history[:, -1].copy()
    else:
        final = evaluate_all(method, sequence, ens, config.prediction)
        history = final[:, None]
    return RunResult(normalize_weights(ens), final, history, method, sequence.permutation.copy())


def permutations(n_tasks, n_perms, seed):
    """``n_perms`` seeded task orders; the first is the identity."""
    rng = np.random.default_rng([seed, 2])
    out = [np.arange(n_tasks)]
    while len(out) < n_perms:
        out.append(rng.permutation(n_tasks))
    return out[:n_perms]


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsTable:
    scores: np.ndarray  # task x run
    method: str = ""
    task_names: list = field(default_factory=list)
    histories: list = field(default_factory=list)  # one task x checkpoint array per run
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise InvalidInputError("scores must lie in [0, 1]")


def average_accuracy(m: MetricsTable) -> float:
    if m.scores.size == 0:
        raise InvalidInputError("empty metrics table")
    return float(np.mean(m.scores))


def normalized_variance(m: MetricsTable) -> float:
    """Mean over tasks of the across-run sample variance (ddof=1)."""
    if m.scores.shape[1] < 2:
        raise InvalidInputError("variance across runs needs at least two runs")
    return float(np.mean(np.var(m.scores, axis=1, ddof=1)))


def forgetting(history) -> np.ndarray:
    """Best accuracy ever recorded minus final accuracy, per task."""
    h = np.atleast_2d(np.asarray(history, dtype=np.float64))
    return h.max(axis=1) - h[:, -1]


def mean_forgetting(m: MetricsTable) -> np.ndarray:
    """Per-task forgetting averaged over runs."""
    return np.mean([forgetting(h) for h in m.histories], axis=0)


def run_benchmark(method, tasks, config: ContinualConfig, n_permutations=5, epochs_per_task=1,
                  batch_size=64, shuffle_seed=0, perm_seed=0, progress=None) -> MetricsTable:
    """Run ``method`` under ``n_permutations`` task orders and tabulate the results."""
    runs = []
    perms = permutations(len(tasks), n_permutations, perm_seed)
    for r, perm in enumerate(perms):
        seq = TaskSequence(tasks, perm, epochs_per_task, batch_size, shuffle_seed)
        res = run_continual(method, seq, config)
        log.info("%s run %d order %s avg acc %.4f", method, r, perm.tolist(), res.accuracies.mean())
        if progress is not None:
            progress(r, res)
        runs.append(res)
    return MetricsTable(
        scores=np.stack([r.accuracies for r in runs], axis=1),
        method=method,
        task_names=[t.name for t in tasks],
        histories=[r.history for r in runs],
        metadata={
            "permutations": [p.tolist() for p in perms],
            "seed": config.seed,
            "shuffle_seed": shuffle_seed,
            "perm_seed": perm_seed,
        },
    )
