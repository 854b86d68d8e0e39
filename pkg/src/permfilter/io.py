"""File formats: MNIST IDX, ensemble checkpoints, experiment configs, results."""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from permfilter.errors import FormatError, InvalidConfigError, InvalidInputError
from permfilter.filter import Ensemble

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
# sha256 of the uncompressed canonical files
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


# -------------------------------------------------------------------- IDX


def parse_idx(buf: bytes):
    """Decode an unsigned-byte IDX blob.

    Returns ``(dims, payload)`` where ``payload`` is a uint8 array of shape
    ``dims``. Header: big-endian magic (``0x00000803`` images, ``0x00000801``
    labels) followed by one big-endian uint32 per dimension.
    """
    if len(buf) < 4:
        raise FormatError("IDX file shorter than its magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims))
    got = len(buf) - header
    if got != expected:
        raise FormatError(f"IDX payload has {got} bytes, header promises {expected}")
    payload = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    return tuple(dims), payload


def read_idx(path, scale=True):
    """Read an IDX file; image payloads are rescaled to float64 in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if path.suffix == ".gz":
        import gzip

        buf = gzip.decompress(buf)
    dims, payload = parse_idx(buf)
    if scale and len(dims) == 3:
        return dims, payload.astype(np.float64) / 255.0
    return dims, payload


def write_idx(path, array):
    """Write a uint8 array of rank 1 (labels) or 3 (images) as IDX."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InvalidInputError("IDX writer only handles unsigned bytes")
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise InvalidInputError("IDX writer supports rank 1 or rank 3 arrays")
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


class MNISTData(NamedTuple):
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def data_dir(override=None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get("PERMFILTER_DATA_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "permfilter"


def mnist_dir(root=None) -> Path:
    return data_dir(root) / "mnist"


def mnist_available(root=None) -> bool:
    d = mnist_dir(root)
    return all((d / f).exists() or (d / (f + ".gz")).exists() for f in MNIST_FILES.values())


def load_mnist(root=None) -> MNISTData:
    d = mnist_dir(root)
    out = {}
    for key, fname in MNIST_FILES.items():
        path = d / fname
        if not path.exists() and (d / (fname + ".gz")).exists():
            path = d / (fname + ".gz")
        if not path.exists():
            raise FileNotFoundError(
                f"{d / fname} not found; run scripts/fetch_mnist.py or set PERMFILTER_DATA_DIR"
            )
        dims, payload = read_idx(path)
        out[key] = payload.reshape(dims[0], -1) if len(dims) == 3 else payload
    return MNISTData(**out)


# ------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"WPF1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIdQ")  # magic, version, N, d, sigma_sq, step


def checkpoint_size(n, d) -> int:
    return _HEADER.size + n * (8 + 8 * d)


def checkpoint_bytes(ensemble: Ensemble) -> bytes:
    if not (np.all(np.isfinite(ensemble.positions)) and np.all(np.isfinite(ensemble.log_weights))
            and np.isfinite(ensemble.sigma_sq)):
        raise InvalidInputError("refusing to checkpoint an ensemble with non-finite values")
    N, d = ensemble.positions.shape
    records = np.empty((N, d + 1), dtype="<f8")
    records[:, 0] = ensemble.log_weights
    records[:, 1:] = ensemble.positions
    head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, N, d, float(ensemble.sigma_sq), int(ensemble.step))
    return head + records.tobytes()


def write_checkpoint(ensemble: Ensemble, path):
    Path(path).write_bytes(checkpoint_bytes(ensemble))


def parse_checkpoint(buf: bytes) -> Ensemble:
    if len(buf) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, N, d, sigma_sq, step = _HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(buf) != checkpoint_size(N, d):
        raise FormatError(f"checkpoint is {len(buf)} bytes, header implies {checkpoint_size(N, d)}")
    rec = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(N, d + 1)
    return Ensemble(rec[:, 1:].astype(np.float64), rec[:, 0].astype(np.float64), sigma_sq, step)


def read_checkpoint(path) -> Ensemble:
    return parse_checkpoint(Path(path).read_bytes())


# ----------------------------------------------------------------- config

BENCHMARKS = ("splitmnist", "synthetic", "linear-oracle")


@dataclass
class ExperimentConfig:
    method: str = "wpf"
    benchmark: str = "synthetic"
    n_particles: int = 20
    sigma_sq: float = 1e-2
    init_noise_std: float = 1e-2
    epochs_per_task: int = 1
    batch_size: int = 64
    n_permutations: int = 5
    seeds: dict = field(default_factory=lambda: {"init": 0, "shuffle": 0, "permutation": 0, "data": 0})
    output_dir: str = "results"
    perturb_std: float = 1e-2
    resample_every: str = "minibatch"
    prediction: str = "mean_accuracy"
    init: str = "independent"
    head: str = "domain"
    hidden_units: int = 64
    max_train_per_task: int | None = None
    synthetic: dict = field(default_factory=lambda: {"k_tasks": 5, "dim": 2, "separation": 4.0})
    linear_oracle: dict = field(default_factory=lambda: {"dim": 10, "steps": 20, "instances": 20})

    def __post_init__(self):
        from permfilter.benchmarks import METHODS

        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.benchmark not in BENCHMARKS:
            raise InvalidConfigError(f"benchmark must be one of {BENCHMARKS}, got {self.benchmark!r}")
        for name in ("n_particles", "batch_size", "n_permutations", "hidden_units"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.epochs_per_task, int) or self.epochs_per_task < 0:
            raise InvalidConfigError("epochs_per_task must be a non-negative integer")
        if not (isinstance(self.sigma_sq, (int, float)) and self.sigma_sq > 0):
            raise InvalidConfigError("sigma_sq must be > 0")
        for name in ("init_noise_std", "perturb_std"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v >= 0):
                raise InvalidConfigError(f"{name} must be >= 0")
        if self.max_train_per_task is not None and self.max_train_per_task < 1:
            raise InvalidConfigError("max_train_per_task must be positive when set")
        missing = {"init", "shuffle", "permutation", "data"} - set(self.seeds)
        if missing:
            raise InvalidConfigError(f"seeds is missing {sorted(missing)}")
        for k, v in self.seeds.items():
            if not isinstance(v, int) or not 0 <= v < 2**64:
                raise InvalidConfigError(f"seed {k!r} must be an unsigned 64-bit integer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- results


def emit_results(m, out_dir, config: ExperimentConfig | None = None, extra=None):
    """Write ``scores.csv``, ``curves.csv`` and ``summary.json`` into ``out_dir``."""
    from permfilter.benchmarks import average_accuracy, mean_forgetting, normalized_variance

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        names = m.task_names or [str(k) for k in range(m.scores.shape[0])]
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "run", "accuracy"])
            for k in range(m.scores.shape[0]):
                for r in range(m.scores.shape[1]):
                    w.writerow([names[k], r, f"{m.scores[k, r]:.6f}"])
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "checkpoint", "task", "accuracy"])
            for r, h in enumerate(m.histories):
                for c in range(h.shape[1]):
                    for k in range(h.shape[0]):
                        w.writerow([r, c, names[k], f"{h[k, c]:.6f}"])
        summary = {
            "method": m.method,
            "tasks": names,
            "average_accuracy": average_accuracy(m),
            "normalized_variance": normalized_variance(m) if m.scores.shape[1] > 1 else None,
            "forgetting": mean_forgetting(m).tolist() if m.histories else [],
            "config": config.to_dict() if config is not None else None,
            "seeds": config.seeds if config is not None else m.metadata.get("seeds"),
            "metadata": m.metadata,
        }
        if extra:
            summary.update(extra)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"could not write results to {out}: {exc}") from exc
    return [out / "scores.csv", out / "curves.csv", out / "summary.json"]


def read_scores(path):
    """Rebuild the task x run score matrix from ``scores.csv``."""
    rows = list(csv.DictReader(open(path, newline="")))
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    runs = sorted({int(r["run"]) for r in rows})
    scores = np.zeros((len(tasks), len(runs)))
    for r in rows:
        scores[tasks.index(r["task"]), runs.index(int(r["run"]))] = float(r["accuracy"])
    return tasks, scores


def read_curves(path):
    """Per-run task x checkpoint histories from ``curves.csv``."""
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        return []
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    by_run = {}
    for r in rows:
        by_run.setdefault(int(r["run"]), []).append(r)
    out = []
    for run in sorted(by_run):
        n_ck = max(int(r["checkpoint"]) for r in by_run[run]) + 1
        h = np.zeros((len(tasks), n_ck))
        for r in by_run[run]:
            h[tasks.index(r["task"]), int(r["checkpoint"])] = float(r["accuracy"])
        out.append(h)
    return out
