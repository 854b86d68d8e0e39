"""Weighted particle filter driven by gradient steps.

Each particle takes a plain gradient step of size ``sigma_sq`` and has its
weight multiplied by ``exp(-(L(x_new) + L(x_old)) / 2)``. Weights live in the
log domain and are left unnormalized between steps; call
:func:`normalize_weights` when a consumer needs a proper distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from permfilter.errors import (
    ContractError,
    DegenerateEnsembleError,
    InvalidConfigError,
    InvalidInputError,
    NumericalFailureError,
)
from permfilter.losses import LossTask

NORMALIZED_TOL = 1e-12


class Particle(NamedTuple):
    position: np.ndarray
    log_weight: float


@dataclass(frozen=True)
class EnsembleConfig:
    n_particles: int = 100
    # Gaussian variance of each mixture component and, equivalently, the learning rate.
    sigma_sq: float = 1e-2
    init_noise_std: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise InvalidConfigError(f"n_particles must be a positive integer, got {self.n_particles}")
        if not (np.isfinite(self.sigma_sq) and self.sigma_sq > 0):
            raise InvalidConfigError(f"sigma_sq must be > 0, got {self.sigma_sq}")
        if not (np.isfinite(self.init_noise_std) and self.init_noise_std >= 0):
            raise InvalidConfigError(f"init_noise_std must be >= 0, got {self.init_noise_std}")
        if not (0 <= int(self.seed) < 2**64) or int(self.seed) != self.seed:
            raise InvalidConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class Ensemble:
    """Particle population stored column-wise.

    ``positions[i]`` and ``log_weights[i]`` belong to particle ``i``; the index
    is a stable identity across updates.
    """

    positions: np.ndarray
    log_weights: np.ndarray
    sigma_sq: float
    step: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64, ndmin=2)
        self.log_weights = np.array(self.log_weights, dtype=np.float64).reshape(-1)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise InvalidInputError(f"positions must be (N, d) with N >= 1, got {self.positions.shape}")
        if self.log_weights.shape[0] != self.positions.shape[0]:
            raise InvalidInputError("one log-weight per particle is required")
        if not (self.sigma_sq > 0):
            raise InvalidInputError("sigma_sq must be positive")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def particles(self) -> list[Particle]:
        return [Particle(p.copy(), float(w)) for p, w in zip(self.positions, self.log_weights)]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def is_normalized(self, tol=NORMALIZED_TOL) -> bool:
        return abs(float(np.sum(np.exp(self.log_weights))) - 1.0) <= tol

    def copy(self) -> "Ensemble":
        return replace(self, positions=self.positions.copy(), log_weights=self.log_weights.copy(),
                       meta=dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, Ensemble):
            return NotImplemented
        return (
            self.sigma_sq == other.sigma_sq
            and self.step == other.step
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.log_weights, other.log_weights)
        )


def init_ensemble(config: EnsembleConfig, base_position) -> Ensemble:
    """Place ``config.n_particles`` particles around ``base_position``.

    ``base_position`` is either a single vector shared by all particles or an
    ``(N, d)`` array giving each particle its own starting point (e.g.
    independent network initialisations). Seeded Gaussian noise of standard
    deviation ``init_noise_std`` is added per coordinate. All log-weights
    start at 0.
    """
    base = np.asarray(base_position, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise InvalidInputError("base_position contains non-finite entries")
    N = config.n_particles
    if base.ndim == 1:
        base = np.broadcast_to(base, (N, base.shape[0]))
    elif base.ndim != 2 or base.shape[0] != N:
        raise InvalidInputError(f"per-particle base must have shape ({N}, d), got {base.shape}")
    positions = np.array(base, dtype=np.float64)
    if config.init_noise_std > 0:
        rng = np.random.default_rng(config.seed)
        positions += rng.normal(0.0, config.init_noise_std, size=positions.shape)
    return Ensemble(positions, np.zeros(N), config.sigma_sq, 0)


def _check_finite(values, what):
    bad = np.flatnonzero(~np.isfinite(values).reshape(values.shape[0], -1).all(axis=1))
    if bad.size:
        i = int(bad[0])
        raise NumericalFailureError(f"non-finite {what} at particle {i}", particle=i)


def wpf_step(ensemble: Ensemble, loss: LossTask) -> Ensemble:
    """One filter update; returns a new ensemble, the input is not modified."""
    if loss.dim != ensemble.dim:
        raise InvalidInputError(f"loss dimension {loss.dim} != ensemble dimension {ensemble.dim}")
    old_vals, grads = loss.values_and_grads(ensemble.positions)
    _check_finite(old_vals, "loss")
    _check_finite(grads, "gradient")
    new_pos = ensemble.positions - ensemble.sigma_sq * grads
    new_vals = loss.values(new_pos)
    _check_finite(new_vals, "loss after step")
    new_lw = ensemble.log_weights - 0.5 * (new_vals + old_vals)
    _check_finite(new_lw, "log-weight")
    return Ensemble(new_pos, new_lw, ensemble.sigma_sq, ensemble.step + 1, dict(ensemble.meta))


def wpf_run(ensemble: Ensemble, losses: Sequence[LossTask]) -> Ensemble:
    for loss in losses:
        ensemble = wpf_step(ensemble, loss)
    return ensemble


def normalized_log_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise DegenerateEnsembleError("no particle has a finite log-weight")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise InvalidInputError("log-weights must be finite or -inf")
    out = lw - logsumexp(lw)
    # second pass removes the rounding left over when |log_weights| is large
    return out - logsumexp(out)


def normalize_weights(ensemble: Ensemble) -> Ensemble:
    """Rescale so that the weights sum to one (log-sum-exp, overflow free)."""
    out = ensemble.copy()
    out.log_weights = normalized_log_weights(ensemble.log_weights)
    return out


def _require_normalized(ensemble):
    if not ensemble.is_normalized():
        raise ContractError("ensemble weights are not normalized; call normalize_weights first")


def weighted_statistic(ensemble: Ensemble, per_particle_values) -> float:
    """``sum_i w_i v_i`` for a normalized ensemble."""
    v = np.asarray(per_particle_values, dtype=np.float64).reshape(-1)
    if v.shape[0] != ensemble.n_particles:
        raise InvalidInputError(f"expected {ensemble.n_particles} values, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("per-particle values must be finite")
    _require_normalized(ensemble)
    return float(np.dot(np.exp(ensemble.log_weights), v))


def effective_sample_size(ensemble: Ensemble) -> float:
    _require_normalized(ensemble)
    w = np.exp(ensemble.log_weights)
    return float(1.0 / np.dot(w, w))
