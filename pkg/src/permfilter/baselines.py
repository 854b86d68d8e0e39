"""Comparison methods: plain gradient descent, unweighted particle averaging
and a gradient-free resample/perturb/reweight particle filter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from permfilter.errors import DegenerateEnsembleError, InvalidConfigError, InvalidInputError
from permfilter.filter import Ensemble, EnsembleConfig, init_ensemble, wpf_run
from permfilter.losses import LossTask


@dataclass(frozen=True)
class ResamplingConfig:
    n_particles: int = 100
    perturb_std: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise InvalidConfigError(f"n_particles must be a positive integer, got {self.n_particles}")
        if not (np.isfinite(self.perturb_std) and self.perturb_std >= 0):
            raise InvalidConfigError(f"perturb_std must be >= 0, got {self.perturb_std}")


def gd_run(config: EnsembleConfig, losses: Sequence[LossTask], x0) -> Ensemble:
    """Gradient descent with step ``config.sigma_sq``, i.e. the filter with one particle."""
    if config.n_particles != 1:
        raise InvalidConfigError("gradient descent runs with exactly one particle")
    return wpf_run(init_ensemble(config, x0), losses)


def averaging_predict(ensemble: Ensemble, per_particle_values) -> float:
    """Unweighted mean of per-particle values; the weights are ignored."""
    v = np.asarray(per_particle_values, dtype=np.float64).reshape(-1)
    if ensemble.n_particles == 0 or v.size == 0:
        raise InvalidInputError("cannot average over an empty ensemble")
    if v.shape[0] != ensemble.n_particles:
        raise InvalidInputError(f"expected {ensemble.n_particles} values, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("per-particle values must be finite")
    return float(np.sum(v) / v.shape[0])


def resampling_probabilities(loss_values) -> np.ndarray:
    """Selection probabilities proportional to ``exp(-loss)``."""
    lv = np.asarray(loss_values, dtype=np.float64)
    if np.any(np.isnan(lv)):
        raise InvalidInputError("loss values contain NaN")
    logits = -lv
    if not np.any(np.isfinite(logits)):
        raise DegenerateEnsembleError("every particle has infinite loss; nothing to resample")
    p = np.exp(logits - logsumexp(logits))
    return p / p.sum()


def multinomial_indices(probs, n, rng) -> np.ndarray:
    """Ancestor indices for ``n`` draws with replacement, in slot order."""
    return rng.choice(len(probs), size=n, replace=True, p=probs)


def resampling_pf_step(ensemble: Ensemble, loss: LossTask, config: ResamplingConfig,
                       rng=None) -> Ensemble:
    """Resample by ``exp(-L)``, jitter, then set each log-weight to ``-L(x_new)``.

    ``rng`` carries the random stream across steps; when omitted a fresh
    generator is seeded from ``config.seed`` and the ensemble step counter so
    a single call is reproducible on its own.
    """
    if loss.dim != ensemble.dim:
        raise InvalidInputError(f"loss dimension {loss.dim} != ensemble dimension {ensemble.dim}")
    if rng is None:
        rng = np.random.default_rng([config.seed, ensemble.step])
    N = ensemble.n_particles
    probs = resampling_probabilities(loss.values(ensemble.positions))
    idx = multinomial_indices(probs, N, rng)
    pos = ensemble.positions[idx]
    if config.perturb_std > 0:
        pos = pos + rng.normal(0.0, config.perturb_std, size=pos.shape)
    new_vals = loss.values(pos)
    lw = -new_vals
    if not np.any(np.isfinite(lw)):
        raise DegenerateEnsembleError("every perturbed particle has infinite loss")
    meta = dict(ensemble.meta)
    meta["ancestors"] = idx
    return Ensemble(pos, lw, ensemble.sigma_sq, ensemble.step + 1, meta)
