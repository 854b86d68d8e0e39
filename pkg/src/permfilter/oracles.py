"""Ground truth the filter is checked against.

* :func:`unnormalized_log_posterior` evaluates ``log p0(x) - sum_t L_t(x)``
  directly from the losses, never touching filter state.
* :func:`theorem3_check` compares filter log-weight gaps with posterior gaps
  on linear losses, where the two must agree exactly.
* :class:`GridDistribution` runs the exact Bayes update on a 1-D/2-D grid.
* :func:`mmd_discrepancy` is a kernel distance between weighted ensembles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from permfilter.errors import ContractError, InvalidInputError, UnsupportedError
from permfilter.filter import Ensemble, EnsembleConfig, init_ensemble, wpf_run
from permfilter.losses import LinearLoss, LossTask


@dataclass
class LogPosterior:
    """Unnormalized log posterior. ``prior`` is ``"uniform"`` (improper) or
    ``"gaussian"`` with isotropic standard deviation ``prior_std``."""

    losses: Sequence[LossTask] = field(default_factory=list)
    prior: str = "uniform"
    prior_std: float = 1.0

    def __post_init__(self):
        if self.prior not in ("uniform", "gaussian"):
            raise InvalidInputError(f"unknown prior {self.prior!r}")
        if self.prior == "gaussian" and not self.prior_std > 0:
            raise InvalidInputError("prior_std must be positive")

    def log_prior(self, x) -> float:
        if self.prior == "uniform":
            return 0.0
        x = np.asarray(x, dtype=np.float64)
        return float(-0.5 * np.dot(x, x) / self.prior_std**2)


def unnormalized_log_posterior(lp: LogPosterior, x) -> float:
    total = lp.log_prior(x)
    for loss in lp.losses:
        total -= loss.evaluate(x)
    return float(total)


def random_linear_losses(dim, steps, rng, scale=1.0):
    return [LinearLoss(rng.normal(0.0, scale, dim), rng.normal(0.0, scale)) for _ in range(steps)]


def theorem3_check(config: EnsembleConfig, losses: Sequence[LinearLoss], base_position=None,
                   return_ensemble=False):
    """Largest disagreement between filter and posterior log-ratios.

    Runs the filter over ``losses`` from ``base_position`` (zeros by default)
    under a uniform prior and returns

        max_{i,j} |(log w_i - log w_j) - (log p_T(x_i) - log p_T(x_j))|

    which is zero in exact arithmetic for linear losses.
    """
    if any(not isinstance(loss, LinearLoss) for loss in losses):
        raise InvalidInputError("exact weight/posterior agreement only holds for linear losses")
    if not losses:
        raise InvalidInputError("need at least one loss")
    dim = losses[0].dim
    if base_position is None:
        base_position = np.zeros(dim)
    ens = wpf_run(init_ensemble(config, base_position), losses)
    lp = LogPosterior(list(losses))
    post = np.array([unnormalized_log_posterior(lp, x) for x in ens.positions])
    lw = ens.log_weights
    worst = 0.0
    for i in range(ens.n_particles):
        for j in range(i + 1, ens.n_particles):
            gap = abs((lw[i] - lw[j]) - (post[i] - post[j]))
            worst = max(worst, gap)
    return (worst, ens) if return_ensemble else worst


# ------------------------------------------------------------------ grid


@dataclass
class GridDistribution:
    """Point masses on the cell centres of a 1-D or 2-D tensor grid."""

    axes: tuple
    log_mass: np.ndarray

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        if not 1 <= len(self.axes) <= 2:
            raise UnsupportedError("grid oracle supports one or two dimensions")
        shape = tuple(a.size for a in self.axes)
        self.log_mass = np.asarray(self.log_mass, dtype=np.float64).reshape(shape)

    @classmethod
    def uniform(cls, lows, highs, cells):
        lows, highs, cells = np.atleast_1d(lows), np.atleast_1d(highs), np.atleast_1d(cells)
        axes = tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in zip(lows, highs, cells))
        shape = tuple(a.size for a in axes)
        return cls(axes, np.full(shape, -np.log(np.prod(shape))))

    @property
    def dim(self):
        return len(self.axes)

    @property
    def cell_widths(self):
        return np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in self.axes])

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def masses(self):
        return np.exp(self.log_mass - logsumexp(self.log_mass))

    def mean(self):
        return self.masses().ravel() @ self.points()

    def std(self):
        pts = self.points()
        m = self.masses().ravel()
        mu = m @ pts
        return np.sqrt(m @ (pts - mu) ** 2)

    def argmax_point(self):
        return self.points()[int(np.argmax(self.log_mass))]


def grid_bayes_update(grid: GridDistribution, loss: LossTask) -> GridDistribution:
    """Multiply by ``exp(-L)`` at every cell centre and renormalize."""
    if grid.dim > 2:
        raise UnsupportedError("grid oracle supports at most two dimensions")
    if loss.dim != grid.dim:
        raise InvalidInputError(f"loss dimension {loss.dim} != grid dimension {grid.dim}")
    lm = grid.log_mass.ravel() - loss.values(grid.points())
    lm = lm - logsumexp(lm)
    return GridDistribution(grid.axes, lm.reshape(grid.log_mass.shape))


# ------------------------------------------------------------------- MMD


def median_bandwidth(a: Ensemble, b: Ensemble) -> float:
    """Median pairwise distance over the union of both ensembles (1.0 if all coincide)."""
    pts = np.vstack([a.positions, b.positions])
    if pts.shape[0] < 2:
        return 1.0
    d = pdist(pts)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _weights(ens):
    if not ens.is_normalized():
        raise ContractError("mmd_discrepancy expects normalized ensembles")
    return np.exp(ens.log_weights)


def _mmd_sq_direct(A, w, B, v, s):
    kaa = np.exp(-s * cdist(A, A, "sqeuclidean"))
    kbb = np.exp(-s * cdist(B, B, "sqeuclidean"))
    kab = np.exp(-s * cdist(A, B, "sqeuclidean"))
    return w @ kaa @ w + v @ kbb @ v - 2.0 * (w @ kab @ v)


def _mmd_sq_paired(A, lwa, B, lwb, s):
    """Same quantity as :func:`_mmd_sq_direct` for equally sized ensembles,
    expanded around the pairing ``A[i] <-> B[i]``.

    With ``u_i = phi(a_i) - phi(b_i)`` and ``dw_i = w_i - v_i``,
    ``mu_a - mu_b = sum_i dw_i phi(a_i) + v_i u_i``. Every inner product is
    written as products of ``expm1`` terms, so the result keeps its relative
    accuracy when the two ensembles nearly coincide.
    """
    w = np.exp(lwa)
    v = np.exp(lwb)
    dw = -w * np.expm1(lwb - lwa)
    delta = A - B
    kaa = np.exp(-s * cdist(A, A, "sqeuclidean"))
    G = A @ delta.T  # G[i, j] = a_i . delta_j
    gdiag = np.diag(G)
    dd = delta @ delta.T
    nd = np.diag(dd)
    # e = a_i - a_j;  p: |a_i-b_j|^2 - |e|^2,  q: |b_i-a_j|^2 - |e|^2
    e_dot_dj = G - gdiag[None, :]
    e_dot_di = gdiag[:, None] - G.T
    p = -s * (2.0 * e_dot_dj + nd[None, :])
    q = -s * (-2.0 * e_dot_di + nd[:, None])
    eps = 2.0 * s * dd
    m1 = -kaa * np.expm1(p)  # <phi(a_i), u_j>
    uu = kaa * (np.expm1(p) * np.expm1(q) + np.exp(p + q) * np.expm1(eps))  # <u_i, u_j>
    return dw @ kaa @ dw + 2.0 * (dw @ m1 @ v) + v @ uu @ v


def mmd_discrepancy(a: Ensemble, b: Ensemble, bandwidth=None) -> float:
    """Maximum mean discrepancy between two normalized weighted ensembles.

    Gaussian kernel ``exp(-|x-y|^2 / (2 bandwidth^2))``; ``bandwidth=None``
    selects the median-distance heuristic. Returns the square root of the
    squared MMD, clamped at zero. Exactly symmetric in its arguments.
    """
    if a.dim != b.dim:
        raise InvalidInputError("ensembles must share a dimension")
    if bandwidth is not None and not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    # canonical argument order makes the float result exactly symmetric
    if (a.positions.tobytes(), a.log_weights.tobytes()) > (b.positions.tobytes(), b.log_weights.tobytes()):
        a, b = b, a
    _weights(a), _weights(b)
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    s = 1.0 / (2.0 * bandwidth**2)
    if a.n_particles == b.n_particles:
        sq = _mmd_sq_paired(a.positions, a.log_weights, b.positions, b.log_weights, s)
    else:
        sq = _mmd_sq_direct(a.positions, _weights(a), b.positions, _weights(b), s)
    return float(np.sqrt(max(sq, 0.0)))
