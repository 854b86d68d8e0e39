"""Differentiable per-step losses ``L_t`` and their gradients.

Every loss maps a flat parameter vector of length ``dim`` to a scalar. The
filters call the batched methods (:meth:`LossTask.values` and
:meth:`LossTask.values_and_grads`) with one row per particle; families that
can vectorise over particles override them, everything else falls back to a
left-to-right loop over rows.

MLP parameter layout
--------------------
A model with layer sizes ``(n_0, n_1, ..., n_L)`` is stored as one flat
vector, layer-major. For each layer ``l`` the weight matrix of shape
``(n_{l-1}, n_l)`` comes first (row-major), followed by the bias of length
``n_l``. Hidden layers use a rectifier; the last layer feeds a softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from permfilter.errors import InvalidInputError, NumericalFailureError


def _as_vector(x, dim=None, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise InvalidInputError(f"{name} has length {x.shape[0]}, expected {dim}")
    return x


def _as_rows(X, dim):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dim:
        raise InvalidInputError(f"expected an (N, {dim}) array, got shape {X.shape}")
    return X


class LossTask:
    """One observation ``L_t``: a scalar loss over parameter vectors.

    Subclasses implement :meth:`value_and_grad`; the rest is derived.
    Instances are treated as immutable once built.
    """

    dim: int

    def value_and_grad(self, x):
        raise NotImplementedError

    def evaluate(self, x) -> float:
        return self.value_and_grad(x)[0]

    def gradient(self, x) -> np.ndarray:
        return self.value_and_grad(x)[1]

    def values(self, X) -> np.ndarray:
        X = _as_rows(X, self.dim)
        return np.array([self.evaluate(row) for row in X], dtype=np.float64)

    def values_and_grads(self, X):
        X = _as_rows(X, self.dim)
        out_v = np.empty(X.shape[0])
        out_g = np.empty_like(X)
        for i, row in enumerate(X):
            out_v[i], out_g[i] = self.value_and_grad(row)
        return out_v, out_g


class FunctionLoss(LossTask):
    """Wraps plain callables; mainly for tests and ad-hoc experiments."""

    def __init__(self, dim, fn, grad):
        self.dim = int(dim)
        self._fn = fn
        self._grad = grad

    def value_and_grad(self, x):
        x = _as_vector(x, self.dim)
        return float(self._fn(x)), np.asarray(self._grad(x), dtype=np.float64)


# ---------------------------------------------------------------- linear


def linear_eval_grad(loss: "LinearLoss", x):
    """Return ``(g.x + b, g)``."""
    x = _as_vector(x, loss.dim)
    return float(loss.g @ x + loss.b), loss.g.copy()


class LinearLoss(LossTask):
    def __init__(self, g, b=0.0):
        self.g = _as_vector(g, name="g").copy()
        self.g.setflags(write=False)
        self.b = float(b)
        self.dim = self.g.shape[0]

    def value_and_grad(self, x):
        return linear_eval_grad(self, x)

    def values(self, X):
        X = _as_rows(X, self.dim)
        return X @ self.g + self.b

    def values_and_grads(self, X):
        X = _as_rows(X, self.dim)
        return X @ self.g + self.b, np.broadcast_to(self.g, X.shape).copy()

    def __repr__(self):
        return f"LinearLoss(g={self.g.tolist()}, b={self.b})"


# ------------------------------------------------------------- quadratic


def quadratic_eval_grad(loss: "QuadraticLoss", x):
    x = _as_vector(x, loss.dim)
    r = x - loss.center
    return float(0.5 * np.sum(loss.scale * r * r)), loss.scale * r


class QuadraticLoss(LossTask):
    """``0.5 * sum_j a_j (x_j - c_j)^2`` with per-coordinate curvature ``a > 0``."""

    def __init__(self, center, scale=None):
        self.center = _as_vector(center, name="center").copy()
        self.dim = self.center.shape[0]
        if scale is None:
            scale = np.ones(self.dim)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (self.dim,)).copy()
        if np.any(scale <= 0):
            raise InvalidInputError("quadratic curvature must be strictly positive")
        self.scale = scale

    def value_and_grad(self, x):
        return quadratic_eval_grad(self, x)

    def values(self, X):
        R = _as_rows(X, self.dim) - self.center
        return 0.5 * np.sum(self.scale * R * R, axis=1)

    def values_and_grads(self, X):
        R = _as_rows(X, self.dim) - self.center
        return 0.5 * np.sum(self.scale * R * R, axis=1), self.scale * R


# -------------------------------------------------------------- logistic


def _augment(inputs):
    return np.hstack([inputs, np.ones((inputs.shape[0], 1))])


def logistic_eval_grad(loss: "LogisticLoss", w):
    """Mean of ``log(1 + exp(-y w.x~))`` over the batch, and its gradient.

    ``x~`` is the input with a trailing 1, so the last entry of ``w`` is the bias.
    """
    w = _as_vector(w, loss.dim, name="w")
    margins = loss.labels * (loss._aug @ w)
    value = float(np.mean(np.logaddexp(0.0, -margins)))
    # d/dm log(1+e^{-m}) = -sigmoid(-m)
    coef = -loss.labels * _sigmoid(-margins)
    return value, loss._aug.T @ coef / loss._aug.shape[0]


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class LogisticLoss(LossTask):
    """Binary logistic loss of a linear classifier with labels in {-1, +1}."""

    def __init__(self, inputs, labels):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.float64).ravel()
        if inputs.shape[0] == 0:
            raise InvalidInputError("logistic loss needs a non-empty batch")
        if labels.shape[0] != inputs.shape[0]:
            raise InvalidInputError("inputs and labels disagree on batch size")
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise InvalidInputError("logistic labels must be -1 or +1")
        self.inputs = inputs
        self.labels = labels
        self._aug = _augment(inputs)
        self.dim = self._aug.shape[1]

    def value_and_grad(self, w):
        return logistic_eval_grad(self, w)

    def values_and_grads(self, W):
        W = _as_rows(W, self.dim)
        margins = (W @ self._aug.T) * self.labels  # (N, B)
        vals = np.mean(np.logaddexp(0.0, -margins), axis=1)
        coef = -self.labels * _sigmoid(-margins)
        return vals, coef @ self._aug / self._aug.shape[0]

    def values(self, W):
        W = _as_rows(W, self.dim)
        margins = (W @ self._aug.T) * self.labels
        return np.mean(np.logaddexp(0.0, -margins), axis=1)


def logistic_predict(W, inputs):
    """Predicted labels in {-1, +1} for each row of ``W``; shape ``(N, B)``."""
    W = np.atleast_2d(W)
    scores = W @ _augment(np.atleast_2d(inputs)).T
    return np.where(scores >= 0.0, 1.0, -1.0)


# ------------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MLPSpec:
    """Dense rectifier network with a softmax head, e.g. ``MLPSpec((784, 64, 2))``."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInputError(f"bad layer sizes {self.layer_sizes!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def unpack(self, P):
        """Split an ``(N, n_params)`` array into per-layer ``(W, b)`` views."""
        layers = []
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = P[:, off : off + fan_in * fan_out].reshape(-1, fan_in, fan_out)
            off += fan_in * fan_out
            b = P[:, off : off + fan_out]
            off += fan_out
            layers.append((W, b))
        return layers

    def init_params(self, rng, n=None):
        """Uniform ``+-1/sqrt(fan_in)`` init for weights and biases.

        Returns one vector, or an ``(n, n_params)`` array when ``n`` is given.
        """
        rows = 1 if n is None else int(n)
        out = np.empty((rows, self.n_params))
        for r in range(rows):
            chunks = []
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
                chunks.append(rng.uniform(-bound, bound, size=fan_out))
            out[r] = np.concatenate(chunks)
        return out[0] if n is None else out


def mlp_forward(spec: MLPSpec, P, inputs):
    """Logits of shape ``(N, B, C)`` for parameter rows ``P`` on ``inputs``."""
    P = np.atleast_2d(P)
    h = np.asarray(inputs, dtype=np.float64)[None, :, :]
    layers = spec.unpack(P)
    for k, (W, b) in enumerate(layers):
        h = np.matmul(h, W) + b[:, None, :]
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_predict(spec: MLPSpec, P, inputs):
    """Arg-max class per particle and sample, shape ``(N, B)``."""
    return np.argmax(mlp_forward(spec, P, inputs), axis=-1)


def _mlp_batched(spec, P, inputs, labels, want_grad):
    N = P.shape[0]
    B = inputs.shape[0]
    layers = spec.unpack(P)
    acts = [np.broadcast_to(inputs, (N,) + inputs.shape)]
    pre = []
    h = acts[0]
    for k, (W, b) in enumerate(layers):
        z = np.matmul(h, W) + b[:, None, :]
        pre.append(z)
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(h)
    logits = acts[-1]
    if not np.all(np.isfinite(logits)):
        bad = np.flatnonzero(~np.all(np.isfinite(logits), axis=(1, 2)))
        raise NumericalFailureError(
            f"non-finite activations for particle {int(bad[0])}", particle=int(bad[0])
        )
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(B)
    values = -np.mean(logp[:, rows, labels], axis=1)
    if not want_grad:
        return values, None

    delta = softmax(logits, axis=-1)
    delta[:, rows, labels] -= 1.0
    delta /= B
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        h_in = acts[k]
        gW = np.matmul(np.swapaxes(h_in, 1, 2), delta)
        gb = delta.sum(axis=1)
        grads.append((gW, gb))
        if k > 0:
            delta = np.matmul(delta, np.swapaxes(W, 1, 2))
            delta = delta * (pre[k - 1] > 0.0)
    grads.reverse()
    flat = np.concatenate(
        [np.concatenate([gW.reshape(N, -1), gb], axis=1) for gW, gb in grads], axis=1
    )
    return values, flat


def mlp_eval_grad(loss: "MinibatchLoss", params):
    """Mean softmax cross-entropy over the minibatch and its exact gradient."""
    params = _as_vector(params, loss.dim, name="params")
    v, g = _mlp_batched(loss.spec, params[None, :], loss.inputs, loss.labels, True)
    return float(v[0]), g[0]


class MinibatchLoss(LossTask):
    """Cross-entropy of an :class:`MLPSpec` network on one minibatch.

    Labels are 0-based class indices.
    """

    def __init__(self, inputs, labels, spec: MLPSpec):
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels)
        if inputs.ndim != 2 or inputs.shape[1] != spec.layer_sizes[0]:
            raise InvalidInputError(
                f"inputs shape {inputs.shape} does not match input width {spec.layer_sizes[0]}"
            )
        if labels.shape != (inputs.shape[0],) or inputs.shape[0] == 0:
            raise InvalidInputError("labels must be a non-empty vector matching the batch")
        if labels.min() < 0 or labels.max() >= spec.n_classes:
            raise InvalidInputError(f"labels must lie in [0, {spec.n_classes})")
        self.inputs = inputs
        self.labels = labels.astype(np.intp)
        self.spec = spec
        self.dim = spec.n_params

    def value_and_grad(self, params):
        return mlp_eval_grad(self, params)

    def values(self, P):
        P = _as_rows(P, self.dim)
        return _mlp_batched(self.spec, P, self.inputs, self.labels, False)[0]

    def values_and_grads(self, P):
        P = _as_rows(P, self.dim)
        return _mlp_batched(self.spec, P, self.inputs, self.labels, True)


# ----------------------------------------------------------------- oracle


def finite_diff_grad(loss: LossTask, x, h=1e-5):
    """Central-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise InvalidInputError("finite-difference step must be positive")
    x = _as_vector(x, loss.dim)
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (loss.evaluate(xp) - loss.evaluate(xm)) / (2.0 * h)
    return out
