"""Two-layer network with mean-field output scaling.

The prediction is ``f(x) = (1/N) * sum_j a_j * act(<b_j, x>)``. Targets for the
square loss are real vectors; for cross-entropy they are 1-based class labels
and the network output is the logit vector.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.special import expit, log_softmax, softmax

from ._rng import children
from .variational import ShapeError, VariationalPosterior, WeightSample, sample_weights

__all__ = [
    "Activation",
    "Loss",
    "WeightSample",
    "neuron_output",
    "forward",
    "forward_batch",
    "loss_value",
    "loss_gradient",
    "losses",
    "loss_gradients",
    "backprop_weights",
    "backprop_batch",
    "predictive_probabilities",
    "predictive_mean",
    "kink_mask",
]


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self is Activation.RELU:
            return np.maximum(t, 0.0)
        return expit(t)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self is Activation.RELU:
            # subgradient 0 at the kink
            return (t > 0).astype(float)
        s = expit(t)
        return s * (1.0 - s)

    @property
    def lipschitz(self) -> float:
        return 1.0 if self is Activation.RELU else 0.25


class Loss(str, Enum):
    SQUARE = "square"
    CROSS_ENTROPY = "cross_entropy"


def _label_index(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (np.any(y != np.round(y)) or y.min() < 1 or y.max() > n_classes):
        raise ValueError(f"class labels must be integers in 1..{n_classes}, got {y}")
    return y.astype(int) - 1


def neuron_output(a, b, x, act: Activation) -> np.ndarray:
    a, b, x = (np.asarray(v, dtype=float) for v in (a, b, x))
    if b.shape != x.shape:
        raise ShapeError(f"hidden weights {b.shape} do not match input {x.shape}")
    return a * act(np.dot(b, x))


def forward_batch(w: WeightSample, X, act: Activation) -> np.ndarray:
    """Network outputs for every row of ``X``; shape ``(p, d_y)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != w.b.shape[1]:
        raise ShapeError(f"inputs have {X.shape[1]} features, network expects {w.b.shape[1]}")
    return act(X @ w.b.T) @ w.a / w.n_neurons


def forward(w: WeightSample, x, act: Activation) -> np.ndarray:
    return forward_batch(w, np.asarray(x, dtype=float)[None, :], act)[0]


def losses(loss: Loss, Y, F) -> np.ndarray:
    """Per-row loss values for targets ``Y`` and predictions ``F`` of shape ``(p, d_y)``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if loss is Loss.SQUARE:
        Y = np.asarray(Y, dtype=float).reshape(F.shape)
        return np.sum((Y - F) ** 2, axis=1)
    idx = _label_index(Y, F.shape[1]).reshape(F.shape[0])
    return -log_softmax(F, axis=1)[np.arange(F.shape[0]), idx]


def loss_gradients(loss: Loss, Y, F) -> np.ndarray:
    """Per-row gradients of the loss with respect to the prediction."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if loss is Loss.SQUARE:
        Y = np.asarray(Y, dtype=float).reshape(F.shape)
        return 2.0 * (F - Y)
    idx = _label_index(Y, F.shape[1]).reshape(F.shape[0])
    g = softmax(F, axis=1)
    g[np.arange(F.shape[0]), idx] -= 1.0
    return g


def loss_value(loss: Loss, y, yhat) -> float:
    return float(losses(loss, np.atleast_1d(y)[None, ...], np.asarray(yhat, dtype=float)[None, :])[0])


def loss_gradient(loss: Loss, y, yhat) -> np.ndarray:
    return loss_gradients(loss, np.atleast_1d(y)[None, ...], np.asarray(yhat, dtype=float)[None, :])[0]


def backprop_batch(w: WeightSample, X, Y, loss: Loss, act: Activation):
    """Gradient of ``sum_i loss(y_i, f_w(x_i))`` with respect to ``(a, b)``.

    Returns ``(grad_a, grad_b, total_loss)``. An empty batch yields zeros.
    """
    X = np.asarray(X, dtype=float).reshape(-1, w.b.shape[1])
    if X.shape[0] == 0:
        return np.zeros_like(w.a), np.zeros_like(w.b), 0.0
    n = w.n_neurons
    pre = X @ w.b.T
    h = act(pre)
    F = h @ w.a / n
    G = loss_gradients(loss, Y, F)
    grad_a = h.T @ G / n
    upstream = (G @ w.a.T) / n * act.derivative(pre)
    grad_b = upstream.T @ X
    return grad_a, grad_b, float(np.sum(losses(loss, Y, F)))


def backprop_weights(w: WeightSample, x, y, loss: Loss, act: Activation):
    """Gradient of ``loss(y, f_w(x))`` for one example; returns ``(grad_a, grad_b)``."""
    grad_a, grad_b, _ = backprop_batch(
        w, np.asarray(x, dtype=float)[None, :], np.atleast_1d(y)[None, ...], loss, act
    )
    return grad_a, grad_b


def kink_mask(w: WeightSample, X, threshold: float = 1e-4) -> np.ndarray:
    """Neurons whose pre-activation is within ``threshold`` of zero on some input."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        return np.zeros(w.n_neurons, dtype=bool)
    return np.any(np.abs(X @ w.b.T) < threshold, axis=0)


def _mc_outputs(posterior: VariationalPosterior, X, m: int, rng, act: Activation, link):
    if m < 1:
        raise ValueError("need at least one prediction sample")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = None
    for gen in children(rng, m):
        out = link(forward_batch(sample_weights(posterior, gen), X, act))
        total = out if total is None else total + out
    return total / m


def predictive_probabilities(
    posterior: VariationalPosterior, X, m: int, rng, act: Activation
) -> np.ndarray:
    """Monte Carlo posterior predictive ``(1/m) sum_l softmax(f_{w_l}(x))``.

    ``X`` may be one input or a batch; the weight draw ``l`` is shared by all
    inputs. Returns ``(n_l,)`` or ``(p, n_l)`` accordingly.
    """
    single = np.ndim(X) == 1
    probs = _mc_outputs(posterior, X, m, rng, act, lambda F: softmax(F, axis=1))
    return probs[0] if single else probs


def predictive_mean(posterior: VariationalPosterior, X, m: int, rng, act: Activation) -> np.ndarray:
    single = np.ndim(X) == 1
    out = _mc_outputs(posterior, X, m, rng, act, lambda F: F)
    return out[0] if single else out
