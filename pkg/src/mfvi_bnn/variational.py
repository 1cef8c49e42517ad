"""Mean-field Gaussian variational family over the neurons of a two-layer network.

Each neuron ``j`` carries a diagonal Gaussian over its weights
``w_j = (b_j, a_j)`` with hidden weights ``b_j`` (length ``d_x``) and output
weights ``a_j`` (length ``d_y``). Standard deviations are parameterized as
``sigma = softplus(rho)`` so that the raw parameters are unconstrained.

The noise vector for one neuron is laid out as ``[z_b | z_a]``: the first
``d_x`` coordinates drive the hidden weights, the remaining ``d_y`` the output
weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._rng import as_generator


class ShapeError(ValueError):
    """Array dimensions disagree with the network layout."""


def softplus(rho):
    """``log(1 + exp(rho))`` without overflow for large ``rho``."""
    rho = np.asarray(rho, dtype=float)
    out = np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho)))
    return out[()] if out.ndim == 0 else out


def softplus_inverse(sigma):
    """Raw scale ``rho`` with ``softplus(rho) == sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("softplus_inverse requires sigma > 0")
    # log(exp(s) - 1) = s + log(1 - exp(-s)), stable at both ends
    out = sigma + np.log(-np.expm1(-sigma))
    return out[()] if out.ndim == 0 else out


def softplus_grad(rho):
    """Derivative of ``softplus``, i.e. the logistic sigmoid."""
    return expit(rho)


@dataclass(frozen=True)
class NeuronParams:
    mu_a: np.ndarray
    rho_a: np.ndarray
    mu_b: np.ndarray
    rho_b: np.ndarray

    def __post_init__(self):
        for name in ("mu_a", "rho_a", "mu_b", "rho_b"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.mu_a.shape != self.rho_a.shape or self.mu_b.shape != self.rho_b.shape:
            raise ShapeError("mean and raw-scale vectors must have equal length")
        if np.any(softplus(self.rho_a) <= 0) or np.any(softplus(self.rho_b) <= 0):
            raise ValueError("raw scales so negative that the standard deviation underflows to 0")

    @property
    def d_x(self) -> int:
        return self.mu_b.shape[0]

    @property
    def d_y(self) -> int:
        return self.mu_a.shape[0]

    @property
    def sigma_a(self) -> np.ndarray:
        return softplus(self.rho_a)

    @property
    def sigma_b(self) -> np.ndarray:
        return softplus(self.rho_b)


@dataclass(frozen=True)
class FactorizedGaussianPrior:
    """``N(mean, variance)`` independently on every weight coordinate."""

    mean: float = 0.0
    variance: float = 0.2

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"prior variance must be positive, got {self.variance}")

    def log_density(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float)
        return float(
            -0.5 * np.sum((w - self.mean) ** 2) / self.variance
            - 0.5 * w.size * math.log(2 * math.pi * self.variance)
        )


@dataclass
class WeightSample:
    """One realized weight set: output weights ``a`` (N, d_y), hidden weights ``b`` (N, d_x)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if self.a.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"a has {self.a.shape[0]} neurons but b has {self.b.shape[0]}"
            )

    @property
    def n_neurons(self) -> int:
        return self.a.shape[0]


@dataclass
class VariationalPosterior:
    """Per-neuron Gaussian parameters stored as stacked ``(N, dim)`` arrays.

    Row ``j`` of each array belongs to neuron ``j``; :meth:`neuron` and
    :attr:`neurons` give the per-neuron view.
    """

    mu_a: np.ndarray
    rho_a: np.ndarray
    mu_b: np.ndarray
    rho_b: np.ndarray

    def __post_init__(self):
        for name in ("mu_a", "rho_a", "mu_b", "rho_b"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ShapeError(f"{name} must be 2-D (N, dim), got shape {arr.shape}")
            setattr(self, name, arr)
        n = self.mu_a.shape[0]
        if n < 1:
            raise ShapeError("posterior needs at least one neuron")
        if self.rho_a.shape != self.mu_a.shape or self.rho_b.shape != self.mu_b.shape:
            raise ShapeError("mean and raw-scale arrays must have equal shapes")
        if self.mu_b.shape[0] != n:
            raise ShapeError("output and hidden blocks disagree on N")

    @classmethod
    def from_neurons(cls, neurons) -> "VariationalPosterior":
        neurons = list(neurons)
        if not neurons:
            raise ShapeError("posterior needs at least one neuron")
        d_x, d_y = neurons[0].d_x, neurons[0].d_y
        for k, nu in enumerate(neurons):
            if (nu.d_x, nu.d_y) != (d_x, d_y):
                raise ShapeError(f"neuron {k} has dims ({nu.d_x}, {nu.d_y}), expected ({d_x}, {d_y})")
        return cls(
            np.stack([nu.mu_a for nu in neurons]),
            np.stack([nu.rho_a for nu in neurons]),
            np.stack([nu.mu_b for nu in neurons]),
            np.stack([nu.rho_b for nu in neurons]),
        )

    @classmethod
    def from_prior(cls, prior: FactorizedGaussianPrior, n: int, d_x: int, d_y: int):
        rho = float(softplus_inverse(math.sqrt(prior.variance)))
        return cls(
            np.full((n, d_y), prior.mean),
            np.full((n, d_y), rho),
            np.full((n, d_x), prior.mean),
            np.full((n, d_x), rho),
        )

    @property
    def n(self) -> int:
        return self.mu_a.shape[0]

    @property
    def d_x(self) -> int:
        return self.mu_b.shape[1]

    @property
    def d_y(self) -> int:
        return self.mu_a.shape[1]

    @property
    def sigma_a(self) -> np.ndarray:
        return softplus(self.rho_a)

    @property
    def sigma_b(self) -> np.ndarray:
        return softplus(self.rho_b)

    def neuron(self, j: int) -> NeuronParams:
        return NeuronParams(self.mu_a[j], self.rho_a[j], self.mu_b[j], self.rho_b[j])

    @property
    def neurons(self) -> list[NeuronParams]:
        return [self.neuron(j) for j in range(self.n)]

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(self.mu_a, self.rho_a, self.mu_b, self.rho_b)

    def permuted(self, order) -> "VariationalPosterior":
        order = np.asarray(order)
        return VariationalPosterior(
            self.mu_a[order], self.rho_a[order], self.mu_b[order], self.rho_b[order]
        )

    def to_dict(self) -> dict:
        return {
            "d_x": self.d_x,
            "d_y": self.d_y,
            "N": self.n,
            "neurons": [
                {
                    "mu_a": self.mu_a[j].tolist(),
                    "rho_a": self.rho_a[j].tolist(),
                    "mu_b": self.mu_b[j].tolist(),
                    "rho_b": self.rho_b[j].tolist(),
                }
                for j in range(self.n)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VariationalPosterior":
        neurons = [NeuronParams(**nd) for nd in data["neurons"]]
        post = cls.from_neurons(neurons)
        if (post.n, post.d_x, post.d_y) != (data["N"], data["d_x"], data["d_y"]):
            raise ShapeError(
                f"header says N={data['N']}, d_x={data['d_x']}, d_y={data['d_y']} "
                f"but neurons give N={post.n}, d_x={post.d_x}, d_y={post.d_y}"
            )
        return post

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VariationalPosterior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reparam_transform(theta: NeuronParams, z) -> tuple[np.ndarray, np.ndarray]:
    """Map base noise ``z = [z_b | z_a]`` to the weight pair ``(a_j, b_j)``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (theta.d_x + theta.d_y,):
        raise ShapeError(f"z must have length {theta.d_x + theta.d_y}, got shape {z.shape}")
    z_b, z_a = z[: theta.d_x], z[theta.d_x :]
    return theta.mu_a + theta.sigma_a * z_a, theta.mu_b + theta.sigma_b * z_b


def transform(posterior: VariationalPosterior, z: np.ndarray) -> WeightSample:
    """Vectorized :func:`reparam_transform` for noise ``z`` of shape ``(N, d_x + d_y)``."""
    z = np.asarray(z, dtype=float)
    expected = (posterior.n, posterior.d_x + posterior.d_y)
    if z.shape != expected:
        raise ShapeError(f"z must have shape {expected}, got {z.shape}")
    z_b, z_a = z[:, : posterior.d_x], z[:, posterior.d_x :]
    return WeightSample(
        posterior.mu_a + posterior.sigma_a * z_a,
        posterior.mu_b + posterior.sigma_b * z_b,
    )


def sample_noise(posterior: VariationalPosterior, rng) -> np.ndarray:
    return as_generator(rng).standard_normal((posterior.n, posterior.d_x + posterior.d_y))


def sample_weights(posterior: VariationalPosterior, rng) -> WeightSample:
    return transform(posterior, sample_noise(posterior, rng))


def _kl_coords(mu, sigma, prior: FactorizedGaussianPrior):
    var = sigma**2
    return (var + (mu - prior.mean) ** 2) / (2 * prior.variance) - 0.5 * np.log(var / prior.variance) - 0.5


def kl_neuron(theta: NeuronParams, prior: FactorizedGaussianPrior) -> float:
    """Closed-form ``KL(q_theta || P_0)`` for one neuron."""
    return float(
        np.sum(_kl_coords(theta.mu_a, theta.sigma_a, prior))
        + np.sum(_kl_coords(theta.mu_b, theta.sigma_b, prior))
    )


def kl_per_neuron(posterior: VariationalPosterior, prior: FactorizedGaussianPrior) -> np.ndarray:
    return np.sum(_kl_coords(posterior.mu_a, posterior.sigma_a, prior), axis=1) + np.sum(
        _kl_coords(posterior.mu_b, posterior.sigma_b, prior), axis=1
    )


def kl_total(posterior: VariationalPosterior, prior: FactorizedGaussianPrior) -> float:
    return float(np.sum(kl_per_neuron(posterior, prior)))


def kl_gradient(posterior: VariationalPosterior, prior: FactorizedGaussianPrior):
    """Gradient of :func:`kl_total` as ``(d_mu_a, d_rho_a, d_mu_b, d_rho_b)``."""
    out = []
    for mu, rho in ((posterior.mu_a, posterior.rho_a), (posterior.mu_b, posterior.rho_b)):
        sigma = softplus(rho)
        out.append((mu - prior.mean) / prior.variance)
        out.append((sigma / prior.variance - 1.0 / sigma) * softplus_grad(rho))
    return tuple(out)


def log_q(theta: NeuronParams, a, b) -> float:
    """Log-density of the neuron's Gaussian at the weight pair ``(a, b)``."""
    total = 0.0
    for w, mu, sigma in ((a, theta.mu_a, theta.sigma_a), (b, theta.mu_b, theta.sigma_b)):
        w = np.asarray(w, dtype=float)
        total += float(
            np.sum(-0.5 * ((w - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi))
        )
    return total


def kl_monte_carlo(theta: NeuronParams, prior: FactorizedGaussianPrior, n_samples: int, rng):
    """Monte Carlo ``E_q[log q - log P_0]`` with its standard error."""
    gen = as_generator(rng)
    z = gen.standard_normal((n_samples, theta.d_x + theta.d_y))
    z_b, z_a = z[:, : theta.d_x], z[:, theta.d_x :]
    a = theta.mu_a + theta.sigma_a * z_a
    b = theta.mu_b + theta.sigma_b * z_b
    log_ratio = np.zeros(n_samples)
    for w, zz, sigma in ((a, z_a, theta.sigma_a), (b, z_b, theta.sigma_b)):
        log_qw = -0.5 * zz**2 - np.log(sigma)
        log_p0 = -0.5 * (w - prior.mean) ** 2 / prior.variance - 0.5 * math.log(prior.variance)
        log_ratio += np.sum(log_qw - log_p0, axis=1)
    return float(log_ratio.mean()), float(log_ratio.std(ddof=1) / math.sqrt(n_samples))
