"""Monte Carlo estimation of the tempered ELBO.

The objective is ``ELBO = -data_term - eta * kl_term`` where ``data_term`` is
the expected summed loss under the variational posterior and ``kl_term`` the
closed-form KL to the prior. The likelihood normalizer is dropped, so ELBO
values are defined up to a global constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import children
from .model import Activation, Loss, forward_batch, losses
from .variational import (
    FactorizedGaussianPrior,
    VariationalPosterior,
    kl_total,
    sample_weights,
)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Cooling parameter: either a fixed ``eta`` or ``eta = tau * p / N``."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("fixed", "scaled"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not self.value >= 0 or not math.isfinite(self.value):
            raise ValueError(f"schedule parameter must be finite and >= 0, got {self.value}")

    @classmethod
    def fixed(cls, eta: float) -> "TemperatureSchedule":
        return cls("fixed", float(eta))

    @classmethod
    def scaled(cls, tau: float) -> "TemperatureSchedule":
        if not tau > 0:
            raise ValueError("tau must be positive")
        return cls("scaled", float(tau))

    @classmethod
    def from_dict(cls, d: dict) -> "TemperatureSchedule":
        if d.get("mode") == "fixed":
            return cls.fixed(d.get("eta", 1.0))
        if d.get("mode") == "scaled":
            return cls.scaled(d["tau"])
        raise ValueError(f"schedule needs mode 'fixed' or 'scaled', got {d!r}")

    def to_dict(self) -> dict:
        key = "eta" if self.mode == "fixed" else "tau"
        return {"mode": self.mode, key: self.value}

    def label(self) -> str:
        return f"eta={self.value:g}" if self.mode == "fixed" else f"tau={self.value:g}"


def resolve_eta(schedule: TemperatureSchedule, p: int, n: int) -> float:
    if p < 1 or n < 1:
        raise ValueError(f"need p >= 1 and N >= 1, got p={p}, N={n}")
    if schedule.mode == "fixed":
        return schedule.value
    return schedule.value * p / n


@dataclass(frozen=True)
class ElboBreakdown:
    data_term: float
    kl_term: float
    eta: float
    mc_samples: int
    std_error_data_term: float

    @property
    def elbo(self) -> float:
        return -self.data_term - self.eta * self.kl_term

    @property
    def nelbo(self) -> float:
        return -self.elbo

    def to_dict(self) -> dict:
        return {
            "elbo": self.elbo,
            "data_term": self.data_term,
            "kl_term": self.kl_term,
            "eta": self.eta,
            "mc_samples": self.mc_samples,
            "std_error_data_term": self.std_error_data_term,
        }


def data_term_samples(
    posterior: VariationalPosterior, X, Y, loss: Loss, act: Activation, mc_samples: int, rng
) -> np.ndarray:
    """Summed loss for each of ``mc_samples`` replicates.

    One noise draw per replicate is shared by all data points; replicate ``r``
    uses child stream ``r`` of ``rng``.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    X = np.asarray(X, dtype=float).reshape(-1, posterior.d_x)
    out = np.zeros(mc_samples)
    if X.shape[0] == 0:
        return out
    for r, gen in enumerate(children(rng, mc_samples)):
        w = sample_weights(posterior, gen)
        out[r] = np.sum(losses(loss, Y, forward_batch(w, X, act)))
    return out


def estimate_data_term(
    posterior: VariationalPosterior, X, Y, loss: Loss, act: Activation, mc_samples: int, rng
) -> tuple[float, float]:
    """Unbiased estimate of ``sum_i E_q[loss(y_i, f_w(x_i))]`` and its standard error.

    The standard error is NaN for a single replicate.
    """
    samples = data_term_samples(posterior, X, Y, loss, act, mc_samples, rng)
    if mc_samples == 1:
        return float(samples[0]), math.nan
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(mc_samples))


def elbo_estimate(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    X,
    Y,
    loss: Loss,
    act: Activation,
    schedule: TemperatureSchedule,
    mc_samples: int,
    rng,
) -> ElboBreakdown:
    p = np.asarray(X).reshape(-1, posterior.d_x).shape[0]
    data, se = estimate_data_term(posterior, X, Y, loss, act, mc_samples, rng)
    return ElboBreakdown(
        data_term=data,
        kl_term=kl_total(posterior, prior),
        eta=resolve_eta(schedule, max(p, 1), posterior.n),
        mc_samples=mc_samples,
        std_error_data_term=se,
    )


def minibatch_nelbo(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    X_batch,
    Y_batch,
    batch_count: int,
    eta: float,
    loss: Loss,
    act: Activation,
    mc_samples: int,
    rng,
) -> float:
    """Rescaled negative ELBO for one cell of an ``L``-way partition.

    ``eta`` is the already-resolved cooling parameter for the full dataset,
    so that summing over all cells estimates the full negative ELBO.
    """
    if batch_count < 1:
        raise ValueError("batch_count must be >= 1")
    data, _ = estimate_data_term(posterior, X_batch, Y_batch, loss, act, mc_samples, rng)
    return eta * kl_total(posterior, prior) / batch_count + data


def balance_ratio(breakdown: ElboBreakdown) -> float:
    """``eta * KL / data_term``; infinite when the data term vanishes."""
    if breakdown.data_term == 0:
        return math.inf
    return breakdown.eta * breakdown.kl_term / breakdown.data_term
