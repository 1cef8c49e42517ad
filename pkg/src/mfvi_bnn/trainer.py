"""Bayes by Backprop on the tempered negative ELBO.

Weights are drawn as ``w = mu + softplus(rho) * z``. The data-term gradient is
obtained by backpropagating through the network and then through the
reparameterization: the ``mu`` chain factor is 1 and the ``rho`` chain factor is
``z * sigmoid(rho)``, sigmoid being the derivative of softplus.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import as_generator, stream
from .data import Dataset, partition_indices
from .elbo import ElboBreakdown, TemperatureSchedule, elbo_estimate, resolve_eta
from .model import Activation, Loss, backprop_batch, kink_mask
from .variational import (
    FactorizedGaussianPrior,
    VariationalPosterior,
    kl_gradient,
    kl_total,
    softplus,
    softplus_grad,
    softplus_inverse,
    transform,
)

KL_MODES = ("closed_form", "monte_carlo")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: "TrainingTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class PosteriorGradient:
    mu_a: np.ndarray
    rho_a: np.ndarray
    mu_b: np.ndarray
    rho_b: np.ndarray

    @property
    def norm_mu(self) -> float:
        return float(math.sqrt(np.sum(self.mu_a**2) + np.sum(self.mu_b**2)))

    @property
    def norm_rho(self) -> float:
        return float(math.sqrt(np.sum(self.rho_a**2) + np.sum(self.rho_b**2)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in (self.mu_a, self.rho_a, self.mu_b, self.rho_b))


@dataclass
class TrainerConfig:
    step_size: float
    iterations: int
    schedule: TemperatureSchedule
    mc_samples: int = 1
    batch_count: int = 1
    seed: int = 0
    kl_mode: str = "closed_form"
    record_every: int = 0
    record_mc_samples: int = 8

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.mc_samples < 1 or self.batch_count < 1:
            raise ValueError("mc_samples and batch_count must be >= 1")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}")


@dataclass
class TraceRow:
    iteration: int
    breakdown: ElboBreakdown
    grad_norm_mu: float
    grad_norm_rho: float


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.rows.append(row)

    COLUMNS = ("iteration", "elbo", "data_term", "kl_term", "eta", "grad_norm_mu", "grad_norm_rho")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                b = r.breakdown
                writer.writerow(
                    [r.iteration]
                    + [repr(float(v)) for v in (b.elbo, b.data_term, b.kl_term, b.eta, r.grad_norm_mu, r.grad_norm_rho)]
                )


def initialize_posterior(
    n: int, d_x: int, d_y: int, seed: int, mean_std: float = 0.01, sigma: float = 1e-3
) -> VariationalPosterior:
    """Means i.i.d. ``N(0, mean_std^2)``, every standard deviation equal to ``sigma``."""
    if min(n, d_x, d_y) < 1:
        raise ValueError("dimensions must be >= 1")
    gen = stream(seed, 0)
    rho = float(softplus_inverse(sigma))
    return VariationalPosterior(
        gen.normal(0.0, mean_std, (n, d_y)),
        np.full((n, d_y), rho),
        gen.normal(0.0, mean_std, (n, d_x)),
        np.full((n, d_x), rho),
    )


def mean_field_step_size(n: int, p: int, eta: float, lr: float, kl_stability: float) -> float:
    """Step size ``min(lr * N / p, kl_stability / eta)``.

    Per-neuron data gradients are O(p / N), so ``lr * N / p`` fixes the speed of
    the data fit independently of N and p; the KL curvature is ``eta / v0``,
    and the second bound keeps plain SGD stable when the KL dominates.
    """
    step = lr * n / p
    return min(step, kl_stability / eta) if eta > 0 else step


def _mc_kl_terms(posterior, prior, w, z):
    """Per-sample ``log q(w) - log P_0(w)`` and its pathwise gradient."""
    value = 0.0
    grads = []
    for wk, mu, rho, zk in (
        (w.a, posterior.mu_a, posterior.rho_a, z[:, posterior.d_x :]),
        (w.b, posterior.mu_b, posterior.rho_b, z[:, : posterior.d_x]),
    ):
        sigma = softplus(rho)
        log_q = -0.5 * zk**2 - np.log(sigma)
        log_p0 = -0.5 * (wk - prior.mean) ** 2 / prior.variance - 0.5 * math.log(prior.variance)
        value += float(np.sum(log_q - log_p0))
        # d/dw of -log P_0, chained through w = mu + sigma * z; log q depends on theta only via -log sigma
        dw = (wk - prior.mean) / prior.variance
        grads.append(dw)
        grads.append((dw * zk - 1.0 / sigma) * softplus_grad(rho))
    return value, grads


def nelbo_and_gradient(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    X,
    Y,
    batch_count: int,
    eta: float,
    loss: Loss,
    act: Activation,
    noise,
    kl_mode: str = "closed_form",
) -> tuple[float, PosteriorGradient]:
    """Fixed-noise minibatch objective and its exact gradient.

    ``noise`` is a sequence of ``M`` arrays of shape ``(N, d_x + d_y)``. The
    objective is ``(1/M) sum_m data(w_m) + (eta / L) * KL`` with the KL either
    in closed form or as the per-sample log-ratio ``log q(w_m) - log P_0(w_m)``.
    """
    noise = [np.asarray(z, dtype=float) for z in noise]
    m = len(noise)
    sig_a, sig_b = softplus_grad(posterior.rho_a), softplus_grad(posterior.rho_b)
    g_mu_a = np.zeros_like(posterior.mu_a)
    g_rho_a = np.zeros_like(posterior.rho_a)
    g_mu_b = np.zeros_like(posterior.mu_b)
    g_rho_b = np.zeros_like(posterior.rho_b)
    value = 0.0
    kl_scale = eta / batch_count
    for z in noise:
        w = transform(posterior, z)
        grad_a, grad_b, data = backprop_batch(w, X, Y, loss, act)
        value += data
        g_mu_a += grad_a
        g_mu_b += grad_b
        g_rho_a += grad_a * z[:, posterior.d_x :] * sig_a
        g_rho_b += grad_b * z[:, : posterior.d_x] * sig_b
        if kl_mode == "monte_carlo" and kl_scale:
            kl_val, (dma, dra, dmb, drb) = _mc_kl_terms(posterior, prior, w, z)
            value += kl_scale * kl_val
            g_mu_a += kl_scale * dma
            g_rho_a += kl_scale * dra
            g_mu_b += kl_scale * dmb
            g_rho_b += kl_scale * drb
    grad = PosteriorGradient(g_mu_a / m, g_rho_a / m, g_mu_b / m, g_rho_b / m)
    value /= m
    if kl_mode == "closed_form" and kl_scale:
        dma, dra, dmb, drb = kl_gradient(posterior, prior)
        grad.mu_a += kl_scale * dma
        grad.rho_a += kl_scale * dra
        grad.mu_b += kl_scale * dmb
        grad.rho_b += kl_scale * drb
        value += kl_scale * kl_total(posterior, prior)
    return value, grad


def elbo_parameter_gradient(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    X,
    Y,
    batch_count: int,
    eta: float,
    loss: Loss,
    act: Activation,
    mc_samples: int,
    rng,
    kl_mode: str = "closed_form",
) -> PosteriorGradient:
    """Stochastic gradient of the rescaled minibatch negative ELBO (fresh noise from ``rng``)."""
    gen = as_generator(rng)
    noise = [gen.standard_normal((posterior.n, posterior.d_x + posterior.d_y)) for _ in range(mc_samples)]
    return nelbo_and_gradient(posterior, prior, X, Y, batch_count, eta, loss, act, noise, kl_mode)[1]


def sgd_update(posterior: VariationalPosterior, grad: PosteriorGradient, step_size: float) -> VariationalPosterior:
    if not grad.is_finite():
        raise TrainingDiverged(
            f"non-finite gradient (|mu| grad norm {grad.norm_mu}, |rho| grad norm {grad.norm_rho})"
        )
    return VariationalPosterior(
        posterior.mu_a - step_size * grad.mu_a,
        posterior.rho_a - step_size * grad.rho_a,
        posterior.mu_b - step_size * grad.mu_b,
        posterior.rho_b - step_size * grad.rho_b,
    )


def train(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    dataset: Dataset,
    config: TrainerConfig,
    loss: Loss,
    act: Activation,
) -> tuple[VariationalPosterior, TrainingTrace]:
    """Run ``config.iterations`` SGD steps cycling over minibatches.

    The data are reshuffled into ``batch_count`` cells at the start of every
    epoch. Iteration ``t`` draws its noise from stream ``(seed, 1, t)``; trace
    records use stream ``(seed, 2, t)``.
    """
    if dataset.p < 1:
        raise ValueError("cannot train on an empty dataset")
    eta = resolve_eta(config.schedule, dataset.p, posterior.n)
    trace = TrainingTrace()
    L = config.batch_count
    cells: list[np.ndarray] = []

    def record(t: int, post: VariationalPosterior, grad: PosteriorGradient | None):
        bd = elbo_estimate(
            post, prior, dataset.features, dataset.targets, loss, act,
            config.schedule, config.record_mc_samples, stream(config.seed, 2, t),
        )
        row = TraceRow(t, bd, grad.norm_mu if grad else math.nan, grad.norm_rho if grad else math.nan)
        trace.append(row)
        if not math.isfinite(bd.elbo):
            raise TrainingDiverged(f"non-finite ELBO at iteration {t}", trace)

    if config.record_every:
        record(0, posterior, None)
    grad = None
    for t in range(config.iterations):
        epoch, k = divmod(t, L)
        if k == 0:
            cells = partition_indices(dataset.p, L, stream(config.seed, 3, epoch))
        idx = cells[k]
        grad = elbo_parameter_gradient(
            posterior, prior, dataset.features[idx], dataset.targets[idx], L, eta,
            loss, act, config.mc_samples, stream(config.seed, 1, t), config.kl_mode,
        )
        try:
            posterior = sgd_update(posterior, grad, config.step_size)
        except TrainingDiverged as exc:
            exc.trace = trace
            raise
        step = t + 1
        if config.record_every and (step % config.record_every == 0 or step == config.iterations):
            record(step, posterior, grad)
    return posterior, trace


@dataclass
class GradientCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst: tuple[str, tuple[int, int]] | None = None


def relative_error(a, b, floor: float = 1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(
    posterior: VariationalPosterior,
    prior: FactorizedGaussianPrior,
    X,
    Y,
    loss: Loss,
    act: Activation,
    eta: float,
    batch_count: int = 1,
    mc_samples: int = 2,
    seed: int = 0,
    step: float = 1e-5,
    kl_mode: str = "closed_form",
    kink_threshold: float = 1e-4,
) -> GradientCheckReport:
    """Compare analytic gradients with central differences of the same fixed-noise objective.

    For ReLU, hidden-weight coordinates of neurons whose pre-activation comes
    within ``kink_threshold`` of zero on any sample are skipped.
    """
    gen = stream(seed, 4)
    noise = [gen.standard_normal((posterior.n, posterior.d_x + posterior.d_y)) for _ in range(mc_samples)]
    _, grad = nelbo_and_gradient(posterior, prior, X, Y, batch_count, eta, loss, act, noise, kl_mode)

    kinked = np.zeros(posterior.n, dtype=bool)
    if act is Activation.RELU:
        for z in noise:
            kinked |= kink_mask(transform(posterior, z), X, kink_threshold)

    def objective(post):
        return nelbo_and_gradient(post, prior, X, Y, batch_count, eta, loss, act, noise, kl_mode)[0]

    worst, worst_at, checked, excluded = 0.0, None, 0, 0
    for name in ("mu_a", "rho_a", "mu_b", "rho_b"):
        analytic = getattr(grad, name)
        for j, c in np.ndindex(analytic.shape):
            if name.endswith("_b") and kinked[j]:
                excluded += 1
                continue
            values = []
            for sign in (1.0, -1.0):
                post = posterior.copy()
                getattr(post, name)[j, c] += sign * step
                values.append(objective(post))
            numeric = (values[0] - values[1]) / (2 * step)
            err = float(relative_error(analytic[j, c], numeric))
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, (j, c))
    return GradientCheckReport(worst, checked, excluded, worst_at)
