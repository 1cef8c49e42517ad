"""Objectives over empirical measures of neuron parameters.

An :class:`EmpiricalMeasure` puts mass ``1/N`` on each atom ``theta_j``. The
averaged neuron output ``phi_bar(theta, x) = E_z[a * act(<b, x>)]`` factorizes
into ``mu_a * E[act(U)]`` with ``U ~ N(<mu_b, x>, sum_l sigma_b,l^2 x_l^2)``;
for ReLU that expectation is closed form, for sigmoid it uses 64-point
Gauss-Hermite quadrature.

``G~`` is the loss of the mean prediction; the measure-level objective is
``F~ = -sum_i G~_i - eta * n * mean_j KL_j``. For the square loss with ReLU the
difference between ``F~`` and the exact ELBO of the same parameters is the
total prediction variance ``(1/N^2) sum_i sum_j Var_j(x_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import erfc

from ._rng import as_generator, stream
from .data import Dataset
from .model import Activation, Loss, losses
from .variational import (
    FactorizedGaussianPrior,
    NeuronParams,
    VariationalPosterior,
    kl_per_neuron,
    softplus_inverse,
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GH_NODES, _GH_WEIGHTS = hermgauss(64)


class UnsupportedConfiguration(ValueError):
    pass


def normal_cdf(t):
    return 0.5 * erfc(-np.asarray(t, dtype=float) / _SQRT2)


def normal_pdf(t):
    # beyond |t| = 40 the density is below the smallest double anyway
    t = np.clip(np.asarray(t, dtype=float), -40.0, 40.0)
    return _INV_SQRT_2PI * np.exp(-0.5 * t * t)


@dataclass(frozen=True)
class GaussianReluMoments:
    m: float
    s: float
    e1: float
    e2: float


def _relu_moments(m, s):
    m = np.asarray(m, dtype=float)
    s = np.asarray(s, dtype=float)
    pos = s > 0
    safe_s = np.where(pos, s, 1.0)
    # a subnormal s sends t to +-inf, where cdf and pdf take their exact limits
    with np.errstate(over="ignore"):
        t = m / safe_s
    cdf, pdf = normal_cdf(t), normal_pdf(t)
    e1 = np.where(pos, m * cdf + safe_s * pdf, np.maximum(m, 0.0))
    e2 = np.where(pos, (m * m + s * s) * cdf + m * safe_s * pdf, np.maximum(m, 0.0) ** 2)
    return e1, e2


def relu_gaussian_moments(m: float, s: float) -> GaussianReluMoments:
    """First two moments of ``max(0, U)`` for ``U ~ N(m, s^2)``."""
    if s < 0:
        raise ValueError("standard deviation must be non-negative")
    e1, e2 = _relu_moments(m, s)
    return GaussianReluMoments(float(m), float(s), float(e1), float(e2))


def _gh_expectation(f, m, s):
    """``E[f(U)]`` for ``U ~ N(m, s^2)`` by Gauss-Hermite quadrature (broadcasts)."""
    m = np.asarray(m, dtype=float)[..., None]
    s = np.asarray(s, dtype=float)[..., None]
    vals = f(m + _SQRT2 * s * _GH_NODES)
    return vals @ _GH_WEIGHTS / math.sqrt(math.pi)


def preactivation_stats(posterior: VariationalPosterior, X) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of ``<b_j, x_i>``, each of shape ``(p, N)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = X @ posterior.mu_b.T
    s = np.sqrt((X * X) @ (posterior.sigma_b**2).T)
    return m, s


def activation_moments(posterior: VariationalPosterior, X, act: Activation):
    """``E[act(<b_j, x_i>)]`` and ``E[act(<b_j, x_i>)^2]``, shape ``(p, N)`` each."""
    m, s = preactivation_stats(posterior, X)
    if act is Activation.RELU:
        return _relu_moments(m, s)
    return _gh_expectation(act, m, s), _gh_expectation(lambda u: act(u) ** 2, m, s)


class EmpiricalMeasure:
    """Uniform measure on the ``N`` atoms of a variational posterior."""

    def __init__(self, atoms):
        if isinstance(atoms, VariationalPosterior):
            self.atoms = atoms
        else:
            self.atoms = VariationalPosterior.from_neurons(atoms)

    @property
    def n(self) -> int:
        return self.atoms.n

    def mean_kl(self, prior: FactorizedGaussianPrior) -> float:
        return float(np.mean(kl_per_neuron(self.atoms, prior)))


def _atoms(nu) -> VariationalPosterior:
    return nu.atoms if isinstance(nu, EmpiricalMeasure) else nu


def phi_bar(theta: NeuronParams, x, act: Activation) -> np.ndarray:
    post = VariationalPosterior.from_neurons([theta])
    e1, _ = activation_moments(post, np.asarray(x, dtype=float)[None, :], act)
    return theta.mu_a * e1[0, 0]


def phi_variance_scalar(theta: NeuronParams, x, act: Activation = Activation.RELU) -> float:
    """``E||a h - phi_bar||^2`` summed over output coordinates."""
    post = VariationalPosterior.from_neurons([theta])
    e1, e2 = activation_moments(post, np.asarray(x, dtype=float)[None, :], act)
    ea2 = np.sum(theta.mu_a**2) + np.sum(theta.sigma_a**2)
    return float(ea2 * e2[0, 0] - np.sum(theta.mu_a**2) * e1[0, 0] ** 2)


def phi_variance_matrix(posterior: VariationalPosterior, X, act: Activation = Activation.RELU) -> np.ndarray:
    """:func:`phi_variance_scalar` for every ``(x_i, theta_j)``; shape ``(p, N)``."""
    e1, e2 = activation_moments(posterior, X, act)
    ea2 = np.sum(posterior.mu_a**2, axis=1) + np.sum(posterior.sigma_a**2, axis=1)
    mu2 = np.sum(posterior.mu_a**2, axis=1)
    # clip round-off below zero when the variance vanishes
    return np.maximum(ea2 * e2 - mu2 * e1 * e1, 0.0)


def mean_prediction(nu, X, act: Activation) -> np.ndarray:
    """``(1/N) sum_j phi_bar(theta_j, x_i)`` for every row; shape ``(p, d_y)``."""
    post = _atoms(nu)
    e1, _ = activation_moments(post, X, act)
    return e1 @ post.mu_a / post.n


def g_tilde_batch(nu, X, Y, loss: Loss, act: Activation) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        return np.zeros(0)
    return losses(loss, Y, mean_prediction(nu, X, act))


def g_tilde(nu, x, y, loss: Loss, act: Activation) -> float:
    return float(g_tilde_batch(nu, np.asarray(x, dtype=float)[None, :], np.atleast_1d(y)[None, ...], loss, act)[0])


def f_tilde(nu, X, Y, prior: FactorizedGaussianPrior, eta: float, n: int, loss: Loss, act: Activation) -> float:
    post = _atoms(nu)
    data = float(np.sum(g_tilde_batch(post, X, Y, loss, act)))
    return -data - eta * n * float(np.mean(kl_per_neuron(post, prior)))


def f_tau_p(nu, X, Y, prior: FactorizedGaussianPrior, tau: float, loss: Loss, act: Activation) -> float:
    post = _atoms(nu)
    g = g_tilde_batch(post, X, Y, loss, act)
    if g.size == 0:
        raise ValueError("need at least one data point")
    return -float(np.mean(g)) - tau * float(np.mean(kl_per_neuron(post, prior)))


def r_tau_estimate(
    nu,
    sampler,
    tau: float,
    mc_draws: int | None,
    rng,
    loss: Loss,
    act: Activation,
    prior: FactorizedGaussianPrior,
    chunk: int = 65536,
) -> tuple[float, float]:
    """Monte Carlo estimate of the population objective with its standard error.

    ``sampler`` is either a callable ``(k, rng) -> (X, Y)`` drawing i.i.d. pairs
    or a :class:`Dataset` standing for its empirical distribution; with a
    dataset and ``mc_draws=None`` every row is used exactly once.
    """
    post = _atoms(nu)
    penalty = tau * float(np.mean(kl_per_neuron(post, prior)))
    if isinstance(sampler, Dataset):
        if mc_draws is None:
            g = g_tilde_batch(post, sampler.features, sampler.targets, loss, act)
        else:
            idx = as_generator(rng).integers(0, sampler.p, mc_draws)
            g = g_tilde_batch(post, sampler.features[idx], sampler.targets[idx], loss, act)
    else:
        if mc_draws is None or mc_draws < 1:
            raise ValueError("a sampling distribution needs mc_draws >= 1")
        gen = as_generator(rng)
        parts = []
        remaining = mc_draws
        while remaining:
            k = min(chunk, remaining)
            X, Y = sampler(k, gen)
            parts.append(g_tilde_batch(post, X, Y, loss, act))
            remaining -= k
        g = np.concatenate(parts)
    se = float(g.std(ddof=1) / math.sqrt(g.size)) if g.size > 1 else math.nan
    return -float(np.mean(g)) - penalty, se


def require_square_relu(loss: Loss, act: Activation) -> None:
    if loss is not Loss.SQUARE or act is not Activation.RELU:
        raise UnsupportedConfiguration(
            f"exact gap needs square loss with ReLU, got {loss.value}/{act.value}; "
            "use mc_gap_estimate instead"
        )


def theorem3_gap_exact(posterior: VariationalPosterior, X, act: Activation = Activation.RELU, loss: Loss = Loss.SQUARE) -> float:
    """``F~(nu_N) - ELBO`` in closed form, i.e. ``(1/N^2) sum_i sum_j Var_j(x_i)``.

    Non-negative and independent of the cooling parameter.
    """
    require_square_relu(loss, act)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        return 0.0
    return float(np.sum(phi_variance_matrix(posterior, X, act)) / posterior.n**2)


def exact_data_term(posterior: VariationalPosterior, X, Y, act: Activation = Activation.RELU, loss: Loss = Loss.SQUARE) -> float:
    """``sum_i E_q ||y_i - f_w(x_i)||^2`` without Monte Carlo (square loss, ReLU)."""
    require_square_relu(loss, act)
    bias = float(np.sum(g_tilde_batch(posterior, X, Y, loss, act)))
    return bias + theorem3_gap_exact(posterior, X, act, loss)


def exact_elbo(posterior: VariationalPosterior, prior: FactorizedGaussianPrior, X, Y, eta: float) -> float:
    return -exact_data_term(posterior, X, Y) - eta * float(np.sum(kl_per_neuron(posterior, prior)))


def mc_gap_estimate(posterior: VariationalPosterior, X, Y, loss: Loss, act: Activation, mc_samples: int, rng):
    """``F~(nu_N) - ELBO`` by Monte Carlo for any loss; returns ``(value, std_error)``."""
    from .elbo import estimate_data_term

    data, se = estimate_data_term(posterior, X, Y, loss, act, mc_samples, rng)
    return data - float(np.sum(g_tilde_batch(posterior, X, Y, loss, act))), se


# ---------------------------------------------------------------------------
# experiments


def default_atom_sampler(
    d_x: int,
    d_y: int,
    mu_a_mean: float = 1.0,
    mu_b_norm: float = 0.5,
    mean_spread: float = 0.1,
    sigma: float = 0.5,
):
    """Sampler of i.i.d. atoms with means scattered around a common point.

    ``mu_a ~ N(mu_a_mean, spread^2)``, ``mu_b ~ N(mu_b_norm / sqrt(d_x), spread^2)``
    coordinate-wise, every standard deviation equal to ``sigma``.
    """
    rho = float(softplus_inverse(sigma))

    def sample(n: int, rng) -> VariationalPosterior:
        gen = as_generator(rng)
        return VariationalPosterior(
            gen.normal(mu_a_mean, mean_spread, (n, d_y)),
            np.full((n, d_y), rho),
            gen.normal(mu_b_norm / math.sqrt(d_x), mean_spread, (n, d_x)),
            np.full((n, d_x), rho),
        )

    return sample


@dataclass(frozen=True)
class ScalingRow:
    n: int
    p: int
    gap: float
    gap_times_n_over_p: float


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)[0])


def theorem3_scaling_experiment(atom_sampler, X, n_grid, seed: int) -> tuple[list[ScalingRow], float]:
    """Exact gap for i.i.d. atom draws over ``n_grid``; returns rows and the log-log slope.

    A single pool of ``max(n_grid)`` atoms is drawn and each ``N`` uses its
    first ``N`` atoms.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_grid = sorted(int(n) for n in n_grid)
    pool = atom_sampler(n_grid[-1], stream(seed, 20))
    p = X.shape[0]
    rows = []
    for n in n_grid:
        atoms = VariationalPosterior(pool.mu_a[:n], pool.rho_a[:n], pool.mu_b[:n], pool.rho_b[:n])
        gap = theorem3_gap_exact(atoms, X)
        rows.append(ScalingRow(n, p, gap, gap * n / p))
    return rows, loglog_slope([r.n for r in rows], [r.gap for r in rows])


def f_tilde_weighted(atoms: VariationalPosterior, weights, X, Y, prior, eta: float, n: int, loss: Loss, act: Activation) -> float:
    """``F~`` for a measure with arbitrary weights on a finite atom family."""
    weights = np.asarray(weights, dtype=float)
    e1, _ = activation_moments(atoms, X, act)
    pred = (e1 * weights) @ atoms.mu_a
    data = float(np.sum(losses(loss, Y, pred)))
    return -data - eta * n * float(weights @ kl_per_neuron(atoms, prior))


def maximize_over_atom_family(atoms: VariationalPosterior, X, Y, prior, eta: float, n: int, loss: Loss, act: Activation):
    """Best mixture weights over a finite atom family; returns ``(weights, F~ value)``.

    ``F~`` is concave in the weights, so a local search over the simplex from
    uniform weights reaches the maximum. Vertices are compared explicitly
    because the optimum often sits on the boundary.
    """
    k = atoms.n

    def value(w):
        return f_tilde_weighted(atoms, w, X, Y, prior, eta, n, loss, act)

    res = minimize(
        lambda w: -value(w), np.full(k, 1.0 / k), method="SLSQP", bounds=[(0.0, 1.0)] * k,
        constraints=({"type": "eq", "fun": lambda w: np.sum(w) - 1.0},), options={"ftol": 1e-14, "maxiter": 1000},
    )
    w = np.clip(res.x, 0.0, None)
    candidates = [w / w.sum()] + list(np.eye(k))
    best = max(candidates, key=value)
    return best, value(best)
