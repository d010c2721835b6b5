"""Bayesian meta-learning: Gibbs posteriors, free energy, SVGD and BMAML.

Particle sets are ``(M, d)`` arrays, one particle per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .core import NumericError, adam_step, as_stream, check_finite


# ---------------------------------------------------------------------------
# Finite hypothesis spaces


@dataclass(frozen=True)
class DiscreteDistribution:
    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if len(self.support) == 0 or len(self.support) != p.size:
            raise ValueError("support and probabilities must be non-empty and aligned")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to one")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, support):
        n = len(support)
        return cls(tuple(support), np.full(n, 1.0 / n))


def _probs(d):
    return d.probs if isinstance(d, DiscreteDistribution) else np.asarray(d, dtype=np.float64)


def gibbs_posterior(prior, losses, beta=1.0):
    """``p(phi) ~ prior(phi) exp(-beta L(phi))`` normalized in the log domain."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    q = _probs(prior)
    losses = np.asarray(losses, dtype=np.float64)
    if q.shape != losses.shape:
        raise ValueError("prior and losses differ in size")
    if not np.any(q > 0):
        raise ValueError("prior has no mass")
    with np.errstate(divide="ignore"):
        logw = np.log(q) - beta * losses
    p = np.exp(logw - logsumexp(logw))
    p = p / p.sum()
    if isinstance(prior, DiscreteDistribution):
        return DiscreteDistribution(prior.support, p)
    return p


def kl_divergence(q, p) -> float:
    q, p = _probs(q), _probs(p)
    mask = q > 0
    if np.any(p[mask] == 0):
        return math.inf
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def variational_free_energy(q, log_lik, prior) -> float:
    """``-E_q[log p(D|phi)] + KL(q || prior)``."""
    qv = _probs(q)
    ll = np.asarray(log_lik, dtype=np.float64)
    mask = qv > 0
    return float(-np.sum(qv[mask] * ll[mask]) + kl_divergence(q, prior))


# ---------------------------------------------------------------------------
# SVGD


def median_bandwidth(particles):
    """``h = med^2 / log(M + 1)`` over pairwise distances; 1 when undefined."""
    X = np.atleast_2d(particles)
    M = len(X)
    if M < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    h = med * med / math.log(M + 1)
    return h if h > 0 else 1.0


def rbf_kernel(X, h):
    """Kernel matrix ``k[m, i] = exp(-||x_m - x_i||^2 / h)``."""
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.exp(-d2 / h)


def svgd_direction(X, scores, h):
    """Stein direction at every particle (without the step size)."""
    M = len(X)
    Kmat = rbf_kernel(X, h)
    # sum_m grad_{x_m} k(x_m, x_i) = (2/h) sum_m k_mi (x_i - x_m)
    repulse = (2.0 / h) * (X * Kmat.sum(axis=0)[:, None] - Kmat.T @ X)
    out = (Kmat.T @ scores + repulse) / M
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite SVGD direction")
    return out


def svgd_step(particles, grad_log_p: Callable, alpha, bandwidth="median"):
    """One SVGD update. ``grad_log_p`` maps the ``(M, d)`` array to its scores."""
    X = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if alpha == 0:
        return X.copy()
    h = median_bandwidth(X) if bandwidth == "median" else float(bandwidth)
    scores = np.asarray(grad_log_p(X), dtype=np.float64).reshape(X.shape)
    return X + alpha * svgd_direction(X, scores, h)


# ---------------------------------------------------------------------------
# BMAML


def _n_samples(obj):
    return len(obj.y) if hasattr(obj, "y") else int(obj.n_samples)


def _n_out(obj):
    y = np.asarray(obj.y)
    return 1 if y.ndim == 1 else y.shape[1]


@dataclass(frozen=True)
class BmamlConfig:
    alpha: float = 1e-3          # inner SVGD step
    beta: float = 1e-3           # outer step
    sigma2: float = 0.1          # observation noise variance
    gamma: float = 1.0           # prior precision around the particle mean
    bandwidth: object = "median"
    meta_batch_size: int = 1
    n_meta_iters: int = 1
    optimizer: str = "sgd"       # or "adam"


def task_scores(task, X, cfg: BmamlConfig):
    """Gradient of the task log posterior at each particle."""
    c = _n_samples(task.train) / (2.0 * cfg.sigma2)
    mean = X.mean(axis=0)
    return np.array([-c * task.train.grad(x) for x in X]) - cfg.gamma * (X - mean)


def bmaml_adapt(task, X, cfg: BmamlConfig, h=None):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if h is None:
        h = median_bandwidth(X) if cfg.bandwidth == "median" else float(cfg.bandwidth)
    if cfg.alpha == 0:
        return X.copy()
    return X + cfg.alpha * svgd_direction(X, task_scores(task, X, cfg), h)


def gaussian_log_lik(obj, phi, sigma2):
    n, q = _n_samples(obj), _n_out(obj)
    return -n * obj.loss(phi) / (2 * sigma2) - 0.5 * n * q * math.log(2 * math.pi * sigma2)


def bmaml_task_loss(task, X, cfg: BmamlConfig, h=None) -> float:
    """``-log mean_m p(D_va | phi_m)`` for the adapted particles."""
    Phi = bmaml_adapt(task, X, cfg, h)
    a = np.array([gaussian_log_lik(task.val, p, cfg.sigma2) for p in Phi])
    return float(-(logsumexp(a) - math.log(len(a))))


def bmaml_task_gradient(task, X, cfg: BmamlConfig, h=None):
    """Loss and its gradient with respect to every prior particle.

    Differentiates through one SVGD step; the bandwidth is held fixed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M, d = X.shape
    if h is None:
        h = median_bandwidth(X) if cfg.bandwidth == "median" else float(cfg.bandwidth)
    S = task_scores(task, X, cfg)
    Kmat = rbf_kernel(X, h)
    a_step = cfg.alpha
    Phi = X + a_step * svgd_direction(X, S, h) if a_step else X.copy()

    nva = _n_samples(task.val)
    cva = nva / (2.0 * cfg.sigma2)
    a = np.array([gaussian_log_lik(task.val, p, cfg.sigma2) for p in Phi])
    loss = float(-(logsumexp(a) - math.log(M)))
    w = np.exp(a - logsumexp(a))
    G = np.array([w[m] * cva * task.val.grad(Phi[m]) for m in range(M)])
    if not a_step:
        return loss, G

    c = a_step / M
    ctr = _n_samples(task.train) / (2.0 * cfg.sigma2)
    grad = G.copy()

    # driving term sum_m k_mi s_m: through the scores
    U = Kmat @ G                                   # u_m = sum_i k_mi G_i
    HU = np.array([task.train.hvp(X[m], U[m]) for m in range(M)])
    grad += c * (-ctr * HU - cfg.gamma * U + cfg.gamma * U.sum(axis=0) / M)

    # ... and through the kernel weights; dk_mi/dx_m = -(2/h) k_mi D_mi, D_mi = x_m - x_i
    P = (S @ G.T) * Kmat                           # k_mi (s_m . G_i)
    grad += c * (-2.0 / h) * (X * P.sum(axis=1)[:, None] - P @ X)
    grad += c * (2.0 / h) * (P.T @ X - X * P.sum(axis=0)[:, None])

    # repulsive term -(2/h) k_mi (D_mi . G_i)
    XG = X @ G.T
    Q = XG - np.diag(XG)[None, :]                  # Q[m, i] = D_mi . G_i
    R = Kmat * Q
    # d/dx_m: -(2/h)[-(2/h) k_mi D_mi Q_mi + k_mi G_i]
    grad += c * (-2.0 / h) * ((-2.0 / h) * (X * R.sum(axis=1)[:, None] - R @ X) + Kmat @ G)
    # d/dx_i: -(2/h)[(2/h) k_mi D_mi Q_mi - k_mi G_i]
    grad += c * (-2.0 / h) * ((2.0 / h) * (R.T @ X - X * R.sum(axis=0)[:, None])
                              - Kmat.sum(axis=0)[:, None] * G)
    return loss, check_finite(grad, "BMAML gradient")


@dataclass
class ParticleState:
    particles: np.ndarray
    iteration: int = 0
    trace: list = field(default_factory=list)
    moments: tuple = None


def bmaml_meta_train(tasks: Sequence, particles0, cfg: BmamlConfig, rng, callback=None):
    """Outer gradient descent on the particle prior; batches as in meta_train."""
    rng = as_stream(rng)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    K = len(tasks)
    if cfg.meta_batch_size > K:
        raise ValueError("meta_batch_size exceeds number of tasks")
    state = ParticleState(np.array(np.atleast_2d(particles0), dtype=np.float64))
    for it in range(cfg.n_meta_iters):
        stream = rng.child(it)
        idx = np.sort(stream.child(0).generator().choice(K, cfg.meta_batch_size, replace=False))
        X = state.particles
        h = median_bandwidth(X) if cfg.bandwidth == "median" else float(cfg.bandwidth)
        total = np.zeros_like(X)
        losses = []
        for i in idx:
            loss, g = bmaml_task_gradient(tasks[int(i)], X, cfg, h)
            losses.append(loss)
            total = total + g
        loss = float(np.mean(losses))
        state.trace.append(loss)
        if not np.isfinite(loss) or loss > 1e12:
            raise NumericError(f"BMAML diverged at iteration {it}", iteration=it,
                               trace=list(state.trace))
        if cfg.optimizer == "adam":
            state.particles, state.moments = adam_step(X, total / len(idx), state.moments,
                                                       it + 1, cfg.beta)
        else:
            state.particles = X - cfg.beta * total / len(idx)
        state.iteration = it + 1
        if callback is not None:
            callback(state)
    return state


def ensemble_predict(model, particles, x):
    return np.mean([model.predict(p, x) for p in particles], axis=0)
