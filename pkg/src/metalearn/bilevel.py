"""Stochastic bilevel optimization: implicit hypergradient, Neumann inverse, ALSET.

Problem form::

    min_theta  E_xi f(theta, phi*(theta); xi)
    phi*(theta) = argmin_phi E_xi' g(theta, phi; xi')

Derivative callables take the sample as last argument; ``None`` means the
exact expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import NumericError, as_stream, check_finite
from .meta_algorithms import conjugate_gradient, power_iteration

DENSE_LIMIT = 64


def _zero_sampler(gen):
    return None


@dataclass
class BilevelProblem:
    dim_theta: int
    dim_phi: int
    f: Callable                  # (theta, phi, xi) -> float
    f_theta: Callable            # (theta, phi, xi) -> grad wrt theta
    f_phi: Callable              # (theta, phi, xi) -> grad wrt phi
    g: Callable                  # (theta, phi, xi) -> float
    g_phi: Callable              # (theta, phi, xi) -> grad wrt phi
    g_phiphi: Callable           # (theta, phi, v, xi) -> d2g/dphi2 v      (phi space)
    g_thetaphi: Callable         # (theta, phi, v, xi) -> d2g/dtheta dphi v (theta space)
    sample_upper: Callable = _zero_sampler
    sample_lower: Callable = _zero_sampler
    L_g: Optional[float] = None
    lower_solution: Optional[Callable] = None   # theta -> phi*(theta), when known


# ---------------------------------------------------------------------------
# Lower-level Hessian helpers


def dense_lower_hessian(problem: BilevelProblem, theta, phi, xi=None):
    d = problem.dim_phi
    H = np.column_stack([problem.g_phiphi(theta, phi, e, xi) for e in np.eye(d)])
    return 0.5 * (H + H.T)


def estimate_L_g(problem: BilevelProblem, theta, phi, factor=1.1):
    """Smoothness constant: ``factor`` times a power-iteration estimate of the top eigenvalue."""
    lam = power_iteration(lambda v: problem.g_phiphi(theta, phi, v, None), problem.dim_phi, 50)
    return factor * lam


def check_strong_convexity(problem: BilevelProblem, theta, phi, mu, rng, n_probes=10):
    """Raise unless ``n_probes`` random Rayleigh quotients of the lower Hessian exceed mu."""
    gen = as_stream(rng).generator()
    worst = math.inf
    for _ in range(n_probes):
        v = gen.standard_normal(problem.dim_phi)
        q = float(v @ problem.g_phiphi(theta, phi, v, None)) / float(v @ v)
        worst = min(worst, q)
    if worst <= mu:
        raise NumericError(f"lower objective not strongly convex: Rayleigh quotient {worst:.3g} <= {mu:g}")
    return worst


def implicit_hypergradient(problem: BilevelProblem, theta, phi, method="auto",
                           cg_iters=200, cg_tol=1e-12, xi=None, xi_hat=None):
    """``grad_theta f - d2g/dtheta dphi [d2g/dphi2]^{-1} grad_phi f`` at (theta, phi)."""
    gt = problem.f_theta(theta, phi, xi)
    gp = problem.f_phi(theta, phi, xi)
    if not np.any(gp):
        return np.asarray(gt, dtype=np.float64).copy()
    if method == "auto":
        method = "dense" if problem.dim_phi <= DENSE_LIMIT else "cg"
    if method == "dense":
        H = dense_lower_hessian(problem, theta, phi, xi_hat)
        w, V = np.linalg.eigh(H)
        if w[0] <= 1e-12 * max(abs(w[-1]), 1.0):
            raise NumericError(f"singular lower Hessian: minimal eigenvalue {w[0]:.3g}")
        z = V @ ((V.T @ gp) / w)
    elif method == "cg":
        try:
            z = conjugate_gradient(lambda v: problem.g_phiphi(theta, phi, v, xi_hat), gp,
                                   cg_iters, cg_tol)
        except NumericError as err:
            lam = power_iteration(lambda v: problem.g_phiphi(theta, phi, v, xi_hat),
                                  problem.dim_phi)
            raise NumericError(f"singular lower Hessian ({err}); "
                               f"top eigenvalue estimate {lam:.3g}") from err
    else:
        raise ValueError(f"unknown method {method!r}")
    return check_finite(gt - problem.g_thetaphi(theta, phi, z, xi_hat), "hypergradient")


def solve_lower(problem: BilevelProblem, theta, phi0=None, tol=1e-12, max_iter=100):
    """Deterministic lower-level solution by Newton steps."""
    if problem.lower_solution is not None:
        return np.asarray(problem.lower_solution(theta), dtype=np.float64)
    phi = np.zeros(problem.dim_phi) if phi0 is None else np.array(phi0, dtype=np.float64)
    for _ in range(max_iter):
        g = problem.g_phi(theta, phi, None)
        if np.linalg.norm(g) <= tol:
            return phi
        if problem.dim_phi <= DENSE_LIMIT:
            step = np.linalg.solve(dense_lower_hessian(problem, theta, phi), g)
        else:
            step = conjugate_gradient(lambda v: problem.g_phiphi(theta, phi, v, None), g,
                                      500, 1e-14)
        phi = phi - step
    return phi


# ---------------------------------------------------------------------------
# Neumann series


def neumann_inverse_apply(hvp: Callable, v, L_g, N, rng=None, n_prime=None):
    """Randomized truncated-Neumann estimate of ``H^{-1} v``.

    Returns ``(N/L_g) prod_{n=1}^{N'} (I - H_n/L_g) v`` with ``N'`` uniform on
    ``{0, ..., N-1}`` (empty product is the identity), whose mean is the
    truncated series ``(1/L_g) sum_{n<N} (I - H/L_g)^n v``.

    ``hvp(v, n)`` applies the n-th sampled Hessian (n = 1..N'). Pass
    ``n_prime`` to fix the truncation point instead of drawing it.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if not L_g > 0:
        raise ValueError("L_g must be positive")
    if n_prime is None:
        gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
        n_prime = int(gen.integers(N))
    elif not 0 <= n_prime < N:
        raise ValueError("n_prime outside {0, ..., N-1}")
    x = np.array(v, dtype=np.float64)
    for n in range(1, n_prime + 1):
        x = x - hvp(x, n) / L_g
    return (N / L_g) * x


def neumann_expectation(hvp: Callable, v, L_g, N):
    """Exact mean of :func:`neumann_inverse_apply` by enumerating every ``N'``."""
    ests = [neumann_inverse_apply(hvp, v, L_g, N, n_prime=k) for k in range(N)]
    return np.mean(ests, axis=0)


def neumann_series(matvec: Callable, v, L, N):
    """``(1/L) sum_{n=0}^{N-1} (I - A/L)^n v`` by direct accumulation."""
    term = np.array(v, dtype=np.float64)
    acc = term.copy()
    for _ in range(N - 1):
        term = term - matvec(term) / L
        acc = acc + term
    return acc / L


# ---------------------------------------------------------------------------
# ALSET


@dataclass(frozen=True)
class AlsetConfig:
    T: int = 1
    I_max: int = 1000
    neumann_N: int = 5
    alpha: float = 1.0
    beta: float = 1.0
    L_g: Optional[float] = None
    mu: Optional[float] = None
    track: bool = True

    def __post_init__(self):
        if self.T < 1 or self.I_max < 1 or self.neumann_N < 1:
            raise ValueError("T, I_max and neumann_N must be at least 1")


@dataclass
class AlsetResult:
    theta: np.ndarray
    phi: np.ndarray
    theta_path: np.ndarray
    phi_path: np.ndarray
    grad_norm_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    drift_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean_grad_norm_sq(self):
        return float(np.mean(self.grad_norm_sq))


ALSET_DIVERGENCE = 1e12


def alset_solve(problem: BilevelProblem, cfg: AlsetConfig, rng, theta0=None, phi0=None):
    """Alternating SGD with stepsizes ``alpha/sqrt(I_max)`` (upper) and ``beta/sqrt(I_max)`` (lower).

    Streams per outer iteration i: ``(i, 0, t)`` lower sample of step t,
    ``(i, 1)`` upper sample, ``(i, 2, n)`` Hessian samples (n = 0 is the
    mixed term), ``(i, 3)`` truncation draw; ``(I_max,)`` feeds the
    strong-convexity probes.
    """
    rng = as_stream(rng)
    theta = np.zeros(problem.dim_theta) if theta0 is None else np.array(theta0, dtype=np.float64)
    phi = np.zeros(problem.dim_phi) if phi0 is None else np.array(phi0, dtype=np.float64)
    if cfg.mu is not None:
        check_strong_convexity(problem, theta, phi, cfg.mu, rng.child(cfg.I_max))
    L_g = cfg.L_g or problem.L_g or estimate_L_g(problem, theta, phi)
    a = cfg.alpha / math.sqrt(cfg.I_max)
    b = cfg.beta / math.sqrt(cfg.I_max)
    thetas, phis, gns, drifts = [theta.copy()], [phi.copy()], [], []
    for i in range(cfg.I_max):
        it = rng.child(i)
        for t in range(cfg.T):
            xi_hat = problem.sample_lower(it.child(0, t).generator())
            phi = phi - b * problem.g_phi(theta, phi, xi_hat)
        xi = problem.sample_upper(it.child(1).generator())
        gp = problem.f_phi(theta, phi, xi)
        h = np.asarray(problem.f_theta(theta, phi, xi), dtype=np.float64)
        if np.any(gp):
            samples = {}

            def hvp(v, n, theta=theta, phi=phi):
                if n not in samples:
                    samples[n] = problem.sample_lower(it.child(2, n).generator())
                return problem.g_phiphi(theta, phi, v, samples[n])

            z = neumann_inverse_apply(hvp, gp, L_g, cfg.neumann_N, it.child(3).generator())
            xi0 = problem.sample_lower(it.child(2, 0).generator())
            h = h - problem.g_thetaphi(theta, phi, z, xi0)
        theta = theta - a * h
        if (not np.all(np.isfinite(theta)) or not np.all(np.isfinite(phi))
                or np.max(np.abs(theta)) > ALSET_DIVERGENCE
                or np.max(np.abs(phi)) > ALSET_DIVERGENCE):
            raise NumericError(f"ALSET diverged at iteration {i}", iteration=i)
        thetas.append(theta.copy())
        phis.append(phi.copy())
        if cfg.track:
            # diagnostics at the iterate theta^i that produced this step
            th = thetas[-2]
            ps = solve_lower(problem, th)
            gns.append(float(np.sum(implicit_hypergradient(problem, th, ps) ** 2)))
            ps_new = solve_lower(problem, theta)
            drifts.append(float(np.sum((phi - ps_new) ** 2)))
    return AlsetResult(theta, phi, np.array(thetas), np.array(phis),
                       np.array(gns), np.array(drifts))


# ---------------------------------------------------------------------------
# Test instance and meta-learning instantiations


def linear_quadratic_problem(A=2.0, b=1.0, noise=0.0):
    """``g = 1/2 ||phi - A theta||^2``, ``f = 1/2 ||phi - b||^2``, scalar blocks.

    Stochastic gradients add zero-mean Gaussian noise of standard deviation
    ``noise``; the minimizer of the bilevel objective is ``b / A``.
    """
    A, b = float(A), float(b)

    def noisy(gen):
        return None if noise == 0.0 else noise * gen.standard_normal(1)

    def add(x, xi):
        return x if xi is None else x + xi

    return BilevelProblem(
        dim_theta=1, dim_phi=1,
        f=lambda th, ph, xi: 0.5 * float(np.sum((ph - b) ** 2)),
        f_theta=lambda th, ph, xi: np.zeros(1),
        f_phi=lambda th, ph, xi: add(ph - b, xi),
        g=lambda th, ph, xi: 0.5 * float(np.sum((ph - A * th) ** 2)),
        g_phi=lambda th, ph, xi: add(ph - A * th, xi),
        g_phiphi=lambda th, ph, v, xi: np.asarray(v, dtype=np.float64).copy(),
        g_thetaphi=lambda th, ph, v, xi: -A * np.asarray(v, dtype=np.float64),
        sample_upper=noisy, sample_lower=noisy, L_g=1.0,
        lower_solution=lambda th: A * np.asarray(th, dtype=np.float64),
    )


def _stack(tasks):
    return sorted(tasks, key=lambda t: t.task_id)


def instantiate_maml(tasks, alpha, dim):
    """Lower level ``grad L_tr(theta)^T (phi_k - theta) + ||phi_k - theta||^2 / (2 alpha)``.

    phi stacks the K task copies; f averages validation losses and g sums the
    per-task lower objectives, so the hypergradient equals the mean MAML
    meta-gradient.
    """
    tasks = _stack(tasks)
    K = len(tasks)

    def blocks(phi):
        return np.asarray(phi, dtype=np.float64).reshape(K, -1)

    def f(th, ph, xi):
        return float(np.mean([t.val.loss(p) for t, p in zip(tasks, blocks(ph))]))

    def f_phi(th, ph, xi):
        return np.concatenate([t.val.grad(p) / K for t, p in zip(tasks, blocks(ph))])

    def g(th, ph, xi):
        tot = 0.0
        for t, p in zip(tasks, blocks(ph)):
            d = p - th
            tot += float(t.train.grad(th) @ d) + float(d @ d) / (2 * alpha)
        return tot

    def g_phi(th, ph, xi):
        return np.concatenate([t.train.grad(th) + (p - th) / alpha
                               for t, p in zip(tasks, blocks(ph))])

    def g_phiphi(th, ph, v, xi):
        return np.asarray(v, dtype=np.float64) / alpha

    def g_thetaphi(th, ph, v, xi):
        out = np.zeros_like(np.asarray(th, dtype=np.float64))
        for t, vk in zip(tasks, blocks(v)):
            out = out + t.train.hvp(th, vk) - vk / alpha
        return out

    def lower_solution(th):
        return np.concatenate([th - alpha * t.train.grad(th) for t in tasks])

    return BilevelProblem(dim_theta=dim, dim_phi=K * dim, f=f,
                          f_theta=lambda th, ph, xi: np.zeros_like(np.asarray(th, dtype=np.float64)),
                          f_phi=f_phi, g=g, g_phi=g_phi, g_phiphi=g_phiphi,
                          g_thetaphi=g_thetaphi, L_g=1.0 / alpha,
                          lower_solution=lower_solution)


def instantiate_imaml(tasks, lam, dim):
    """Lower level ``L_tr(phi_k) + lam/2 ||phi_k - theta||^2`` summed over tasks."""
    tasks = _stack(tasks)
    K = len(tasks)

    def blocks(phi):
        return np.asarray(phi, dtype=np.float64).reshape(K, -1)

    def f(th, ph, xi):
        return float(np.mean([t.val.loss(p) for t, p in zip(tasks, blocks(ph))]))

    def f_phi(th, ph, xi):
        return np.concatenate([t.val.grad(p) / K for t, p in zip(tasks, blocks(ph))])

    def g(th, ph, xi):
        return float(sum(t.train.loss(p) + 0.5 * lam * np.sum((p - th) ** 2)
                         for t, p in zip(tasks, blocks(ph))))

    def g_phi(th, ph, xi):
        return np.concatenate([t.train.grad(p) + lam * (p - th)
                               for t, p in zip(tasks, blocks(ph))])

    def g_phiphi(th, ph, v, xi):
        return np.concatenate([t.train.hvp(p, vk) + lam * vk
                               for t, p, vk in zip(tasks, blocks(ph), blocks(v))])

    def g_thetaphi(th, ph, v, xi):
        return -lam * blocks(v).sum(axis=0)

    return BilevelProblem(dim_theta=dim, dim_phi=K * dim, f=f,
                          f_theta=lambda th, ph, xi: np.zeros_like(np.asarray(th, dtype=np.float64)),
                          f_phi=f_phi, g=g, g_phi=g_phi, g_phiphi=g_phiphi,
                          g_thetaphi=g_thetaphi)
