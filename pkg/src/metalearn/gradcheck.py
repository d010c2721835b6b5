"""Finite-difference oracle suites for every analytic (hyper)gradient.

Each check draws small random instances from its own stream path and
reports the worst relative error against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bayes import BmamlConfig, bmaml_task_gradient, bmaml_task_loss, median_bandwidth
from .bilevel import BilevelProblem, implicit_hypergradient, solve_lower
from .core import Objective, as_stream, finite_diff_grad, finite_diff_hvp, relative_error
from .meta_algorithms import (CaviaTask, InnerConfig, TaskProblem, cavia_meta_gradient,
                              cavia_meta_loss, imaml_inner_solve, imaml_meta_gradient,
                              inner_adapt_gd, maml_meta_gradient, maml_meta_loss,
                              sharp_maml_meta_gradient, sharp_maml_meta_loss,
                              sharp_maml_perturbations)
from .models import ModelObjective, MlpRegressor
from .ridge_meta import RidgeTask, ridge_meta_closed_form, ridge_meta_loss

TOLERANCE = 1e-3

SCOPES = {
    "maml": ("maml", "fomaml"),
    "imaml": ("imaml",),
    "cavia": ("cavia",),
    "bilevel": ("bilevel",),
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    n_instances: int
    tol: float = TOLERANCE

    @property
    def passed(self):
        return bool(np.isfinite(self.worst) and self.worst < self.tol)


class FaultyObjective(Objective):
    """Wraps an objective and scales its Hessian-vector products (fault injection)."""

    def __init__(self, inner: Objective, factor=1.5):
        self.inner = inner
        self.factor = factor

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def loss(self, phi):
        return self.inner.loss(phi)

    def grad(self, phi):
        return self.inner.grad(phi)

    def hvp(self, phi, v):
        return self.factor * self.inner.hvp(phi, v)


def _data(g, n, d_in=1):
    x = g.uniform(-2, 2, size=(n, d_in))
    return x, np.sin(2 * x[:, 0]) + 0.1 * g.standard_normal(n)


def _task(g, model, fault, n_tr=6, n_va=6):
    xt, yt = _data(g, n_tr)
    xv, yv = _data(g, n_va)
    tr, va = ModelObjective(model, xt, yt), ModelObjective(model, xv, yv)
    if fault:
        tr, va = FaultyObjective(tr), FaultyObjective(va)
    return TaskProblem(tr, va)


def _small_mlp(context_dim=0):
    return MlpRegressor(1, (6, 6), 1, "tanh", context_dim)


def check_maml(stream, fault=False):
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    theta = m.init_params(g)
    cfg = InnerConfig(alpha=0.05, n_steps=int(g.integers(1, 4)))
    an = maml_meta_gradient(task, theta, cfg)
    return relative_error(an, finite_diff_grad(lambda t: maml_meta_loss(task, t, cfg), theta))


def check_fomaml(stream, fault=False):
    """First-order direction equals the validation gradient at the adapted point."""
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    theta = m.init_params(g)
    cfg = InnerConfig(alpha=0.05, n_steps=2)
    phi = inner_adapt_gd(task.train, theta, cfg.alpha, cfg.n_steps)
    return relative_error(task.val.grad(phi), finite_diff_grad(task.val.loss, phi))


def check_imaml(stream, fault=False):
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    theta = m.init_params(g)
    cfg = InnerConfig(lam=10.0, tol_inner=1e-11, max_inner=20000, cg_iters=200, cg_tol=1e-13)
    phi0 = imaml_inner_solve(task.train, theta, cfg)
    an = imaml_meta_gradient(task, theta, cfg, phi_star=phi0)

    def F(t):
        return task.val.loss(imaml_inner_solve(task.train, t, cfg, phi0=phi0))

    return relative_error(an, finite_diff_grad(F, theta, h=1e-4))


def check_cavia(stream, fault=False):
    g = stream.generator()
    m = _small_mlp(context_dim=2)
    (xt, yt), (xv, yv) = _data(g, 6), _data(g, 6)
    task = CaviaTask(m, xt, yt, xv, yv)
    theta = m.init_params(g)
    cfg = InnerConfig(alpha=0.1)
    an = cavia_meta_gradient(task, theta, cfg)
    return relative_error(an, finite_diff_grad(lambda t: cavia_meta_loss(task, t, cfg), theta))


def check_sharp_maml(stream, fault=False):
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    theta = m.init_params(g)
    cfg = InnerConfig(alpha=0.05)
    pert = sharp_maml_perturbations(task, theta, cfg.alpha, 0.05, 0.05, first_order=False)
    an = sharp_maml_meta_gradient(task, theta, cfg, first_order=False, perturbations=pert)
    fd = finite_diff_grad(lambda t: sharp_maml_meta_loss(task, t, cfg, pert), theta)
    return relative_error(an, fd)


def check_bmaml(stream, fault=False):
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    X = np.stack([m.init_params(g) for _ in range(3)])
    cfg = BmamlConfig(alpha=0.05, sigma2=1.0)
    h = median_bandwidth(X)
    _, an = bmaml_task_gradient(task, X, cfg, h)
    fd = finite_diff_grad(lambda z: bmaml_task_loss(task, z.reshape(X.shape), cfg, h), X.ravel())
    return relative_error(an.ravel(), fd)


def check_model_hvp(stream, fault=False):
    g = stream.generator()
    m = _small_mlp()
    task = _task(g, m, fault)
    phi = m.init_params(g)
    v = g.standard_normal(phi.size)
    return relative_error(task.train.hvp(phi, v), finite_diff_hvp(task.train, phi, v))


def _random_bilevel(g, dt=3, dp=4):
    M = g.standard_normal((dp, dp))
    Q = M @ M.T + np.eye(dp)
    P = g.standard_normal((dp, dt))
    c = g.standard_normal(dp)
    return BilevelProblem(
        dim_theta=dt, dim_phi=dp,
        f=lambda th, ph, xi: float(np.sum(np.sin(ph + c)) + 0.5 * th @ th),
        f_theta=lambda th, ph, xi: np.array(th, dtype=np.float64),
        f_phi=lambda th, ph, xi: np.cos(ph + c),
        g=lambda th, ph, xi: float(0.5 * ph @ Q @ ph + np.sum(np.log(np.cosh(ph))) - ph @ P @ th),
        g_phi=lambda th, ph, xi: Q @ ph + np.tanh(ph) - P @ th,
        g_phiphi=lambda th, ph, v, xi: Q @ v + v / np.cosh(ph) ** 2,
        g_thetaphi=lambda th, ph, v, xi: -P.T @ v,
    )


def check_bilevel(stream, fault=False):
    g = stream.generator()
    prob = _random_bilevel(g)
    theta = g.standard_normal(prob.dim_theta)
    phi = solve_lower(prob, theta)
    an = implicit_hypergradient(prob, theta, phi)
    if fault:
        an = an * 1.5
    fd = finite_diff_grad(lambda t: prob.f(t, solve_lower(prob, t, phi), None), theta)
    return relative_error(an, fd)


def check_ridge(stream, fault=False):
    """Stationarity of the closed-form meta-solution relative to a perturbed point."""
    g = stream.generator()
    d = 3
    tasks = [RidgeTask.make(g.standard_normal((5, d)), g.standard_normal(5),
                            g.standard_normal((4, d)), g.standard_normal(4), 0.7)
             for _ in range(4)]
    th = ridge_meta_closed_form(tasks)
    grad_at = finite_diff_grad(lambda t: ridge_meta_loss(tasks, t), th)
    ref = finite_diff_grad(lambda t: ridge_meta_loss(tasks, t), th + g.standard_normal(d))
    return float(np.linalg.norm(grad_at) / max(np.linalg.norm(ref), 1e-12))


CHECKS: dict = {
    "maml": check_maml,
    "fomaml": check_fomaml,
    "imaml": check_imaml,
    "cavia": check_cavia,
    "sharp_maml": check_sharp_maml,
    "bmaml": check_bmaml,
    "bilevel": check_bilevel,
    "ridge": check_ridge,
    "model_hvp": check_model_hvp,
}


def run_checks(scope="all", n_instances=10, rng=0, fault=False, tol=TOLERANCE):
    """Run the selected suites; ``fault=True`` scales every HVP by 1.5."""
    if scope == "all":
        names = tuple(CHECKS)
    elif scope in SCOPES:
        names = SCOPES[scope]
    elif scope in CHECKS:
        names = (scope,)
    else:
        raise ValueError(f"unknown scope {scope!r}; choose all, "
                         + ", ".join(sorted(set(SCOPES) | set(CHECKS))))
    stream = as_stream(rng)
    out = []
    for j, name in enumerate(sorted(CHECKS)):
        if name not in names:
            continue
        fn: Callable = CHECKS[name]
        errs = [fn(stream.child(j, i), fault) for i in range(n_instances)]
        out.append(CheckResult(name, float(max(errs)), n_instances, tol))
    return out
