"""Optimization-based meta-learning: inner adaptation and outer updates.

A task is represented by a :class:`TaskProblem`, i.e. a pair of objectives
(training and validation loss) sharing one parameter space. Every outer
update averages per-task contributions in ascending task id order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .core import (ConvergenceError, NumericError, Objective, RngStream, adam_step, as_stream,
                   check_finite)
from .models import ModelObjective


@dataclass(frozen=True)
class InnerConfig:
    alpha: float = 0.01
    n_steps: int = 1
    lam: float = 1.0
    cg_iters: int = 20
    cg_tol: float = 1e-8
    tol_inner: float = 1e-8
    max_inner: int = 10_000
    neumann_N: int = 0        # 0 selects conjugate gradient for iMAML
    inner_solver: str = "gd"  # proximal solver: "gd" or "lbfgs"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.inner_solver not in ("gd", "lbfgs"):
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")


@dataclass(frozen=True)
class OuterConfig:
    beta: float = 0.001
    meta_batch_size: int = 1
    n_meta_iters: int = 1
    sharp_alpha_in: float = 0.0
    sharp_alpha_out: float = 0.0
    sharp_first_order: bool = True
    es_n: int = 10
    es_delta: float = 0.1
    es_variant: str = "first_order"
    es_estimator: str = "vanilla"
    optimizer: str = "sgd"    # or "adam" for the gradient-type updates

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.meta_batch_size < 1:
            raise ValueError("meta_batch_size must be positive")
        if self.n_meta_iters < 0:
            raise ValueError("n_meta_iters must be nonnegative")
        if self.es_variant not in ("hessian", "first_order"):
            raise ValueError(f"unknown ES variant {self.es_variant!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TaskProblem:
    train: Objective
    val: Objective
    task_id: int = 0


def bind_task(model, task, task_id=None) -> TaskProblem:
    """Attach a model to the splits of a :class:`~metalearn.core.TaskDataset`."""
    tid = task.task_id if task_id is None else task_id
    return TaskProblem(ModelObjective(model, task.train_x, task.train_y),
                       ModelObjective(model, task.val_x, task.val_y), tid)


# ---------------------------------------------------------------------------
# MAML family


def inner_adapt_gd(obj: Objective, theta, alpha, n_steps=1, return_path=False):
    """``n_steps`` of gradient descent from theta."""
    phi = np.asarray(theta, dtype=np.float64)
    path = [phi]
    for i in range(n_steps):
        g = obj.grad(phi)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at inner step {i}", iteration=i)
        phi = phi - alpha * g
        path.append(phi)
    return (phi, path) if return_path else phi


def maml_meta_gradient(task: TaskProblem, theta, cfg: InnerConfig):
    """Exact gradient of ``L_va(adapt(theta))`` by reverse HVP products."""
    phi, path = inner_adapt_gd(task.train, theta, cfg.alpha, cfg.n_steps, return_path=True)
    g = task.val.grad(phi)
    for p in reversed(path[:-1]):
        g = g - cfg.alpha * task.train.hvp(p, g)
    return check_finite(g, "meta-gradient")


def fomaml_meta_gradient(task: TaskProblem, theta, cfg: InnerConfig):
    phi = inner_adapt_gd(task.train, theta, cfg.alpha, cfg.n_steps)
    return check_finite(task.val.grad(phi), "meta-gradient")


def maml_meta_loss(task: TaskProblem, theta, cfg: InnerConfig) -> float:
    return task.val.loss(inner_adapt_gd(task.train, theta, cfg.alpha, cfg.n_steps))


def reptile_outer_update(theta, adapted: Sequence, beta):
    adapted = np.asarray(adapted, dtype=np.float64)
    return (1.0 - beta) * np.asarray(theta, dtype=np.float64) + beta * adapted.mean(axis=0)


# ---------------------------------------------------------------------------
# Implicit / proximal


def power_iteration(matvec: Callable, dim, n_iter=30, start=None):
    """Largest-magnitude eigenvalue estimate of a symmetric operator."""
    v = np.ones(dim) / math.sqrt(dim) if start is None else start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(n_iter):
        w = matvec(v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return abs(lam)


def imaml_inner_solve(obj: Objective, theta, cfg: InnerConfig, phi0=None, return_iters=False):
    """Minimize ``L_tr(phi) + lam/2 ||phi - theta||^2`` by gradient descent.

    The step is the inverse of a power-iteration curvature estimate at
    theta, halved by an Armijo test where the estimate is too optimistic.
    Once loss differences drop to round-off level a step is accepted when it
    reduces the gradient norm instead.
    """
    theta = np.asarray(theta, dtype=np.float64)
    lam = cfg.lam
    if cfg.inner_solver == "lbfgs":
        return _prox_lbfgs(obj, theta, cfg, phi0, return_iters)

    def F(p):
        d = p - theta
        return obj.loss(p) + 0.5 * lam * float(d @ d)

    def G(p):
        return obj.grad(p) + lam * (p - theta)

    curv = power_iteration(lambda v: obj.hvp(theta, v) + lam * v, theta.size)
    s0 = 1.0 / max(curv, lam, 1e-12)
    s = s0
    phi = theta.copy() if phi0 is None else np.array(phi0, dtype=np.float64)
    f = F(phi)
    g = G(phi)
    gn = float(np.linalg.norm(g))
    eps = np.finfo(np.float64).eps
    for it in range(cfg.max_inner):
        if not np.isfinite(gn):
            raise NumericError("non-finite gradient in proximal inner solve", iteration=it)
        if gn <= cfg.tol_inner:
            return (phi, it) if return_iters else phi
        for _ in range(60):
            cand = phi - s * g
            fc = F(cand)
            gc = G(cand)
            gcn = float(np.linalg.norm(gc))
            if fc <= f - 1e-4 * s * gn * gn:
                break
            if abs(fc - f) <= 16 * eps * max(abs(f), 1.0) and gcn < gn:
                break
            s *= 0.5
        else:
            raise NumericError("line search failed in proximal inner solve", iteration=it)
        phi, f, g, gn = cand, fc, gc, gcn
        s = min(2.0 * s, s0)
    raise ConvergenceError(f"inner solve did not reach tolerance {cfg.tol_inner:g} "
                           f"in {cfg.max_inner} iterations (residual {gn:.3g})",
                           residual=gn, iteration=cfg.max_inner)


def _prox_lbfgs(obj, theta, cfg, phi0, return_iters):
    lam = cfg.lam

    def fg(p):
        d = p - theta
        return obj.loss(p) + 0.5 * lam * float(d @ d), obj.grad(p) + lam * d

    x0 = theta.copy() if phi0 is None else np.array(phi0, dtype=np.float64)
    # the solver tests the max-norm; tol/sqrt(d) there implies the 2-norm bound
    res = optimize.minimize(fg, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": cfg.max_inner,
                                     "gtol": cfg.tol_inner / math.sqrt(x0.size),
                                     "ftol": 0.0, "maxcor": 20})
    phi = res.x
    gn = float(np.linalg.norm(fg(phi)[1]))
    if not np.isfinite(gn):
        raise NumericError("non-finite gradient in proximal inner solve", iteration=res.nit)
    if gn > cfg.tol_inner:
        # line search stalled at round-off level; polish with the descent solver
        rest = replace(cfg, inner_solver="gd", max_inner=max(cfg.max_inner - res.nit, 1))
        phi, extra = imaml_inner_solve(obj, theta, rest, phi0=phi, return_iters=True)
        return (phi, res.nit + extra) if return_iters else phi
    return (phi, res.nit) if return_iters else phi


def conjugate_gradient(matvec: Callable, b, n_iter=20, tol=1e-8):
    """Solve ``A x = b`` for symmetric positive-definite A given as a matvec.

    Stops when ``||r|| <= tol * ||b||``. Non-positive curvature raises.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = tol * math.sqrt(rr)
    if rr == 0.0:
        return x
    for k in range(n_iter):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise NumericError(f"conjugate gradient breakdown at iteration {k}: "
                               f"curvature {pAp:.3g}", iteration=k)
        a = rr / pAp
        x = x + a * p
        r = r - a * Ap
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= stop:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def imaml_meta_gradient(task: TaskProblem, theta, cfg: InnerConfig, phi_star=None):
    """``(I + H_tr(phi*)/lam)^{-1} grad L_va(phi*)`` by CG or truncated Neumann series."""
    if not cfg.lam > 0:
        raise ValueError("implicit gradient needs lam > 0")
    if phi_star is None:
        phi_star = imaml_inner_solve(task.train, theta, cfg)
    g = task.val.grad(phi_star)

    def A(v):
        return v + task.train.hvp(phi_star, v) / cfg.lam

    if cfg.neumann_N > 0:
        from .bilevel import neumann_series

        L = 1.1 * power_iteration(A, g.size)
        return check_finite(neumann_series(A, g, L, cfg.neumann_N), "meta-gradient")
    return check_finite(conjugate_gradient(A, g, cfg.cg_iters, cfg.cg_tol), "meta-gradient")


def imaml_meta_loss(task: TaskProblem, theta, cfg: InnerConfig) -> float:
    return task.val.loss(imaml_inner_solve(task.train, theta, cfg))


def prox_maml_outer_update(theta, adapted: Sequence, beta, lam, alpha=None):
    """Proximal outer step; ``alpha`` is accepted for interface parity and unused."""
    theta = np.asarray(theta, dtype=np.float64)
    mean = np.asarray(adapted, dtype=np.float64).mean(axis=0)
    return theta - beta * lam * (theta - mean)


# ---------------------------------------------------------------------------
# Evolution strategies


def _gaussian(rng, n, d):
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    return gen.standard_normal((n, d))


def es_gradient(loss: Callable, phi, n, delta, rng, estimator="vanilla"):
    """Gaussian-smoothing gradient estimate.

    ``vanilla``: ``mean_i u_i L(phi + delta u_i) / delta``.
    ``antithetic``: ``mean_i u_i (L(phi + delta u_i) - L(phi - delta u_i)) / (2 delta)``,
    which has the same expectation with far lower variance.
    """
    if n < 1 or not delta > 0:
        raise ValueError("need n >= 1 and delta > 0")
    phi = np.asarray(phi, dtype=np.float64)
    U = _gaussian(rng, n, phi.size)
    if estimator == "vanilla":
        w = np.array([loss(phi + delta * u) for u in U]) / delta
    elif estimator == "antithetic":
        w = np.array([loss(phi + delta * u) - loss(phi - delta * u) for u in U]) / (2 * delta)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return check_finite(U.T @ w / n, "ES gradient")


def es_hessian(loss: Callable, phi, n, delta, rng, estimator="vanilla"):
    """Gaussian-smoothing Hessian estimate, symmetric by construction."""
    if n < 1 or not delta > 0:
        raise ValueError("need n >= 1 and delta > 0")
    phi = np.asarray(phi, dtype=np.float64)
    d = phi.size
    U = _gaussian(rng, n, d)
    if estimator == "vanilla":
        w = np.array([loss(phi + delta * u) for u in U])
    elif estimator == "antithetic":
        f0 = loss(phi)
        w = np.array([0.5 * (loss(phi + delta * u) + loss(phi - delta * u)) - f0 for u in U])
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    H = ((U.T * w) @ U / n - w.mean() * np.eye(d)) / delta ** 2
    return check_finite(0.5 * (H + H.T), "ES Hessian")


def es_maml_task_direction(task: TaskProblem, theta, inner: InnerConfig, outer: OuterConfig,
                           rng: RngStream):
    """Per-task ES-MAML direction. Streams: 0 inner gradient, 1 validation, 2 Hessian."""
    rng = as_stream(rng)
    n, delta, est = outer.es_n, outer.es_delta, outer.es_estimator
    g_tr = es_gradient(task.train.loss, theta, n, delta, rng.child(0), est)
    phi = np.asarray(theta, dtype=np.float64) - inner.alpha * g_tr
    g_va = es_gradient(task.val.loss, phi, n, delta, rng.child(1), est)
    if outer.es_variant == "first_order":
        return g_va
    H = es_hessian(task.train.loss, theta, n, delta, rng.child(2), est)
    return g_va - inner.alpha * (H @ g_va)


def es_maml_outer_update(theta, tasks: Sequence[TaskProblem], inner: InnerConfig,
                         outer: OuterConfig, rng):
    rng = as_stream(rng)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    dirs = [es_maml_task_direction(t, theta, inner, outer, rng.child(t.task_id)) for t in tasks]
    return np.asarray(theta, dtype=np.float64) - outer.beta * _ordered_mean(dirs)


# ---------------------------------------------------------------------------
# Sharpness-aware MAML


def _unit(v, scale):
    nv = float(np.linalg.norm(v))
    if scale == 0.0 or nv == 0.0:
        return np.zeros_like(v)
    return scale * v / nv


def sharp_maml_perturbations(task: TaskProblem, theta, alpha, alpha_in, alpha_out,
                             first_order=True):
    """Return ``(eps, eps_k)``: outer and inner ascent perturbations."""
    theta = np.asarray(theta, dtype=np.float64)
    eps_k = _unit(task.train.grad(theta), alpha_in) if alpha_in else np.zeros_like(theta)
    if not alpha_out:
        return np.zeros_like(theta), eps_k
    p = theta + eps_k
    phi_tilde = theta - alpha * task.train.grad(p)
    d = task.val.grad(phi_tilde)
    if not first_order:
        d = d - alpha * task.train.hvp(p, d)
    return _unit(d, alpha_out), eps_k


def sharp_maml_meta_gradient(task: TaskProblem, theta, cfg: InnerConfig, alpha_in=0.0,
                             alpha_out=0.0, first_order=True, perturbations=None):
    """Gradient of ``L_va(phi_sm)`` with the perturbations held constant.

    ``first_order=True`` drops the adaptation Jacobian (and with zero
    perturbations coincides with FOMAML); ``first_order=False`` returns the
    exact derivative of ``theta -> L_va(theta + eps - alpha grad L_tr(theta + eps + eps_k))``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if perturbations is None:
        perturbations = sharp_maml_perturbations(task, theta, cfg.alpha, alpha_in,
                                                 alpha_out, first_order)
    eps, eps_k = perturbations
    p = theta + eps + eps_k
    phi_sm = theta + eps - cfg.alpha * task.train.grad(p)
    g = task.val.grad(phi_sm)
    if not first_order:
        g = g - cfg.alpha * task.train.hvp(p, g)
    return check_finite(g, "meta-gradient")


def sharp_maml_meta_loss(task, theta, cfg, perturbations):
    eps, eps_k = perturbations
    theta = np.asarray(theta, dtype=np.float64)
    return task.val.loss(theta + eps - cfg.alpha * task.train.grad(theta + eps + eps_k))


# ---------------------------------------------------------------------------
# CAVIA: adapt a context vector only


@dataclass
class CaviaTask:
    """Model with a context input bound to a task's splits."""

    model: object
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    task_id: int = 0

    @classmethod
    def from_dataset(cls, model, task):
        return cls(model, task.train_x, task.train_y, task.val_x, task.val_y, task.task_id)

    def zero_context(self):
        return np.zeros(self.model.context_dim)


def cavia_adapt(task: CaviaTask, theta, alpha, n_steps=1):
    """Context after gradient steps from the all-zero context."""
    c = task.zero_context()
    for i in range(n_steps):
        g = task.model.grad_ctx(theta, task.train_x, task.train_y, c)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite context gradient at step {i}", iteration=i)
        c = c - alpha * g
    return c


def cavia_meta_gradient(task: CaviaTask, theta, cfg: InnerConfig):
    """Total derivative of ``theta -> L_va(theta, cavia_adapt(theta))`` (one inner step)."""
    m = task.model
    c = cavia_adapt(task, theta, cfg.alpha)
    g_theta, g_ctx = m.grad_joint(theta, task.val_x, task.val_y, c)
    if cfg.alpha == 0.0:
        return g_theta
    cross, _ = m.hvp_joint(theta, task.train_x, task.train_y, task.zero_context(),
                           np.zeros_like(theta), g_ctx)
    return check_finite(g_theta - cfg.alpha * cross, "meta-gradient")


def cavia_meta_loss(task: CaviaTask, theta, cfg: InnerConfig) -> float:
    c = cavia_adapt(task, theta, cfg.alpha)
    return task.model.loss(theta, task.val_x, task.val_y, c)


# ---------------------------------------------------------------------------
# Joint learning


def joint_learning_step(theta, tasks: Sequence[TaskProblem], beta):
    tasks = sorted(tasks, key=lambda t: t.task_id)
    g = _ordered_mean([t.train.grad(theta) for t in tasks])
    return np.asarray(theta, dtype=np.float64) - beta * g


# ---------------------------------------------------------------------------
# Modular meta-learning


EXHAUSTIVE_LIMIT = 4096


def modular_assign(loss: Callable, n_modules: int, n_layers: int,
                   method="exhaustive", rng=0, n_proposals=200, t0=1.0, decay=0.95):
    """Module index per layer minimizing ``loss(assignment)``; indices are 0-based.

    Exhaustive search visits assignments in lexicographic order and keeps the
    first minimizer. Simulated annealing starts from all zeros and reassigns
    one layer per proposal with Metropolis acceptance, returning the best seen.
    """
    if n_modules < 1 or n_layers < 1:
        raise ValueError("need at least one module and one layer")
    if method == "exhaustive":
        if n_modules ** n_layers > EXHAUSTIVE_LIMIT:
            raise ValueError(f"{n_modules}^{n_layers} assignments exceed {EXHAUSTIVE_LIMIT}; "
                             "use method='simulated_annealing'")
        best, best_val = None, math.inf
        for s in itertools.product(range(n_modules), repeat=n_layers):
            val = loss(s)
            if val < best_val:
                best, best_val = s, val
        if best is None:
            raise NumericError("no finite assignment loss")
        return list(best)
    if method != "simulated_annealing":
        raise ValueError(f"unknown method {method!r}")
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    cur = [0] * n_layers
    cur_val = loss(tuple(cur))
    best, best_val = list(cur), cur_val
    if n_modules == 1:
        return best
    T = t0
    for _ in range(n_proposals):
        layer = int(gen.integers(n_layers))
        new = int(gen.integers(n_modules - 1))
        if new >= cur[layer]:
            new += 1
        prop = list(cur)
        prop[layer] = new
        val = loss(tuple(prop))
        u = gen.random()
        if val <= cur_val or u < math.exp(-(val - cur_val) / T):
            cur, cur_val = prop, val
            if val < best_val:
                best, best_val = list(prop), val
        T *= decay
    return best


class ModularNet:
    """Stack of ``n_layers`` square layers; each slot takes any module.

    A module is one ``(W, b)`` block of a width x width layer flattened
    to a vector. Hidden layers use tanh, the last layer is linear.
    """

    def __init__(self, width, n_layers, activation="tanh"):
        from .models import MlpRegressor

        self.width, self.n_layers = int(width), int(n_layers)
        self.net = MlpRegressor(width, (width,) * (n_layers - 1), width, activation)
        self.module_size = width * width + width

    def compose(self, modules, assignment):
        return np.concatenate([modules[i] for i in assignment])

    def loss(self, modules, assignment, x, y):
        return self.net.loss(self.compose(modules, assignment), x, y)

    def layer_grads(self, modules, assignment, x, y):
        g = self.net.grad(self.compose(modules, assignment), x, y)
        return g.reshape(self.n_layers, self.module_size)

    def init_modules(self, n_modules, rng=0):
        rng = as_stream(rng)
        return [self.net.init_params(rng.child(m))[:self.module_size].copy()
                for m in range(n_modules)]


def modular_outer_step(modules, tasks: Sequence, beta, net: ModularNet,
                       method="exhaustive", rng=0):
    """Assign each task by training loss, then step the selected modules on validation loss.

    ``tasks`` holds :class:`~metalearn.core.TaskDataset` objects. Gradients are
    summed into the chosen modules and divided by the number of tasks.
    """
    rng = as_stream(rng)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    acc = [np.zeros_like(m) for m in modules]
    assignments = []
    for t in tasks:
        s = modular_assign(lambda a: net.loss(modules, a, t.train_x, t.train_y),
                           len(modules), net.n_layers, method, rng.child(t.task_id))
        assignments.append(s)
        for layer, g in zip(s, net.layer_grads(modules, s, t.val_x, t.val_y)):
            acc[layer] = acc[layer] + g
    K = len(tasks)
    new = [m - beta * a / K if np.any(a) else m.copy() for m, a in zip(modules, acc)]
    return new, assignments


# ---------------------------------------------------------------------------
# Outer loop


def _ordered_mean(vectors):
    out = np.zeros_like(vectors[0])
    for v in vectors:
        out = out + v
    return out / len(vectors)


@dataclass
class MetaState:
    theta: np.ndarray
    iteration: int = 0
    trace: list = field(default_factory=list)
    moments: tuple = None


ALGORITHMS = ("maml", "fomaml", "reptile", "imaml", "prox_maml", "es_maml",
              "sharp_maml", "cavia", "joint")

DIVERGENCE_LIMIT = 1e12


def _task_step(alg, task, theta, inner: InnerConfig, outer: OuterConfig, rng: RngStream):
    """Return (meta loss at theta, per-task contribution)."""
    if alg in ("maml", "fomaml", "reptile", "sharp_maml", "es_maml"):
        phi = inner_adapt_gd(task.train, theta, inner.alpha, inner.n_steps)
        loss = task.val.loss(phi)
        if alg == "maml":
            return loss, maml_meta_gradient(task, theta, inner)
        if alg == "fomaml":
            return loss, task.val.grad(phi)
        if alg == "reptile":
            return loss, phi
        if alg == "sharp_maml":
            return loss, sharp_maml_meta_gradient(task, theta, inner, outer.sharp_alpha_in,
                                                  outer.sharp_alpha_out,
                                                  outer.sharp_first_order)
        return loss, es_maml_task_direction(task, theta, inner, outer, rng)
    if alg in ("imaml", "prox_maml"):
        phi = imaml_inner_solve(task.train, theta, inner)
        loss = task.val.loss(phi)
        if alg == "prox_maml":
            return loss, phi
        return loss, imaml_meta_gradient(task, theta, inner, phi_star=phi)
    if alg == "cavia":
        c = cavia_adapt(task, theta, inner.alpha)
        return (task.model.loss(theta, task.val_x, task.val_y, c),
                cavia_meta_gradient(task, theta, inner))
    if alg == "joint":
        return task.train.loss(theta), task.train.grad(theta)
    raise ValueError(f"unknown algorithm {alg!r}")


def meta_train(algorithm: str, tasks: Sequence, theta0, inner: InnerConfig,
               outer: OuterConfig, rng, callback=None) -> MetaState:
    """Run the outer loop; the trace holds the batch meta-loss at each iterate.

    Tasks in each batch are drawn without replacement from the stream
    ``rng.child(iteration)`` and processed in ascending task id order.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    rng = as_stream(rng)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    K = len(tasks)
    if K == 0:
        raise ValueError("no tasks")
    if outer.meta_batch_size > K:
        raise ValueError("meta_batch_size exceeds number of tasks")
    state = MetaState(np.array(theta0, dtype=np.float64))
    for it in range(outer.n_meta_iters):
        stream = rng.child(it)
        idx = np.sort(stream.child(0).generator().choice(K, outer.meta_batch_size,
                                                         replace=False))
        theta = state.theta
        losses, contribs = [], []
        for i in idx:
            t = tasks[int(i)]
            loss, c = _task_step(algorithm, t, theta, inner, outer,
                                 stream.child(1, t.task_id))
            losses.append(loss)
            contribs.append(c)
        loss = float(np.mean(losses))
        state.trace.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise NumericError(f"meta-training diverged at iteration {it} (loss {loss:.3g})",
                               iteration=it, trace=list(state.trace))
        mean = _ordered_mean(contribs)
        if algorithm == "reptile":
            new = (1.0 - outer.beta) * theta + outer.beta * mean
        elif algorithm == "prox_maml":
            new = theta - outer.beta * inner.lam * (theta - mean)
        elif outer.optimizer == "adam":
            new, state.moments = adam_step(theta, mean, state.moments, it + 1, outer.beta)
        else:
            new = theta - outer.beta * mean
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite parameters at iteration {it}",
                               iteration=it, trace=list(state.trace))
        state.theta = new
        state.iteration = it + 1
        if callback is not None:
            callback(state)
    return state
