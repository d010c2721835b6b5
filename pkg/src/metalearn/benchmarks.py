"""Task environments and train/evaluate routines shared by the harness and tests.

Every routine takes an :class:`~metalearn.core.RngStream`; meta-training
tasks live under ``stream.child(0)`` and meta-test tasks under
``stream.child(1)``, so the two sets never share a random path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import comms
from .bayes import BmamlConfig, bmaml_adapt, bmaml_meta_train, ensemble_predict
from .core import TaskDataset, as_stream
from .meta_algorithms import (CaviaTask, InnerConfig, OuterConfig, bind_task, cavia_adapt,
                              imaml_inner_solve, inner_adapt_gd, meta_train)
from .models import demod_classifier, sinusoid_mlp

TRAIN_PATH = 0
TEST_PATH = 1
INIT_PATH = 2
OUTER_PATH = 3

META_ALGORITHMS = ("maml", "fomaml", "reptile", "imaml", "prox_maml", "es_maml",
                   "sharp_maml", "cavia", "joint", "bmaml")


# ---------------------------------------------------------------------------
# Sinusoid regression


@dataclass(frozen=True)
class SinusoidEnv:
    amplitude: tuple = (0.1, 5.0)
    phase: tuple = (0.0, math.pi)
    x_range: tuple = (-5.0, 5.0)

    def task(self, stream, task_id, n_train, n_val) -> TaskDataset:
        g = stream.child(task_id).generator()
        a = g.uniform(*self.amplitude)
        p = g.uniform(*self.phase)
        x = g.uniform(*self.x_range, size=(n_train + n_val, 1))
        y = a * np.sin(x - p)
        return TaskDataset.from_samples(x, y, n_train, task_id, {"amplitude": a, "phase": p})

    def tasks(self, stream, K, n_train, n_val):
        return [self.task(stream, k, n_train, n_val) for k in range(K)]


def sinusoid_model(algorithm, context_dim=4):
    return sinusoid_mlp(context_dim if algorithm == "cavia" else 0)


# ---------------------------------------------------------------------------
# Generic meta-train / adapt


def _bind(algorithm, model, task):
    if algorithm == "cavia":
        return CaviaTask.from_dataset(model, task)
    return bind_task(model, task)


def initial_state(algorithm, model, stream, n_particles=5):
    g = stream.generator()
    if algorithm == "bmaml":
        return np.stack([model.init_params(g) for _ in range(n_particles)])
    return model.init_params(g)


def train(algorithm, model, tasks, state0, inner: InnerConfig, outer: OuterConfig, stream,
          bmaml: BmamlConfig = None, callback=None):
    """Meta-train and return ``(final state, per-iteration batch losses)``."""
    if algorithm == "bmaml":
        cfg = bmaml or BmamlConfig()
        st = bmaml_meta_train([bind_task(model, t) for t in tasks], state0, cfg, stream,
                              callback=None if callback is None else
                              (lambda s: callback(s.iteration, s.trace[-1], s.particles)))
        return st.particles, st.trace
    bound = [_bind(algorithm, model, t) for t in tasks]
    st = meta_train(algorithm, bound, state0, inner, outer, stream,
                    callback=None if callback is None else
                    (lambda s: callback(s.iteration, s.trace[-1], s.theta)))
    return st.theta, st.trace


def adapt(algorithm, model, state, task: TaskDataset, inner: InnerConfig,
          bmaml: BmamlConfig = None):
    """Task-specific parameters (or context / particles) from the train split."""
    if algorithm == "bmaml":
        return bmaml_adapt(bind_task(model, task), state, bmaml or BmamlConfig())
    if algorithm == "cavia":
        return cavia_adapt(CaviaTask.from_dataset(model, task), state, inner.alpha)
    obj = bind_task(model, task).train
    if algorithm in ("imaml", "prox_maml"):
        return imaml_inner_solve(obj, state, inner)
    return inner_adapt_gd(obj, state, inner.alpha, inner.n_steps)


def predict(algorithm, model, state, adapted, x):
    if algorithm == "bmaml":
        return ensemble_predict(model, adapted, x)
    if algorithm == "cavia":
        return model.predict(state, x, adapted)
    return model.predict(adapted, x)


def adapted_mse(algorithm, model, state, task, inner, bmaml=None) -> float:
    a = adapt(algorithm, model, state, task, inner, bmaml)
    n = len(task.val_y)
    r = (np.reshape(predict(algorithm, model, state, a, task.val_x), (n, -1))
         - np.reshape(task.val_y, (n, -1)))
    return float(np.mean(np.sum(r * r, axis=1)))


def meta_test_loss(algorithm, model, state, test_tasks, inner, bmaml=None) -> float:
    return float(np.mean([adapted_mse(algorithm, model, state, t, inner, bmaml)
                          for t in test_tasks]))


@dataclass(frozen=True)
class SinusoidSetup:
    algorithm: str = "maml"
    K: int = 100
    n_train: int = 10
    n_val: int = 10
    n_test_tasks: int = 100
    n_test_points: int = 100
    inner: InnerConfig = InnerConfig(alpha=0.01, n_steps=1)
    outer: OuterConfig = OuterConfig(beta=1e-3, meta_batch_size=10, n_meta_iters=2000,
                                     optimizer="adam")
    bmaml: BmamlConfig = None
    n_particles: int = 5
    context_dim: int = 4


def run_sinusoid(setup: SinusoidSetup, rng, callback=None, env=SinusoidEnv()):
    """Meta-train on K tasks and return the meta-test MSE after adaptation."""
    stream = as_stream(rng)
    model = sinusoid_model(setup.algorithm, setup.context_dim)
    tasks = env.tasks(stream.child(TRAIN_PATH), setup.K, setup.n_train, setup.n_val)
    test = env.tasks(stream.child(TEST_PATH), setup.n_test_tasks, setup.n_train,
                     setup.n_test_points)
    state0 = initial_state(setup.algorithm, model, stream.child(INIT_PATH), setup.n_particles)
    state, trace = train(setup.algorithm, model, tasks, state0, setup.inner, setup.outer,
                         stream.child(OUTER_PATH), setup.bmaml, callback)
    return meta_test_loss(setup.algorithm, model, state, test, setup.inner, setup.bmaml), trace


# ---------------------------------------------------------------------------
# Demodulation


@dataclass(frozen=True)
class DemodSetup:
    algorithm: str = "maml"
    K: int = 500
    n_pilots: int = 8
    n_val: int = 64
    snr_db: float = 20.0
    n_test_devices: int = 30
    n_test_symbols: int = 1000
    inner: InnerConfig = InnerConfig(alpha=0.1, n_steps=1)
    outer: OuterConfig = OuterConfig(beta=1e-3, meta_batch_size=8, n_meta_iters=3000,
                                     optimizer="adam")
    scratch_steps: int = 200


def demod_device(stream, k, n_pilots, n_val, snr_db):
    """Raw pilots/test symbols of one device and its pilot-equalized copy."""
    p = comms.sample_demod_params(stream.child(k, 0), snr_db, n_pilots)
    raw = comms.gen_demod_task(p, stream.child(k, 1), n_val, k)
    return raw, comms.equalize_task(raw, p.N0), p


def run_demod(setup: DemodSetup, rng, callback=None):
    """Median-ready per-device SERs for the meta-learned, scratch and MMSE+ML demodulators."""
    stream = as_stream(rng)
    clf = demod_classifier()
    tr = [demod_device(stream.child(TRAIN_PATH), k, setup.n_pilots, setup.n_val,
                       setup.snr_db)[1] for k in range(setup.K)]
    theta0 = clf.init_params(stream.child(INIT_PATH).generator())
    theta, trace = train(setup.algorithm, clf, tr, theta0, setup.inner, setup.outer,
                         stream.child(OUTER_PATH), callback=callback)
    scratch = InnerConfig(alpha=setup.inner.alpha, n_steps=setup.scratch_steps)
    out = {"meta": [], "scratch": [], "mmse_ml": []}
    for k in range(setup.n_test_devices):
        raw, eq, p = demod_device(stream.child(TEST_PATH), k, setup.n_pilots,
                                  setup.n_test_symbols, setup.snr_db)
        phi = adapt(setup.algorithm, clf, theta, eq, setup.inner)
        out["meta"].append(comms.ser_eval(clf, phi, eq.val_x, eq.val_y))
        phs = adapt("maml", clf, theta0, eq, scratch)
        out["scratch"].append(comms.ser_eval(clf, phs, eq.val_x, eq.val_y))
        out["mmse_ml"].append(comms.symbol_error_rate(comms.mmse_ml_baseline(raw, p.N0),
                                                      raw.val_y))
    return {k: float(np.mean(v)) for k, v in out.items()}, trace, theta


# ---------------------------------------------------------------------------
# Channel prediction


@dataclass(frozen=True)
class ChanPredSetup:
    K: int = 50
    S: int = 16
    R: int = 2
    L: int = 2
    delta: int = 1
    lam: float = 1.0
    n_tr: int = 4
    n_slots: int = 40
    noise_var: float = 1e-3
    n_test_frames: int = 20


def chanpred_frames(stream, n, setup: ChanPredSetup):
    return [comms.gen_chanpred_frame(
        comms.sample_chanpred_params(stream.child(k, 0), setup.S, setup.R, setup.L,
                                     setup.delta, setup.n_slots, setup.noise_var),
        stream.child(k, 1)) for k in range(n)]


def run_chanpred(setup: ChanPredSetup, rng):
    """Test NMSE of lstd-meta, naive-meta and per-frame (zero bias) predictors."""
    stream = as_stream(rng)
    tr = chanpred_frames(stream.child(TRAIN_PATH), setup.K, setup)
    te = chanpred_frames(stream.child(TEST_PATH), setup.n_test_frames, setup)
    a = (setup.L, setup.delta, setup.lam)
    out = {}
    for mode in ("lstd", "naive"):
        th = comms.chanpred_meta(tr, *a, mode=mode, R=setup.R, n_tr=setup.n_tr)
        out[mode] = comms.chanpred_evaluate(te, th, *a, setup.n_tr, mode, setup.R)
    out["per_frame"] = comms.chanpred_evaluate(te, comms.zero_bias(setup.S, setup.L), *a,
                                               setup.n_tr, "naive")
    return out


# ---------------------------------------------------------------------------
# Generalization bounds on random finite environments


def bounds_instance(stream, n_symbols=2, n_hyp=2, n_tasks=2, n_theta=2, N=2, K=2):
    """Random single-task and meta-learning instances with Gibbs learners.

    Returns the enumerated absolute gaps and the corresponding bounds.
    """
    from . import bounds as bd
    from .bayes import gibbs_posterior

    g = as_stream(stream).generator()
    loss = g.uniform(0.0, 1.0, size=(n_symbols, n_hyp))
    p = g.dirichlet(np.ones(n_symbols))
    beta = g.uniform(0.5, 20.0)
    prior = g.dirichlet(np.ones(n_hyp))
    train = np.array([loss[list(d)].mean(axis=0) for d in bd.datasets(n_symbols, N)])
    learner = np.array([gibbs_posterior(prior, row, beta) for row in train])
    mi = bd.exact_mutual_information(learner, bd.dataset_distribution(p, N))
    out = {"gap": abs(bd.expected_generalization_gap(learner, p, loss, N)),
           "bound": bd.mi_generalization_bound(mi, bd.BOUNDED_LOSS_SUBGAUSS, N)}

    env = bd.FiniteEnvironment(g.dirichlet(np.ones(n_tasks)),
                               g.dirichlet(np.ones(n_symbols), size=n_tasks), loss, N, K)
    q_phi = g.dirichlet(np.ones(n_hyp), size=n_theta)
    base = np.stack([[gibbs_posterior(q_phi[t], row, beta) for row in train]
                     for t in range(n_theta)])
    beta_meta = g.uniform(0.5, 20.0)
    hyper = np.full(n_theta, 1.0 / n_theta)
    meta = []
    for m in bd._meta_datasets(env):
        imrm = bd.imrm_losses(q_phi, train[list(m)], beta)
        meta.append(bd.gibbs_meta_learner(hyper, imrm, beta_meta))
    out["meta_bound"], out["meta_gap"] = bd.meta_generalization_bound(env, base, np.array(meta))
    return out
