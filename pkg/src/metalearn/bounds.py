"""Information-theoretic generalization quantities on enumerable environments.

All information measures are in nats. Data sets are ordered tuples of N
symbols and are indexed lexicographically (``itertools.product`` order).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bayes import gibbs_posterior

STATE_LIMIT = 1_000_000
BOUNDED_LOSS_SUBGAUSS = 0.25


def _guard(n_states, what="joint"):
    if n_states > STATE_LIMIT:
        raise ValueError(f"{what} state space has {n_states:.3g} states (limit {STATE_LIMIT:g})")


def _xlogy_ratio(p, q):
    """Elementwise ``p log(p/q)`` with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), p.shape)
    out = np.zeros_like(p)
    m = p > 0
    out[m] = p[m] * (np.log(p[m]) - np.log(q[m]))
    return out


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def dataset_distribution(symbol_probs, N):
    """Probability of each ordered N-tuple under i.i.d. draws.

    ``symbol_probs`` may be 1-D (one distribution) or 2-D (one row per
    task/hypothesis); the last axis then indexes data sets.
    """
    p = np.asarray(symbol_probs, dtype=np.float64)
    A = p.shape[-1]
    _guard(A ** N, "data set")
    out = np.ones(p.shape[:-1] + (1,))
    for _ in range(N):
        out = (out[..., :, None] * p[..., None, :]).reshape(p.shape[:-1] + (-1,))
    return out


def datasets(alphabet_size, N):
    _guard(alphabet_size ** N, "data set")
    return list(itertools.product(range(alphabet_size), repeat=N))


def mutual_information(joint) -> float:
    """I(A;B) of a 2-D joint probability table."""
    J = np.asarray(joint, dtype=np.float64)
    pa = J.sum(axis=1, keepdims=True)
    pb = J.sum(axis=0, keepdims=True)
    return max(float(np.sum(_xlogy_ratio(J, pa * pb))), 0.0)


def exact_mutual_information(learner, data_probs) -> float:
    """I(phi; D) for a learner table ``p(phi | D)`` of shape (n_datasets, n_hyp)."""
    L = np.asarray(learner, dtype=np.float64)
    pD = np.asarray(data_probs, dtype=np.float64)
    _guard(L.size)
    if L.shape[0] != pD.size:
        raise ValueError("learner rows must match the data distribution")
    return mutual_information(pD[:, None] * L)


def mi_generalization_bound(mi, sigma2, N) -> float:
    """Single-task bound ``sqrt(2 sigma^2 I / N)``."""
    if mi < 0 or sigma2 < 0 or N < 1:
        raise ValueError("need mi >= 0, sigma2 >= 0, N >= 1")
    return math.sqrt(2.0 * sigma2 * mi / N)


def expected_generalization_gap(learner, symbol_probs, loss, N) -> float:
    """``E[L_pop(phi) - L_train(phi)]`` by enumeration over data sets.

    ``loss`` has shape (n_symbols, n_hyp) with entries in [0, 1].
    """
    p = np.asarray(symbol_probs, dtype=np.float64)
    ell = np.asarray(loss, dtype=np.float64)
    pD = dataset_distribution(p, N)
    L = np.asarray(learner, dtype=np.float64)
    pop = p @ ell                                           # population loss per hypothesis
    train = np.array([ell[list(d)].mean(axis=0) for d in datasets(p.size, N)])
    return float(np.sum(pD[:, None] * L * (pop[None, :] - train)))


# ---------------------------------------------------------------------------
# Meta-learning on a finite environment


@dataclass(frozen=True)
class FiniteEnvironment:
    task_probs: np.ndarray      # (n_tasks,)
    data_probs: np.ndarray      # (n_tasks, n_symbols): p(z | T)
    loss: np.ndarray            # (n_symbols, n_hyp) in [0, 1]
    N: int
    K: int

    def __post_init__(self):
        pt, pz, ell = (np.asarray(a, dtype=np.float64)
                       for a in (self.task_probs, self.data_probs, self.loss))
        if abs(pt.sum() - 1) > 1e-12 or np.any(pt < 0):
            raise ValueError("task distribution not normalized")
        if np.any(np.abs(pz.sum(axis=1) - 1) > 1e-12) or np.any(pz < 0):
            raise ValueError("data distributions not normalized")
        if np.any(ell < 0) or np.any(ell > 1):
            raise ValueError("loss must lie in [0, 1]")
        if pz.shape[1] != ell.shape[0]:
            raise ValueError("loss rows must match the data alphabet")

    @property
    def n_symbols(self):
        return self.data_probs.shape[1]

    @property
    def n_datasets(self):
        return self.n_symbols ** self.N

    def dataset_probs_given_task(self):
        return dataset_distribution(self.data_probs, self.N)      # (n_tasks, n_datasets)

    def marginal_dataset_probs(self):
        return self.task_probs @ self.dataset_probs_given_task()

    def training_losses(self):
        """Empirical loss of every hypothesis on every data set, (n_datasets, n_hyp)."""
        ell = np.asarray(self.loss, dtype=np.float64)
        return np.array([ell[list(d)].mean(axis=0) for d in datasets(self.n_symbols, self.N)])

    def population_losses(self):
        return np.asarray(self.data_probs) @ np.asarray(self.loss)   # (n_tasks, n_hyp)


def _meta_datasets(env):
    n = env.n_datasets
    _guard(n ** env.K, "meta-training")
    return list(itertools.product(range(n), repeat=env.K))


def meta_generalization_bound(env: FiniteEnvironment, base_learner, meta_learner,
                              delta2=BOUNDED_LOSS_SUBGAUSS, sigma2=BOUNDED_LOSS_SUBGAUSS):
    """Return ``(bound, exact_gap)`` for a finite environment.

    ``base_learner[t, D, phi] = p(phi | D, theta_t)`` and
    ``meta_learner[M, t] = p(theta_t | D^mtr = M)`` where M enumerates
    ordered K-tuples of data set indices.
    """
    B = np.asarray(base_learner, dtype=np.float64)
    Q = np.asarray(meta_learner, dtype=np.float64)
    pD = env.marginal_dataset_probs()
    metas = _meta_datasets(env)
    if Q.shape[0] != len(metas):
        raise ValueError("meta-learner rows must enumerate the meta-training sets")
    pM = np.array([np.prod(pD[list(m)]) for m in metas])
    train = env.training_losses()                       # (nD, nphi)
    pop = env.population_losses()                       # (nT, nphi)
    pDT = env.dataset_probs_given_task()                # (nT, nD)

    # per-theta losses
    Ltrain = np.einsum("tdp,dp->td", B, train)           # L_D(theta): (ntheta, nD)
    Lpop = np.einsum("T,Td,tdp,Tp->t", env.task_probs, pDT, B, pop)   # L(theta)
    meta_train = np.array([Ltrain[:, list(m)].mean(axis=1) for m in metas])  # (nM, ntheta)
    gap = float(np.sum(pM[:, None] * Q * (Lpop[None, :] - meta_train)))

    mi_env = mutual_information(pM[:, None] * Q)
    ptheta = pM @ Q
    mixed = np.einsum("t,tdp->dp", ptheta, B)            # learner with theta marginalized
    within = sum(pt * mi_generalization_bound(mutual_information(pDT[i][:, None] * mixed), sigma2, env.N)
                 for i, pt in enumerate(env.task_probs))
    bound = math.sqrt(2.0 * delta2 * mi_env / env.K) + within
    return float(bound), abs(gap)


def task_relatedness_gaussian(N, nu_bar2, nu2) -> float:
    """Average KL between data-set distributions of two independent tasks."""
    if nu2 <= 0 or nu_bar2 < 0:
        raise ValueError("need nu2 > 0 and nu_bar2 >= 0")
    return N * nu_bar2 / nu2


def task_relatedness_gaussian_mc(N, nu_bar2, nu2, n_pairs, rng, mean=0.0) -> float:
    """Monte-Carlo average of the closed-form per-pair KL."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    tau = mean + math.sqrt(nu_bar2) * gen.standard_normal((n_pairs, 2))
    return float(np.mean(N * (tau[:, 0] - tau[:, 1]) ** 2 / (2 * nu2)))


def _js(p, q):
    m = 0.5 * (p + q)
    return 0.5 * float(np.sum(_xlogy_ratio(p, m))) + 0.5 * float(np.sum(_xlogy_ratio(q, m)))


def task_relatedness_finite(env: FiniteEnvironment, divergence="kl") -> float:
    """``E_{T, T'} D(p(D_T) || p(D_T'))`` by enumeration over data sets."""
    P = env.dataset_probs_given_task()
    pt = np.asarray(env.task_probs, dtype=np.float64)
    total = 0.0
    for i, j in itertools.product(range(len(pt)), repeat=2):
        if divergence == "kl":
            if np.any((P[j] == 0) & (P[i] > 0)):
                return math.inf
            d = float(np.sum(_xlogy_ratio(P[i], P[j])))
        elif divergence == "js":
            d = _js(P[i], P[j])
        else:
            raise ValueError(f"unknown divergence {divergence!r}")
        total += pt[i] * pt[j] * d
    return total


# ---------------------------------------------------------------------------
# Gibbs meta-learner


def imrm_losses(prior_phi, task_losses, beta):
    """Regularized meta-training loss per hyperparameter with Gibbs base learners.

    ``prior_phi[t, phi] = q(phi | theta_t)``; ``task_losses[k, phi]`` are the
    training losses of each hypothesis on each meta-training task. With a
    Gibbs base learner the per-task term ``E[L] + KL/beta`` equals
    ``-(1/beta) log sum_phi q(phi|theta) exp(-beta L(phi))``.
    """
    Qp = np.asarray(prior_phi, dtype=np.float64)
    Lk = np.asarray(task_losses, dtype=np.float64)
    out = np.zeros(Qp.shape[0])
    for t in range(Qp.shape[0]):
        vals = []
        for k in range(Lk.shape[0]):
            post = gibbs_posterior(Qp[t], Lk[k], beta)
            kl = float(np.sum(_xlogy_ratio(post, Qp[t])))
            vals.append(float(post @ Lk[k]) + kl / beta)
        out[t] = np.mean(vals)
    return out


def gibbs_meta_learner(hyperprior, imrm, beta):
    """``p(theta | D^mtr) ~ q(theta) exp(-beta L_IMRM(theta))``."""
    return gibbs_posterior(hyperprior, imrm, beta)


# ---------------------------------------------------------------------------
# Minimum excess meta-risk on a hierarchical Bernoulli model


def memr_decomposition_bound(mi_hyper, mi_model, K, N) -> float:
    if K < 1 or N < 1:
        raise ValueError("need K, N >= 1")
    return mi_hyper / (K * N) + mi_model / N


@dataclass(frozen=True)
class HierarchicalBernoulli:
    """theta -> phi -> (X, Y) with binary labels.

    ``y_probs[phi, x] = P(Y = 1 | X = x, phi)``; a sample is the symbol
    ``2 x + y``.
    """

    theta_prior: np.ndarray     # (n_theta,)
    phi_given_theta: np.ndarray  # (n_theta, n_phi)
    x_probs: np.ndarray         # (n_x,)
    y_probs: np.ndarray         # (n_phi, n_x)
    N: int
    K: int

    def symbol_probs(self):
        px = np.asarray(self.x_probs, dtype=np.float64)
        q = np.asarray(self.y_probs, dtype=np.float64)
        out = np.empty((q.shape[0], 2 * px.size))
        out[:, 0::2] = px[None, :] * (1 - q)
        out[:, 1::2] = px[None, :] * q
        return out

    @classmethod
    def random(cls, rng, n_theta=2, n_phi=3, n_x=2, N=2, K=2):
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return cls(gen.dirichlet(np.ones(n_theta)), gen.dirichlet(np.ones(n_phi), size=n_theta),
                   gen.dirichlet(np.ones(n_x)), gen.uniform(0.05, 0.95, size=(n_phi, n_x)), N, K)


def memr_quantities(model: HierarchicalBernoulli):
    """Enumerate the hierarchical joint.

    Returns a dict with ``H_Y_given_XD``, ``H_Y_given_Xphi``, ``memr`` (their
    difference), ``memr_direct`` (conditional MI summed term by term),
    ``mi_hyper`` = I(theta; D^mtr) and ``mi_model`` = I(phi; D_T | theta).
    """
    pth = np.asarray(model.theta_prior, dtype=np.float64)
    pphi = np.asarray(model.phi_given_theta, dtype=np.float64)
    px = np.asarray(model.x_probs, dtype=np.float64)
    q = np.asarray(model.y_probs, dtype=np.float64)
    PD_phi = dataset_distribution(model.symbol_probs(), model.N)      # (nphi, nD)
    PD_th = pphi @ PD_phi                                              # (ntheta, nD)
    nD = PD_phi.shape[1]
    _guard(nD ** model.K * nD * len(pth) * q.size, "hierarchical")

    PM_th = np.ones((len(pth), 1))
    for _ in range(model.K):
        PM_th = (PM_th[:, :, None] * PD_th[:, None, :]).reshape(len(pth), -1)
    mi_hyper = mutual_information(pth[:, None] * PM_th)
    mi_model = float(sum(pt * mutual_information(pphi[t][:, None] * PD_phi)
                         for t, pt in enumerate(pth)))

    # joint over (M, D_T, phi, x, y)
    A = pth[:, None] * PM_th                                # (ntheta, nM): p(theta, M)
    W = A.T @ pphi                                          # (nM, nphi): sum_theta p(theta,M)p(phi|theta)
    J_MDphi = W[:, None, :] * PD_phi.T[None, :, :]          # (nM, nD, nphi)
    H_XD = 0.0
    memr_direct = 0.0
    for xi in range(px.size):
        for y in (0, 1):
            py = q[:, xi] if y else 1 - q[:, xi]            # p(y | x, phi)
            J = J_MDphi * (px[xi] * py)[None, None, :]     # p(M, D_T, phi, x, y)
            Jy = J.sum(axis=2)                              # p(M, D_T, x, y)
            Jx = J_MDphi.sum(axis=2) * px[xi]               # p(M, D_T, x)
            m = Jy > 0
            H_XD -= float(np.sum(Jy[m] * np.log(Jy[m] / Jx[m])))
            pyD = np.where(Jx > 0, Jy / np.where(Jx > 0, Jx, 1.0), 0.0)   # p(y | x, M, D_T)
            ratio = py[None, None, :] / np.where(pyD > 0, pyD, 1.0)[:, :, None]
            mask = J > 0
            memr_direct += float(np.sum(J[mask] * np.log(ratio[mask])))
    pphi_marg = pth @ pphi
    hb = -(q * np.log(q) + (1 - q) * np.log(1 - q))
    H_Xphi = float(pphi_marg @ (hb @ px))
    return {"H_Y_given_XD": H_XD, "H_Y_given_Xphi": H_Xphi, "memr": H_XD - H_Xphi,
            "memr_direct": memr_direct, "mi_hyper": mi_hyper, "mi_model": mi_model}
