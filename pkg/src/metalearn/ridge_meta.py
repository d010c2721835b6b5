"""Closed-form proximal meta-learning for ridge regression.

Inner problem per task::

    phi_k(theta) = argmin ||X_tr phi - y_tr||^2 + (lam/2) ||phi - theta||^2
                 = A^{-1} (X_tr^T y_tr + (lam/2) theta),   A = X_tr^T X_tr + (lam/2) I

and the meta-objective ``sum_k ||X_va phi_k(theta) - y_va||^2`` is an ordinary
least-squares problem in theta.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

COND_LIMIT = 1e12
RANK_RTOL = 1e-12


class IllConditionedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class RidgeTask:
    X_tr: np.ndarray
    y_tr: np.ndarray
    X_va: np.ndarray
    y_va: np.ndarray
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        d = self.X_tr.shape[1]
        if self.X_va.shape[1] != d:
            raise ValueError("train and val inputs disagree in dimension")
        if len(self.y_tr) != len(self.X_tr) or len(self.y_va) != len(self.X_va):
            raise ValueError("inputs and targets differ in length")
        if self.y_tr.shape[1:] != self.y_va.shape[1:]:
            raise ValueError("train and val targets disagree in dimension")

    @classmethod
    def make(cls, X_tr, y_tr, X_va, y_va, lam):
        f = lambda a: np.asarray(a, dtype=np.float64)
        X_tr, X_va = np.atleast_2d(f(X_tr)), np.atleast_2d(f(X_va))
        if X_tr.shape[0] == 1 and X_tr.shape[1] != X_va.shape[1]:
            X_tr = X_tr.T
        return cls(X_tr, f(y_tr), X_va.reshape(-1, X_tr.shape[1]), f(y_va), float(lam))

    @property
    def dim(self):
        return self.X_tr.shape[1]

    def gram(self):
        return self.X_tr.T @ self.X_tr + 0.5 * self.lam * np.eye(self.dim)


def _factor(A):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        warnings.warn(f"ridge system condition number {cond:.3g} exceeds {COND_LIMIT:g}",
                      IllConditionedWarning, stacklevel=3)
    return linalg.cho_factor(A, lower=True)


def ridge_inner_closed_form(task: RidgeTask, theta) -> np.ndarray:
    """Per-task proximal ridge solution; theta has the shape of one column set of y."""
    theta = np.asarray(theta, dtype=np.float64)
    rhs = task.X_tr.T @ task.y_tr + 0.5 * task.lam * theta.reshape((task.dim,) + task.y_tr.shape[1:])
    return linalg.cho_solve(_factor(task.gram()), rhs)


def ridge_inner_objective(task: RidgeTask, phi, theta) -> float:
    r = task.X_tr @ phi - task.y_tr
    dev = np.asarray(phi) - np.asarray(theta).reshape(np.shape(phi))
    return float(np.sum(r * r) + 0.5 * task.lam * np.sum(dev * dev))


def ridge_inner_gradient(task: RidgeTask, phi, theta):
    dev = np.asarray(phi) - np.asarray(theta).reshape(np.shape(phi))
    return 2.0 * task.X_tr.T @ (task.X_tr @ phi - task.y_tr) + task.lam * dev


def preconditioned_system(task: RidgeTask):
    """Rows of the stacked least-squares problem contributed by one task."""
    cf = _factor(task.gram())
    # A is symmetric, so (A^{-1} x)^T = x^T A^{-1}
    Xt = 0.5 * task.lam * linalg.cho_solve(cf, task.X_va.T).T
    offset = task.X_va @ linalg.cho_solve(cf, task.X_tr.T @ task.y_tr)
    return Xt, task.y_va - offset


def ridge_meta_closed_form(tasks, return_info=False):
    """Least-squares meta-parameter; minimum-norm solution when rank deficient."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    blocks = [preconditioned_system(t) for t in tasks]
    Xs = np.vstack([b[0] for b in blocks])
    ys = np.concatenate([b[1] for b in blocks], axis=0)
    theta, _, rank, sv = linalg.lstsq(Xs, ys, cond=RANK_RTOL, lapack_driver="gelsd")
    if not return_info:
        return theta
    return theta, {"rank": int(rank), "full_rank": int(rank) == Xs.shape[1],
                   "singular_values": sv}


def ridge_meta_loss(tasks, theta) -> float:
    """Summed validation loss of the adapted per-task solutions."""
    total = 0.0
    for t in tasks:
        r = t.X_va @ ridge_inner_closed_form(t, theta) - t.y_va
        total += float(np.sum(r * r))
    return total
