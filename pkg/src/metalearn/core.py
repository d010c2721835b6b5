"""Numeric types, task containers, random streams and derivative oracles.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Everything in this
module is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A computation produced non-finite values or broke down."""

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration budget."""

    def __init__(self, message, residual=None, iteration=None):
        super().__init__(message, iteration=iteration)
        self.residual = residual


def as_param(values) -> np.ndarray:
    """Copy ``values`` into a finite, flat float64 parameter vector."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("parameter vector must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise NumericError("parameter vector contains non-finite entries")
    return arr


def check_finite(arr, what="value", iteration=None):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}", iteration=iteration)
    return arr


# ---------------------------------------------------------------------------
# Random streams


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by ``(root_seed, path)``.

    Each path maps to its own Philox key through ``SeedSequence`` spawn keys,
    so draws never depend on the order in which streams are consumed.
    """

    root_seed: int
    path: tuple = ()

    def child(self, *indices) -> "RngStream":
        return RngStream(self.root_seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.root_seed) & ((1 << 64) - 1),
                                     spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class TaskDataset:
    """Train/validation split of one task. Inputs are row-stacked."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    task_id: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.train_x.shape[1:] != self.val_x.shape[1:]:
            raise ValueError("train and val inputs disagree in dimension")
        if self.train_y.shape[1:] != self.val_y.shape[1:]:
            raise ValueError("train and val targets disagree in dimension")
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ValueError("inputs and targets differ in length")

    @property
    def train(self):
        return self.train_x, self.train_y

    @property
    def val(self):
        return self.val_x, self.val_y

    @classmethod
    def from_samples(cls, x, y, n_train, task_id=0, info=None):
        (tx, vx), (ty, vy) = split_dataset(x, n_train), split_dataset(y, n_train)
        return cls(tx, ty, vx, vy, task_id, info or {})


@dataclass(frozen=True)
class MetaBatch:
    tasks: tuple
    environment_seed: int = 0

    def __post_init__(self):
        if len(self.tasks) == 0:
            raise ValueError("meta batch must contain at least one task")
        ids = [t.task_id for t in self.tasks]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("task ids must be strictly increasing")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def split_dataset(samples, n_train: int):
    """Prefix split: the first ``n_train`` samples train, the rest validate."""
    n = len(samples)
    if not 0 <= n_train <= n:
        raise ValueError(f"n_train={n_train} outside [0, {n}]")
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------------------
# Objectives


class Objective:
    """Loss over a parameter vector with gradient and Hessian-vector product."""

    def loss(self, phi) -> float:
        raise NotImplementedError

    def grad(self, phi) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, phi, v) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, phi):
        return self.loss(phi), self.grad(phi)


class QuadraticObjective(Objective):
    """``0.5 (phi - c)^T H (phi - c) + g^T phi + const``.

    Used for closed-form checks; ``H`` may be singular or zero.
    """

    def __init__(self, hessian, center=None, linear=None, const=0.0):
        h = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        self.H = 0.5 * (h + h.T)
        d = self.H.shape[0]
        self.c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64).reshape(d)
        self.g = np.zeros(d) if linear is None else np.asarray(linear, dtype=np.float64).reshape(d)
        self.const = float(const)

    def loss(self, phi):
        r = np.asarray(phi, dtype=np.float64) - self.c
        return float(0.5 * r @ self.H @ r + self.g @ phi + self.const)

    def grad(self, phi):
        return self.H @ (np.asarray(phi, dtype=np.float64) - self.c) + self.g

    def hvp(self, phi, v):
        return self.H @ np.asarray(v, dtype=np.float64)


class FunctionObjective(Objective):
    """Wrap plain callables; ``hvp`` falls back to finite differences."""

    def __init__(self, loss, grad=None, hvp=None):
        self._loss, self._grad, self._hvp = loss, grad, hvp

    def loss(self, phi):
        return float(self._loss(phi))

    def grad(self, phi):
        if self._grad is None:
            return finite_diff_grad(self, phi)
        return np.asarray(self._grad(phi), dtype=np.float64)

    def hvp(self, phi, v):
        if self._hvp is None:
            return finite_diff_hvp(self, phi, v)
        return np.asarray(self._hvp(phi, v), dtype=np.float64)


class ScaledSum(Objective):
    """Weighted sum of objectives sharing one parameter vector."""

    def __init__(self, objectives: Sequence[Objective], weights=None):
        self.objectives = list(objectives)
        n = len(self.objectives)
        self.weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)

    def loss(self, phi):
        return float(sum(w * o.loss(phi) for w, o in zip(self.weights, self.objectives)))

    def grad(self, phi):
        return sum(w * o.grad(phi) for w, o in zip(self.weights, self.objectives))

    def hvp(self, phi, v):
        return sum(w * o.hvp(phi, v) for w, o in zip(self.weights, self.objectives))


# ---------------------------------------------------------------------------
# Finite-difference oracles

DEFAULT_GRAD_STEP = 1e-5
DEFAULT_HVP_STEP = 1e-4


def _scalar(fn: Callable, x):
    val = float(fn(x))
    if not np.isfinite(val):
        raise NumericError("non-finite loss at finite-difference probe")
    return val


def finite_diff_grad(obj, phi, h: float = DEFAULT_GRAD_STEP) -> np.ndarray:
    """Central differences of ``obj.loss`` (or of a plain callable)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    fn = obj.loss if hasattr(obj, "loss") else obj
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    out = np.empty_like(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = h
        out[i] = (_scalar(fn, phi + e) - _scalar(fn, phi - e)) / (2 * h)
    return out


def finite_diff_hvp(obj, phi, v, h: float = DEFAULT_HVP_STEP) -> np.ndarray:
    """``(grad(phi + h v) - grad(phi - h v)) / 2h``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("direction must be finite")
    phi = np.asarray(phi, dtype=np.float64)
    gp, gm = obj.grad(phi + h * v), obj.grad(phi - h * v)
    out = (gp - gm) / (2 * h)
    return check_finite(out, "finite-difference hvp")


def relative_error(a, b, floor=1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))


# ---------------------------------------------------------------------------
# Optimizers


def adam_step(theta, grad, moments, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam step; ``t`` counts from 1."""
    m, v = moments if moments is not None else (np.zeros_like(theta), np.zeros_like(theta))
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return theta - lr * mh / (np.sqrt(vh) + eps), (m, v)
