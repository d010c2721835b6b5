"""Differentiable models with analytic gradients and Hessian-vector products.

HVPs use forward-over-reverse (R-operator) recurrences, so ``hvp`` is exact
up to round-off for every architecture here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Objective, RngStream, as_stream, check_finite


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# Linear regression


@dataclass(frozen=True)
class LinearModel:
    """``y_hat = X @ phi`` with phi of size d, or d*S (row-major d x S) for S outputs.

    ``normalized=False`` gives the unnormalized loss ``||X phi - y||^2``;
    ``normalized=True`` divides by the number of samples.
    """

    dim: int
    n_outputs: int = 1
    normalized: bool = False

    @property
    def n_params(self):
        return self.dim * self.n_outputs

    def _w(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {phi.size}")
        return phi.reshape(self.dim, self.n_outputs)

    def _xy(self, x, y):
        x = _rows(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.dim}")
        y = np.asarray(y, dtype=np.float64).reshape(len(x), self.n_outputs)
        if len(x) == 0:
            raise ValueError("empty data")
        return x, y

    def _scale(self, n):
        return 1.0 / n if self.normalized else 1.0

    def predict(self, phi, x):
        out = _rows(x) @ self._w(phi)
        return out[:, 0] if self.n_outputs == 1 else out

    def loss(self, phi, x, y):
        x, y = self._xy(x, y)
        r = x @ self._w(phi) - y
        return float(self._scale(len(x)) * np.sum(r * r))

    def grad(self, phi, x, y):
        x, y = self._xy(x, y)
        r = x @ self._w(phi) - y
        return (2.0 * self._scale(len(x)) * (x.T @ r)).reshape(-1)

    def hvp(self, phi, x, y, v):
        x, _ = self._xy(x, y)
        v = self._w(v)
        return (2.0 * self._scale(len(x)) * (x.T @ (x @ v))).reshape(-1)

    def objective(self, x, y):
        return ModelObjective(self, x, y)


# ---------------------------------------------------------------------------
# Multilayer perceptrons


_ACTS = ("tanh", "relu")


def _act(kind, z):
    """Return activation value, first and second derivative."""
    if kind == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    a = np.maximum(z, 0.0)
    d1 = (z > 0).astype(np.float64)
    return a, d1, np.zeros_like(z)


class _Mlp:
    """Fully connected network with linear output layer.

    Parameters are flattened layer by layer as ``W (fan_in x fan_out)`` in
    row-major order followed by the bias ``b``. A context vector of size
    ``context_dim`` is appended to every input row; it is kept outside the
    parameter vector and handled through the ``*_ctx``/``*_joint`` methods.
    """

    def __init__(self, input_dim, hidden, output_dim, activation="tanh", context_dim=0):
        if activation not in _ACTS:
            raise ValueError(f"unknown activation {activation!r}")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.output_dim = int(output_dim)
        self.activation = activation
        self.context_dim = int(context_dim)
        sizes = (self.input_dim + self.context_dim,) + self.hidden + (self.output_dim,)
        self.sizes = sizes
        self._slices = []
        off = 0
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            w = slice(off, off + fi * fo)
            off += fi * fo
            b = slice(off, off + fo)
            off += fo
            self._slices.append((w, b, fi, fo))
        self.n_params = off

    # parameter layout ---------------------------------------------------
    def unpack(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {phi.shape}")
        return [(phi[w].reshape(fi, fo), phi[b]) for w, b, fi, fo in self._slices]

    def pack(self, layers):
        return np.concatenate([np.concatenate([W.reshape(-1), b]) for W, b in layers])

    def init_params(self, rng=0):
        if isinstance(rng, np.random.Generator):
            gen = rng
        else:
            gen = as_stream(rng).generator()
        layers = []
        for _, _, fi, fo in self._slices:
            lim = 1.0 / np.sqrt(fi)
            layers.append((gen.uniform(-lim, lim, size=(fi, fo)), np.zeros(fo)))
        return self.pack(layers)

    # forward/backward ----------------------------------------------------
    def _input(self, x, ctx):
        x = _rows(x)
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.input_dim}")
        if self.context_dim == 0:
            return x
        c = np.zeros(self.context_dim) if ctx is None else np.asarray(ctx, dtype=np.float64)
        if c.shape != (self.context_dim,):
            raise ValueError("context has wrong dimension")
        return np.hstack([x, np.broadcast_to(c, (len(x), self.context_dim))])

    def _forward(self, layers, a0):
        acts, zs = [a0], []
        a = a0
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            zs.append(z)
            if i < len(layers) - 1:
                a = _act(self.activation, z)[0]
                acts.append(a)
        return acts, zs

    def logits(self, phi, x, ctx=None):
        acts, zs = self._forward(self.unpack(phi), self._input(x, ctx))
        return zs[-1]

    # loss-specific pieces supplied by subclasses
    def _out_loss(self, z, y):
        raise NotImplementedError

    def _out_delta(self, z, y):
        raise NotImplementedError

    def _out_rdelta(self, z, y, rz):
        raise NotImplementedError

    def _check_y(self, y, n):
        raise NotImplementedError

    def loss(self, phi, x, y, ctx=None):
        z = self.logits(phi, x, ctx)
        return float(check_finite(self._out_loss(z, self._check_y(y, len(z))), "loss"))

    def _backprop(self, phi, x, y, ctx, v=None, u=None):
        """Gradient (and R-op of the gradient along (v, u)) in (phi, ctx)."""
        layers = self.unpack(phi)
        a0 = self._input(x, ctx)
        y = self._check_y(y, len(a0))
        acts, zs = self._forward(layers, a0)
        nl = len(layers)
        derivs = [_act(self.activation, z) for z in zs[:-1]]
        rop = v is not None or u is not None
        if rop:
            vl = self.unpack(np.zeros(self.n_params) if v is None else v)
            ra = np.zeros_like(a0)
            if self.context_dim and u is not None:
                ra[:, self.input_dim:] = np.asarray(u, dtype=np.float64)
            r_acts, r_zs = [ra], []
            for i, ((W, b), (V, vb)) in enumerate(zip(layers, vl)):
                rz = ra @ W + acts[i] @ V + vb
                r_zs.append(rz)
                if i < nl - 1:
                    ra = derivs[i][1] * rz
                    r_acts.append(ra)
        delta = self._out_delta(zs[-1], y)
        rdelta = self._out_rdelta(zs[-1], y, r_zs[-1]) if rop else None
        grads, rgrads = [None] * nl, [None] * nl
        g_in = rg_in = None
        for i in range(nl - 1, -1, -1):
            W = layers[i][0]
            grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
            if rop:
                V = vl[i][0]
                rgrads[i] = (r_acts[i].T @ delta + acts[i].T @ rdelta, rdelta.sum(axis=0))
            ga = delta @ W.T
            if rop:
                rga = rdelta @ W.T + delta @ V.T
            if i == 0:
                g_in = ga
                if rop:
                    rg_in = rga
                break
            _, d1, d2 = derivs[i - 1]
            if rop:
                rdelta = rga * d1 + ga * d2 * r_zs[i - 1]
            delta = ga * d1
        g = self.pack(grads)
        gc = g_in[:, self.input_dim:].sum(axis=0)
        if not rop:
            return g, gc
        return g, gc, self.pack(rgrads), rg_in[:, self.input_dim:].sum(axis=0)

    def grad(self, phi, x, y, ctx=None):
        return check_finite(self._backprop(phi, x, y, ctx)[0], "gradient")

    def hvp(self, phi, x, y, v, ctx=None):
        return check_finite(self._backprop(phi, x, y, ctx, v=v)[2], "hvp")

    # context derivatives -------------------------------------------------
    def grad_ctx(self, phi, x, y, ctx=None):
        return self._backprop(phi, x, y, ctx)[1]

    def grad_joint(self, phi, x, y, ctx=None):
        """Gradients with respect to (phi, ctx)."""
        return self._backprop(phi, x, y, ctx)[:2]

    def hvp_joint(self, phi, x, y, ctx, v, u):
        """Joint Hessian in (phi, ctx) applied to (v, u); returns both blocks."""
        out = self._backprop(phi, x, y, ctx, v=v, u=u)
        return out[2], out[3]

    def objective(self, x, y, ctx=None):
        return ModelObjective(self, x, y, ctx=ctx)


class MlpRegressor(_Mlp):
    """MLP regressor with loss ``(1/N) sum ||y_hat - y||^2``."""

    def __init__(self, input_dim=1, hidden=(40, 40), output_dim=1, activation="tanh",
                 context_dim=0):
        super().__init__(input_dim, hidden, output_dim, activation, context_dim)

    def _check_y(self, y, n):
        y = np.asarray(y, dtype=np.float64).reshape(n, self.output_dim)
        if n == 0:
            raise ValueError("empty data")
        return y

    def predict(self, phi, x, ctx=None):
        z = self.logits(phi, x, ctx)
        return z[:, 0] if self.output_dim == 1 else z

    def _out_loss(self, z, y):
        r = z - y
        return np.sum(r * r) / len(z)

    def _out_delta(self, z, y):
        return 2.0 * (z - y) / len(z)

    def _out_rdelta(self, z, y, rz):
        return 2.0 * rz / len(z)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


class SoftmaxClassifier(_Mlp):
    """MLP with softmax output and mean cross-entropy loss.

    Targets are integer class indices in ``[0, n_classes)``.
    """

    def __init__(self, input_dim=2, hidden=(30, 30), n_classes=16, activation="relu"):
        super().__init__(input_dim, hidden, n_classes, activation, 0)

    @property
    def n_classes(self):
        return self.output_dim

    def _check_y(self, y, n):
        y = np.asarray(y).reshape(-1)
        if len(y) != n:
            raise ValueError("targets and inputs differ in length")
        if n == 0:
            raise ValueError("empty data")
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise ValueError("targets must be class indices")
            y = y.astype(np.int64)
        if np.any((y < 0) | (y >= self.n_classes)):
            raise ValueError("class index out of range")
        return y

    def predict_proba(self, phi, x):
        return np.exp(_log_softmax(self.logits(phi, x)))

    def predict(self, phi, x):
        return np.argmax(self.logits(phi, x), axis=1)

    def _out_loss(self, z, y):
        return -np.mean(_log_softmax(z)[np.arange(len(z)), y])

    def _out_delta(self, z, y):
        p = np.exp(_log_softmax(z))
        p[np.arange(len(z)), y] -= 1.0
        return p / len(z)

    def _out_rdelta(self, z, y, rz):
        p = np.exp(_log_softmax(z))
        return (p * rz - p * np.sum(p * rz, axis=1, keepdims=True)) / len(z)


def cross_entropy_loss(clf: SoftmaxClassifier, phi, x, y):
    return clf.loss(phi, x, y)


def mse_loss(model, phi, x, y):
    return model.loss(phi, x, y)


# ---------------------------------------------------------------------------


class ModelObjective(Objective):
    """A model bound to a fixed data split (and optionally a fixed context)."""

    def __init__(self, model, x, y, ctx=None):
        self.model, self.x, self.y = model, x, y
        self.ctx = ctx
        self._kw = {} if ctx is None else {"ctx": ctx}

    def loss(self, phi):
        return self.model.loss(phi, self.x, self.y, **self._kw)

    def grad(self, phi):
        return self.model.grad(phi, self.x, self.y, **self._kw)

    def hvp(self, phi, v):
        return self.model.hvp(phi, self.x, self.y, v, **self._kw)


def sinusoid_mlp(context_dim=0):
    return MlpRegressor(1, (40, 40), 1, "tanh", context_dim)


def demod_classifier(n_classes=16):
    return SoftmaxClassifier(2, (30, 30), n_classes, "relu")


def default_init(model, seed=0) -> np.ndarray:
    return model.init_params(RngStream(seed, (0,)))
