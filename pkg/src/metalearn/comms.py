"""Communications task environments: few-pilot demodulation and channel prediction.

Complex baseband samples enter the learners as real ``[Re, Im]`` features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import TaskDataset, as_stream
from .ridge_meta import RidgeTask, ridge_inner_closed_form, ridge_meta_closed_form


def _gen(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return as_stream(rng).generator()


def _cn(gen, size, var=1.0):
    """Circularly-symmetric complex Gaussian samples."""
    return math.sqrt(var / 2) * (gen.standard_normal(size) + 1j * gen.standard_normal(size))


def to_real(z):
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1)


def to_complex(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0] + 1j * x[..., 1]


# ---------------------------------------------------------------------------
# Demodulation


def qam16():
    """Gray-free 16-QAM grid with unit average energy, row-major in (I, Q)."""
    lv = np.array([-3.0, -1.0, 1.0, 3.0])
    pts = (lv[:, None] + 1j * lv[None, :]).ravel()
    return pts / math.sqrt(10.0)


@dataclass(frozen=True)
class DemodTaskParams:
    h: complex = 1.0 + 0.0j
    N0: float = 0.01
    eps: float = 0.0            # I/Q amplitude imbalance
    delta: float = 0.0          # I/Q phase imbalance, radians
    n_pilots: int = 8
    constellation: np.ndarray = field(default_factory=qam16, compare=False)

    def __post_init__(self):
        if not self.N0 > 0:
            raise ValueError("noise power N0 must be positive")
        if self.n_pilots < 0:
            raise ValueError("n_pilots must be nonnegative")
        c = np.asarray(self.constellation)
        if len(np.unique(np.round(c, 12))) != len(c):
            raise ValueError("constellation points must be distinct")

    @property
    def iq_coeffs(self):
        mu = math.cos(self.delta) + 1j * self.eps * math.sin(self.delta)
        nu = self.eps * math.cos(self.delta) - 1j * math.sin(self.delta)
        return mu, nu

    @property
    def snr_db(self):
        return 10 * math.log10(1.0 / self.N0)


def snr_to_noise(snr_db):
    return 10.0 ** (-snr_db / 10.0)


def sample_demod_params(rng, snr_db=20.0, n_pilots=8, max_eps=0.15, max_delta_deg=15.0):
    """Per-device draw: Rayleigh gain and uniform I/Q imbalance."""
    g = _gen(rng)
    h = complex(_cn(g, ()))
    eps = g.uniform(0.0, max_eps)
    delta = math.radians(g.uniform(0.0, max_delta_deg))
    return DemodTaskParams(h, snr_to_noise(snr_db), eps, delta, n_pilots)


def transmit(params: DemodTaskParams, symbols, rng):
    """Received samples for the given symbol indices."""
    g = _gen(rng)
    s = np.asarray(params.constellation)[np.asarray(symbols)]
    mu, nu = params.iq_coeffs
    x = mu * s + nu * np.conj(s)
    return params.h * x + _cn(g, s.shape, params.N0)


def gen_demod_task(params: DemodTaskParams, rng, n_val=0, task_id=0) -> TaskDataset:
    """Pilots (train split) and extra labelled samples (val split) for one device."""
    g = _gen(rng)
    n = params.n_pilots + n_val
    labels = g.integers(0, len(params.constellation), size=n)
    y = transmit(params, labels, g)
    return TaskDataset.from_samples(to_real(y), labels, params.n_pilots, task_id,
                                    {"params": params})


def mmse_channel_estimate(pilot_syms, pilot_rx, N0, prior_var=1.0):
    """Posterior mean of h under ``y = h s + z`` with ``h ~ CN(0, prior_var)``."""
    s = np.asarray(pilot_syms, dtype=complex)
    y = np.asarray(pilot_rx, dtype=complex)
    return complex(np.sum(np.conj(s) * y) / (np.sum(np.abs(s) ** 2) + N0 / prior_var))


def ml_decide(rx, h_hat, constellation=None):
    """Nearest point of the scaled constellation; ties go to the lower index."""
    c = qam16() if constellation is None else np.asarray(constellation)
    d = np.abs(np.asarray(rx)[:, None] - h_hat * c[None, :])
    return np.argmin(d, axis=1)


def mmse_ml_baseline(task: TaskDataset, N0, constellation=None, test_x=None):
    """Decisions on ``test_x`` (default: the val split) from pilot-based MMSE+ML."""
    c = qam16() if constellation is None else np.asarray(constellation)
    h_hat = mmse_channel_estimate(c[task.train_y], to_complex(task.train_x), N0)
    rx = to_complex(task.val_x if test_x is None else test_x)
    return ml_decide(rx, h_hat, c)


def equalize_task(task: TaskDataset, N0, constellation=None) -> TaskDataset:
    """Divide every sample by the pilot-based MMSE gain estimate.

    Removes the unknown fading rotation so a learned demodulator only has
    to model the residual hardware distortion.
    """
    c = qam16() if constellation is None else np.asarray(constellation)
    h_hat = mmse_channel_estimate(c[task.train_y], to_complex(task.train_x), N0)
    if h_hat == 0:
        raise ValueError("channel estimate is zero; need at least one pilot")
    eq = lambda x: to_real(to_complex(x) / h_hat)
    info = dict(task.info, h_hat=h_hat)
    return TaskDataset(eq(task.train_x), task.train_y, eq(task.val_x), task.val_y,
                       task.task_id, info)


def symbol_error_rate(decisions, labels) -> float:
    decisions, labels = np.asarray(decisions), np.asarray(labels)
    if decisions.shape != labels.shape or labels.size == 0:
        raise ValueError("need equally sized, non-empty decision and label arrays")
    return float(np.count_nonzero(decisions != labels)) / labels.size


def ser_eval(clf, phi, x, labels) -> float:
    return symbol_error_rate(clf.predict(phi, x), labels)


def confidence(clf, phi, x):
    p = clf.predict_proba(phi, x)
    return np.argmax(p, axis=1), np.max(p, axis=1)


@dataclass(frozen=True)
class ReliabilityDiagram:
    edges: np.ndarray
    confidence: np.ndarray      # mean confidence per bin (nan when empty)
    accuracy: np.ndarray        # empirical accuracy per bin (nan when empty)
    counts: np.ndarray
    ece: float


def reliability_from(conf, correct, n_bins=10) -> ReliabilityDiagram:
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # right-closed bins, the first also includes 0
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    s_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    s_acc = np.bincount(idx, weights=correct, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mc = np.where(counts > 0, s_conf / counts, np.nan)
        ma = np.where(counts > 0, s_acc / counts, np.nan)
    total = counts.sum()
    nz = counts > 0
    ece = float(np.sum(counts[nz] / total * np.abs(ma[nz] - mc[nz]))) if total else 0.0
    return ReliabilityDiagram(edges, mc, ma, counts, ece)


def reliability_diagram(clf, phi, x, labels, n_bins=10) -> ReliabilityDiagram:
    dec, conf = confidence(clf, phi, x)
    return reliability_from(conf, dec == np.asarray(labels), n_bins)


# ---------------------------------------------------------------------------
# Channel prediction


@dataclass(frozen=True)
class ChannelPredTaskParams:
    S: int = 16
    R: int = 2
    L: int = 2
    delta: int = 1
    rho: complex = 0.95
    n_slots: int = 40
    noise_var: float = 0.0      # per-entry variance of the observed channel

    def __post_init__(self):
        if not 1 <= self.R <= self.S:
            raise ValueError("need 1 <= R <= S")
        if self.L < 1 or self.delta < 1:
            raise ValueError("window L and lag delta must be positive")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must not exceed 1")


def sample_chanpred_params(rng, S=16, R=2, L=2, delta=1, n_slots=40, noise_var=1e-3,
                           rho_range=(0.8, 0.99), max_phase=0.3):
    """Per-frame Doppler: AR(1) coefficient with random magnitude and phase."""
    g = _gen(rng)
    rho = g.uniform(*rho_range) * np.exp(1j * g.uniform(-max_phase, max_phase))
    return ChannelPredTaskParams(S, R, L, delta, complex(rho), n_slots, noise_var)


@dataclass(frozen=True)
class ChannelFrame:
    H: np.ndarray               # (n_slots, S) observed channels
    B: np.ndarray               # (S, R) long-term features
    D: np.ndarray               # (n_slots, R) fading amplitudes
    H_true: np.ndarray          # (n_slots, S) noiseless channels
    params: ChannelPredTaskParams


def gen_chanpred_frame(params: ChannelPredTaskParams, rng) -> ChannelFrame:
    g = _gen(rng)
    B, _ = np.linalg.qr(_cn(g, (params.S, params.R)))
    rho = params.rho
    innov = math.sqrt(max(1.0 - abs(rho) ** 2, 0.0))
    D = np.empty((params.n_slots, params.R), dtype=complex)
    D[0] = _cn(g, params.R)
    w = _cn(g, (params.n_slots, params.R))
    for l in range(1, params.n_slots):
        D[l] = rho * D[l - 1] + innov * w[l]
    H_true = D @ B.T
    H = H_true
    if params.noise_var > 0:
        H = H_true + _cn(g, H_true.shape, params.noise_var)
    return ChannelFrame(H, B, D, H_true, params)


def lstd_decompose(H, R):
    """Top-R left singular directions of the ``S x n_slots`` matrix and projections."""
    H = np.asarray(H)
    S = H.shape[1]
    if not 1 <= R <= S:
        raise ValueError(f"rank R={R} must lie in [1, S={S}]")
    U, _, _ = np.linalg.svd(H.T, full_matrices=False)
    B = U[:, :R]
    return B, H @ np.conj(B)        # d_l = B^H h_l, stacked as rows


def window_regression(seq, L, delta, start=0, stop=None):
    """Regressors ``vec[h_i, ..., h_{i-L+1}]`` and targets ``h_{i+delta}``.

    Rows are indexed by ``i`` with ``L-1+start <= i`` and ``i+delta < stop``;
    complex entries are returned as ``[Re, Im]`` blocks.
    """
    seq = np.asarray(seq)
    stop = len(seq) if stop is None else stop
    rows = range(L - 1 + start, stop - delta)
    X = np.array([np.concatenate([seq[i - j] for j in range(L)]) for i in rows])
    Y = np.array([seq[i + delta] for i in rows])
    if X.size == 0:
        return np.zeros((0, 2 * L * seq.shape[1])), np.zeros((0, 2 * seq.shape[1]))
    return (np.concatenate([X.real, X.imag], axis=1),
            np.concatenate([Y.real, Y.imag], axis=1))


def persistence_bias(dim, L):
    """Real map reproducing ``h_{i+delta} = h_i`` in the ``[Re, Im]`` layout."""
    th = np.zeros((2 * L * dim, 2 * dim))
    th[:dim, :dim] = np.eye(dim)
    th[L * dim:L * dim + dim, dim:] = np.eye(dim)
    return th


def _frame_series(frame: ChannelFrame, mode, R, n_fit):
    """Sequences the predictor works on; in lstd mode B comes from the first n_fit slots."""
    if mode == "naive":
        return [frame.H], None
    B, _ = lstd_decompose(frame.H[:n_fit], R)
    d = frame.H @ np.conj(B)
    return [d[:, [r]] for r in range(R)], B


def _stack(pairs):
    X = np.vstack([p[0] for p in pairs])
    Y = np.vstack([p[1] for p in pairs])
    return X, Y


def frame_ridge_task(frame, L, delta, lam, n_tr, n_va, mode="naive", R=None):
    """Split one frame into a ridge task (first ``n_tr`` targets train, next ``n_va`` validate)."""
    n_fit = n_tr + L + delta - 1
    series, _ = _frame_series(frame, mode, R, n_fit)
    tr = _stack([window_regression(s, L, delta, 0, n_fit) for s in series])
    va = _stack([window_regression(s, L, delta, n_tr, n_tr + n_va + L + delta - 1)
                 for s in series])
    return RidgeTask.make(tr[0], tr[1], va[0], va[1], lam)


def chanpred_adapt_predict(frame, theta, L, delta, lam, n_tr, mode="naive", R=None):
    """Fit on the first ``n_tr`` targets of the frame, predict every later slot.

    Returns ``(predictions, truth)`` with rows for target slots after training.
    """
    n_fit = n_tr + L + delta - 1
    series, B = _frame_series(frame, mode, R, n_fit)
    tr = _stack([window_regression(s, L, delta, 0, n_fit) for s in series])
    dim = theta.shape[1] // 2
    if lam == np.inf:
        phi = np.asarray(theta, dtype=np.float64)
    else:
        phi = ridge_inner_closed_form(RidgeTask.make(tr[0], tr[1], tr[0][:1], tr[1][:1], lam),
                                      theta)
    preds = []
    for s in series:
        X, _ = window_regression(s, L, delta, n_tr)
        P = X @ phi
        preds.append(P[:, :dim] + 1j * P[:, dim:])
    pred = preds[0] if mode == "naive" else np.hstack(preds) @ B.T
    first = n_tr + L - 1 + delta
    truth = frame.H_true[first:]
    return pred, truth


def nmse(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(np.sum(np.abs(pred - truth) ** 2, axis=1)
                         / np.sum(np.abs(truth) ** 2, axis=1)))


def chanpred_meta(frames, L, delta, lam, mode="naive", R=None, n_tr=4, n_va=None):
    """Meta-learn the predictor bias on training frames with the ridge closed form."""
    if mode not in ("naive", "lstd"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "lstd" and R is None:
        raise ValueError("lstd mode needs R")
    tasks = []
    for f in frames:
        nv = len(f.H) - n_tr - L - delta + 1 if n_va is None else n_va
        tasks.append(frame_ridge_task(f, L, delta, lam, n_tr, nv, mode, R))
    return ridge_meta_closed_form(tasks)


def chanpred_evaluate(test_frames, theta, L, delta, lam, n_tr, mode="naive", R=None):
    """Mean NMSE over test frames after adapting the bias on each frame's first slots."""
    return float(np.mean([nmse(*chanpred_adapt_predict(f, theta, L, delta, lam, n_tr, mode, R))
                          for f in test_frames]))


def zero_bias(S, L, mode="naive"):
    dim = S if mode == "naive" else 1
    return np.zeros((2 * L * dim, 2 * dim))

