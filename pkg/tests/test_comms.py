import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metalearn.comms import (ChannelPredTaskParams, DemodTaskParams,
                             chanpred_adapt_predict, chanpred_meta, confidence,
                             gen_chanpred_frame, gen_demod_task, lstd_decompose, ml_decide,
                             mmse_ml_baseline, nmse, persistence_bias, qam16, reliability_diagram,
                             reliability_from, sample_chanpred_params, sample_demod_params,
                             ser_eval, snr_to_noise, symbol_error_rate, to_complex, to_real,
                             transmit, window_regression)
from metalearn.core import RngStream


class FixedProba:
    """Classifier stub returning a fixed probability table row by row."""

    def __init__(self, p):
        self.p = np.asarray(p)

    def predict_proba(self, phi, x):
        return self.p[: len(x)]

    def predict(self, phi, x):
        return np.argmax(self.predict_proba(phi, x), axis=1)


# ---------------------------------------------------------------------------
# Demodulation


def test_qam16_unit_power_distinct():
    c = qam16()
    assert len(np.unique(np.round(c, 12))) == 16
    assert abs(np.mean(np.abs(c) ** 2) - 1.0) < 1e-12


@pytest.mark.parametrize("N0", [0.0, -1.0])
def test_nonpositive_noise_rejected(N0):
    with pytest.raises(ValueError):
        DemodTaskParams(N0=N0)


def test_noiseless_identity_channel():
    p = DemodTaskParams(h=1.0, N0=1e-300, n_pilots=64)
    t = gen_demod_task(p, RngStream(3))
    assert np.allclose(to_complex(t.train_x), qam16()[t.train_y], atol=1e-12)


def test_demod_task_replay_bit_exact():
    p = sample_demod_params(RngStream(1, (0,)))
    a = gen_demod_task(p, RngStream(1, (1,)), n_val=20)
    b = gen_demod_task(p, RngStream(1, (1,)), n_val=20)
    for u, v in [(a.train_x, b.train_x), (a.train_y, b.train_y), (a.val_x, b.val_x)]:
        assert np.array_equal(u, v)
    assert a.train_x.shape == (8, 2) and a.val_x.shape == (20, 2)


def test_received_power_monte_carlo():
    h = 0.8 * np.exp(0.7j)
    p = DemodTaskParams(h=h, N0=0.1)
    g = np.random.default_rng(5)
    y = transmit(p, g.integers(0, 16, 100_000), g)
    assert np.mean(np.abs(y) ** 2) == pytest.approx(abs(h) ** 2 + 0.1, rel=0.01)


def test_uniform_random_classifier_chance_level(gen):
    n = 20_000
    labels = gen.integers(0, 16, n)
    ser = symbol_error_rate(gen.integers(0, 16, n), labels)
    sigma = math.sqrt(15 / 16 / 16 / n)
    assert abs(ser - 15 / 16) < 3 * sigma


def test_genie_noiseless_ser_zero(gen):
    p = DemodTaskParams(h=0.3 - 1.1j, N0=1e-12)
    s = gen.integers(0, 16, 5000)
    assert symbol_error_rate(ml_decide(transmit(p, s, gen), p.h), s) == 0.0


def test_ser_eval_uses_argmax():
    clf = FixedProba(np.eye(4)[[0, 1, 2, 2]])
    assert ser_eval(clf, None, np.zeros((4, 2)), np.array([0, 1, 2, 3])) == 0.25


def test_ser_rejects_bad_shapes():
    with pytest.raises(ValueError):
        symbol_error_rate(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        symbol_error_rate(np.zeros(0), np.zeros(0))


def test_genie_ser_monotone_in_snr():
    g = np.random.default_rng(7)
    n = 20_000
    sers = []
    for snr in range(0, 25, 4):
        p = DemodTaskParams(h=1.0, N0=snr_to_noise(snr))
        s = g.integers(0, 16, n)
        sers.append(symbol_error_rate(ml_decide(transmit(p, s, g), 1.0), s))
    assert all(0.0 <= v <= 1.0 for v in sers)
    for a, b in zip(sers, sers[1:]):
        slack = math.sqrt(max(a * (1 - a), 1.0 / n) / n)
        assert b <= a + slack


def test_mmse_single_noiseless_pilot_exact():
    h = 0.6 + 0.9j
    p = DemodTaskParams(h=h, N0=1e-300, n_pilots=1)
    t = gen_demod_task(p, RngStream(4), n_val=2000)
    dec = mmse_ml_baseline(t, p.N0)
    assert symbol_error_rate(dec, t.val_y) == 0.0


def test_mmse_zero_pilots_chance():
    p = DemodTaskParams(h=1.0, N0=0.01, n_pilots=0)
    t = gen_demod_task(p, RngStream(4), n_val=20_000)
    ser = symbol_error_rate(mmse_ml_baseline(t, p.N0), t.val_y)
    assert abs(ser - 15 / 16) < 3 * math.sqrt(15 / 256 / 20_000)


def test_iq_imbalance_hurts_baseline():
    N0 = snr_to_noise(20)
    deltas = []
    for k in range(30):
        h = complex(sample_demod_params(RngStream(9, (k,))).h)
        plain = DemodTaskParams(h=h, N0=N0, n_pilots=8)
        bent = DemodTaskParams(h=h, N0=N0, eps=0.15, delta=math.radians(15), n_pilots=8)
        sers = []
        for p in (plain, bent):
            t = gen_demod_task(p, RngStream(9, (k, 1)), n_val=2000)
            sers.append(symbol_error_rate(mmse_ml_baseline(t, N0), t.val_y))
        deltas.append(sers[1] - sers[0])
    assert np.mean(deltas) > 0


def test_to_real_round_trip(gen):
    z = gen.standard_normal(7) + 1j * gen.standard_normal(7)
    assert np.array_equal(to_complex(to_real(z)), z)


# ---------------------------------------------------------------------------
# Calibration


def test_confidence_is_max_probability():
    p = np.array([[0.1, 0.7, 0.2], [0.5, 0.25, 0.25]])
    dec, conf = confidence(FixedProba(p), None, np.zeros((2, 1)))
    assert dec.tolist() == [1, 0] and conf.tolist() == [0.7, 0.5]


def test_constant_classifier_ece():
    n = 16_000
    labels = np.repeat(np.arange(16), n // 16)
    p = np.zeros((n, 16))
    p[:, 1] = 1.0
    rd = reliability_diagram(FixedProba(p), None, np.zeros((n, 2)), labels)
    assert rd.ece == pytest.approx(15 / 16, abs=1e-12)
    assert rd.counts.sum() == n


def _calibrated_ece(g, n, n_classes=16):
    p = g.dirichlet(np.full(n_classes, 0.3), size=n)
    cum = np.cumsum(p, axis=1)
    labels = np.minimum((g.random(n)[:, None] > cum).sum(axis=1), n_classes - 1)
    dec, conf = np.argmax(p, axis=1), np.max(p, axis=1)
    return reliability_from(conf, dec == labels).ece


def test_self_consistent_oracle_ece_small():
    assert _calibrated_ece(np.random.default_rng(11), 100_000) < 0.02


def test_self_consistent_ece_rate():
    g = np.random.default_rng(12)
    small = np.mean([_calibrated_ece(g, 2000) for _ in range(20)])
    big = np.mean([_calibrated_ece(g, 8000) for _ in range(20)])
    assert 1.0 <= small / big <= 4.0


@given(st.integers(0, 2**31), st.integers(1, 500), st.integers(1, 20))
def test_reliability_counts_and_bins(seed, n, bins):
    g = np.random.default_rng(seed)
    conf = g.random(n)
    conf[: n // 4] = g.choice([0.0, 1.0, 0.5], n // 4)
    rd = reliability_from(conf, g.random(n) < conf, bins)
    assert rd.counts.sum() == n
    assert np.all(np.diff(rd.edges) > 0) and rd.edges[0] == 0 and rd.edges[-1] == 1
    nz = rd.counts > 0
    assert np.all(rd.confidence[nz] >= rd.edges[:-1][nz] - 1e-12)
    assert np.all(rd.confidence[nz] <= rd.edges[1:][nz] + 1e-12)
    assert 0.0 <= rd.ece <= 1.0


# ---------------------------------------------------------------------------
# Channel prediction


def test_chanpred_params_validation():
    with pytest.raises(ValueError):
        ChannelPredTaskParams(S=4, R=5)
    with pytest.raises(ValueError):
        ChannelPredTaskParams(rho=1.5)


def test_full_rank_unit_rho_is_constant():
    f = gen_chanpred_frame(ChannelPredTaskParams(S=6, R=6, rho=1.0, n_slots=30), RngStream(2))
    assert np.allclose(f.H, f.H[0], atol=0, rtol=0)


@pytest.mark.parametrize("R", [1, 2, 5])
def test_frame_rank_and_orthonormal_features(R):
    f = gen_chanpred_frame(ChannelPredTaskParams(S=8, R=R, rho=0.9, n_slots=40), RngStream(R))
    assert np.linalg.matrix_rank(f.H, tol=1e-8) == R
    assert np.allclose(f.B.conj().T @ f.B, np.eye(R), atol=1e-12)


def test_ar1_lag_one_autocorrelation():
    rho = 0.9 * np.exp(0.2j)
    f = gen_chanpred_frame(ChannelPredTaskParams(S=2, R=1, rho=rho, n_slots=10_000),
                           RngStream(13))
    d = f.D[:, 0]
    est = np.sum(d[1:] * np.conj(d[:-1])) / np.sum(np.abs(d[:-1]) ** 2)
    assert abs(est - rho) / abs(rho) < 0.02


def test_lstd_exact_low_rank():
    f = gen_chanpred_frame(ChannelPredTaskParams(S=16, R=3, rho=0.9, n_slots=40), RngStream(6))
    B, d = lstd_decompose(f.H, 3)
    err = np.linalg.norm(f.H - d @ B.T) / np.linalg.norm(f.H)
    assert err < 1e-10


def test_lstd_identical_slots_direction(gen):
    v = gen.standard_normal(5) + 1j * gen.standard_normal(5)
    H = np.outer(gen.standard_normal(12) + 1j * gen.standard_normal(12), v)
    B, _ = lstd_decompose(H, 1)
    cos = abs(np.vdot(B[:, 0], v)) / np.linalg.norm(v)
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_lstd_noisy_error_decreasing_and_matches_tail():
    f = gen_chanpred_frame(ChannelPredTaskParams(S=10, R=3, rho=0.9, n_slots=50,
                                                 noise_var=0.05), RngStream(8))
    sv = np.linalg.svd(f.H, compute_uv=False)
    errs = []
    for R in range(1, 11):
        B, d = lstd_decompose(f.H, R)
        errs.append(np.linalg.norm(f.H - d @ B.T))
        assert errs[-1] == pytest.approx(math.sqrt(np.sum(sv[R:] ** 2)), abs=1e-9)
    assert all(b < a for a, b in zip(errs, errs[1:-1])) and errs[-1] < 1e-10


def test_lstd_rank_too_large():
    with pytest.raises(ValueError):
        lstd_decompose(np.ones((5, 4)), 5)


def test_window_regression_layout():
    seq = (np.arange(6) + 1j * np.arange(6) * 10).reshape(6, 1)
    X, Y = window_regression(seq, L=2, delta=1)
    assert X.shape == (4, 4) and Y.shape == (4, 2)
    # row for i = 1: [Re h1, Re h0, Im h1, Im h0], target h2
    assert X[0].tolist() == [1, 0, 10, 0] and Y[0].tolist() == [2, 20]


def _constant_frame(S=4, n=20):
    p = ChannelPredTaskParams(S=S, R=S, rho=1.0, n_slots=n)
    return gen_chanpred_frame(p, RngStream(21))


@pytest.mark.parametrize("lam", [np.inf, 1.0])
def test_persistence_perfect_on_constant_channel(lam):
    f = _constant_frame()
    pred, truth = chanpred_adapt_predict(f, persistence_bias(4, 1), 1, 1, lam, 4)
    assert nmse(pred, truth) < 1e-20


def test_infinite_lambda_returns_theta(gen):
    f = gen_chanpred_frame(sample_chanpred_params(RngStream(3), S=4), RngStream(4))
    theta = gen.standard_normal((16, 8))
    pred, _ = chanpred_adapt_predict(f, theta, 2, 1, np.inf, 5)
    X, _ = window_regression(f.H, 2, 1, 5)
    P = X @ theta
    assert np.array_equal(pred, P[:, :4] + 1j * P[:, 4:])
    near, _ = chanpred_adapt_predict(f, theta, 2, 1, 1e12, 5)
    assert np.max(np.abs(near - pred)) < 1e-6


def test_chanpred_meta_shapes_and_errors():
    frames = [gen_chanpred_frame(sample_chanpred_params(RngStream(k), S=4), RngStream(k, (1,)))
              for k in range(5)]
    assert chanpred_meta(frames, 2, 1, 1.0).shape == (16, 8)
    assert chanpred_meta(frames, 2, 1, 1.0, mode="lstd", R=2).shape == (4, 2)
    with pytest.raises(ValueError):
        chanpred_meta(frames, 2, 1, 1.0, mode="lstd")
    with pytest.raises(ValueError):
        chanpred_meta(frames, 2, 1, 1.0, mode="other")


def test_nmse_zero_and_scale():
    t = np.ones((3, 2)) + 1j
    assert nmse(t, t) == 0.0
    assert nmse(2 * t, t) == pytest.approx(1.0)
