import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metalearn.bilevel import (AlsetConfig, BilevelProblem, alset_solve, check_strong_convexity,
                               dense_lower_hessian, estimate_L_g, implicit_hypergradient,
                               instantiate_imaml, instantiate_maml, linear_quadratic_problem,
                               neumann_expectation, neumann_inverse_apply, neumann_series,
                               solve_lower)
from metalearn.core import NumericError, QuadraticObjective, RngStream, finite_diff_grad, relative_error
from metalearn.gradcheck import _random_bilevel
from metalearn.meta_algorithms import (InnerConfig, TaskProblem, imaml_inner_solve,
                                       imaml_meta_gradient, maml_meta_gradient)
from metalearn.models import MlpRegressor, ModelObjective


def quadratic_bilevel(g, dt=2, dp=3):
    M = g.standard_normal((dp, dp))
    Q = M @ M.T + np.eye(dp)
    P = g.standard_normal((dp, dt))
    c = g.standard_normal(dp)
    R = np.diag(g.uniform(0.1, 1.0, dt))
    return BilevelProblem(
        dt, dp,
        f=lambda th, ph, xi: 0.5 * float(np.sum((ph - c) ** 2)) + 0.5 * float(th @ R @ th),
        f_theta=lambda th, ph, xi: R @ th,
        f_phi=lambda th, ph, xi: ph - c,
        g=lambda th, ph, xi: 0.5 * float(ph @ Q @ ph) - float(ph @ P @ th),
        g_phi=lambda th, ph, xi: Q @ ph - P @ th,
        g_phiphi=lambda th, ph, v, xi: Q @ v,
        g_thetaphi=lambda th, ph, v, xi: -P.T @ v,
    ), Q, P


def test_linear_quadratic_worked_example():
    prob = linear_quadratic_problem(2.0, 1.0)
    th = np.array([1.0])
    phi = solve_lower(prob, th)
    assert phi[0] == 2.0
    assert implicit_hypergradient(prob, th, phi)[0] == pytest.approx(2.0, abs=1e-15)


def test_hypergradient_without_coupling_is_upper_gradient(gen):
    prob, _, _ = quadratic_bilevel(gen)
    flat = BilevelProblem(2, 3, f=prob.f, f_theta=lambda th, ph, xi: 3.0 * th,
                          f_phi=lambda th, ph, xi: np.zeros(3), g=prob.g, g_phi=prob.g_phi,
                          g_phiphi=prob.g_phiphi, g_thetaphi=prob.g_thetaphi)
    th = gen.standard_normal(2)
    assert np.array_equal(implicit_hypergradient(flat, th, np.zeros(3)), 3.0 * th)


@pytest.mark.parametrize("method", ["dense", "cg"])
def test_hypergradient_matches_nested_finite_differences(method):
    for seed in range(5):
        g = np.random.default_rng(seed)
        prob, _, _ = quadratic_bilevel(g)
        th = g.standard_normal(2)
        an = implicit_hypergradient(prob, th, solve_lower(prob, th, tol=1e-10), method=method)
        fd = finite_diff_grad(lambda t: prob.f(t, solve_lower(prob, t, tol=1e-10), None), th)
        assert relative_error(an, fd) < 1e-6


def test_hypergradient_nonquadratic_lower(gen):
    prob = _random_bilevel(gen)
    th = gen.standard_normal(prob.dim_theta)
    phi = solve_lower(prob, th)
    assert np.linalg.norm(prob.g_phi(th, phi, None)) < 1e-10
    fd = finite_diff_grad(lambda t: prob.f(t, solve_lower(prob, t, phi), None), th)
    assert relative_error(implicit_hypergradient(prob, th, phi), fd) < 1e-6


def test_singular_lower_hessian_raises():
    prob = BilevelProblem(1, 2, f=lambda *a: 0.0, f_theta=lambda th, ph, xi: np.zeros(1),
                          f_phi=lambda th, ph, xi: np.ones(2), g=lambda *a: 0.0,
                          g_phi=lambda th, ph, xi: np.zeros(2),
                          g_phiphi=lambda th, ph, v, xi: np.array([v[0], 0.0]),
                          g_thetaphi=lambda th, ph, v, xi: np.zeros(1))
    with pytest.raises(NumericError, match="minimal eigenvalue"):
        implicit_hypergradient(prob, np.zeros(1), np.zeros(2), method="dense")


@given(st.integers(0, 10_000))
def test_derivative_maps_are_linear(seed):
    g = np.random.default_rng(seed)
    prob = _random_bilevel(g)
    th, ph = g.standard_normal(prob.dim_theta), g.standard_normal(prob.dim_phi)
    u, v = g.standard_normal(prob.dim_phi), g.standard_normal(prob.dim_phi)
    a, b = g.normal(), g.normal()
    for fn in (prob.g_phiphi, prob.g_thetaphi):
        lhs = fn(th, ph, a * u + b * v, None)
        rhs = a * fn(th, ph, u, None) + b * fn(th, ph, v, None)
        assert relative_error(lhs, rhs) < 1e-10


# Neumann --------------------------------------------------------------------

def test_neumann_exact_when_hessian_is_scaled_identity(gen):
    v = gen.standard_normal(3)
    est = neumann_expectation(lambda x, n: 2.0 * x, v, 2.0, 5)
    assert np.allclose(est, v / 2.0, atol=1e-15)


def test_neumann_scalar_enumeration():
    est = neumann_expectation(lambda x, n: 0.5 * x, np.array([1.0]), 1.0, 2)
    assert est[0] == pytest.approx(1.5, abs=1e-15)


def test_neumann_expectation_equals_truncated_series(gen):
    M = gen.standard_normal((4, 4))
    H = M @ M.T + 0.5 * np.eye(4)
    L = 1.1 * np.linalg.eigvalsh(H)[-1]
    v = gen.standard_normal(4)
    for N in (1, 3, 7):
        a = neumann_expectation(lambda x, n: H @ x, v, L, N)
        b = neumann_series(lambda x: H @ x, v, L, N)
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(b)))


def test_neumann_bias_strictly_decreasing(gen):
    for _ in range(5):
        M = gen.standard_normal((4, 4))
        H = M @ M.T + 0.5 * np.eye(4)
        L = 1.1 * np.linalg.eigvalsh(H)[-1]
        v = gen.standard_normal(4)
        exact = np.linalg.solve(H, v)
        bias = [np.linalg.norm(neumann_expectation(lambda x, n: H @ x, v, L, N) - exact)
                for N in (1, 2, 4, 8, 16)]
        assert all(a > b for a, b in zip(bias, bias[1:]))


def test_neumann_arguments(gen):
    with pytest.raises(ValueError):
        neumann_inverse_apply(lambda x, n: x, np.ones(2), 1.0, 0)
    with pytest.raises(ValueError):
        neumann_inverse_apply(lambda x, n: x, np.ones(2), 1.0, 3, n_prime=3)
    a = neumann_inverse_apply(lambda x, n: 0.5 * x, np.ones(2), 1.0, 4, RngStream(1))
    b = neumann_inverse_apply(lambda x, n: 0.5 * x, np.ones(2), 1.0, 4, RngStream(1))
    assert np.array_equal(a, b)


# ALSET --------------------------------------------------------------------------

def test_alset_converges_on_linear_quadratic():
    res = alset_solve(linear_quadratic_problem(2.0, 1.0),
                      AlsetConfig(T=1, I_max=10_000, track=False), RngStream(0))
    assert abs(res.theta[0] - 0.5) < 1e-2


def test_alset_without_coupling_is_plain_sgd():
    c = np.array([1.5, -0.5])
    prob = BilevelProblem(2, 1, f=lambda th, ph, xi: 0.5 * float(np.sum((th - c) ** 2)),
                          f_theta=lambda th, ph, xi: th - c + xi,
                          f_phi=lambda th, ph, xi: np.zeros(1),
                          g=lambda th, ph, xi: 0.5 * float(ph @ ph),
                          g_phi=lambda th, ph, xi: ph, g_phiphi=lambda th, ph, v, xi: v,
                          g_thetaphi=lambda th, ph, v, xi: np.zeros(2),
                          sample_upper=lambda gen: 0.1 * gen.standard_normal(2), L_g=1.0)
    cfg = AlsetConfig(T=1, I_max=50, track=False)
    rng = RngStream(3)
    res = alset_solve(prob, cfg, rng)
    th = np.zeros(2)
    a = cfg.alpha / math.sqrt(cfg.I_max)
    for i in range(cfg.I_max):
        xi = 0.1 * rng.child(i).child(1).generator().standard_normal(2)
        th = th - a * (th - c + xi)
        assert np.array_equal(res.theta_path[i + 1], th)


def test_alset_rate_and_drift():
    prob = linear_quadratic_problem(2.0, 1.0, noise=0.1)
    ratios = []
    for seed in range(3):
        short = alset_solve(prob, AlsetConfig(I_max=500), RngStream(seed), theta0=np.array([3.0]))
        long = alset_solve(prob, AlsetConfig(I_max=2000), RngStream(seed), theta0=np.array([3.0]))
        ratios.append(short.mean_grad_norm_sq / long.mean_grad_norm_sq)
        drift = np.sqrt(long.drift_sq)
        assert drift[-1] < drift[len(drift) // 10]
    assert min(ratios) >= 1.5


def test_alset_strong_convexity_guard(gen):
    prob = linear_quadratic_problem()
    assert check_strong_convexity(prob, np.zeros(1), np.zeros(1), 0.5, RngStream(0)) == 1.0
    with pytest.raises(NumericError):
        alset_solve(prob, AlsetConfig(I_max=2, mu=2.0), RngStream(0))
    with pytest.raises(ValueError):
        AlsetConfig(T=0)


def test_estimate_L_g(gen):
    prob, Q, _ = quadratic_bilevel(gen)
    top = np.linalg.eigvalsh(Q)[-1]
    assert estimate_L_g(prob, np.zeros(2), np.zeros(3)) == pytest.approx(1.1 * top, rel=1e-3)
    assert np.allclose(dense_lower_hessian(prob, np.zeros(2), np.zeros(3)), Q)


# meta-learning instantiations ------------------------------------------------------

def _mlp_tasks(g, K=3):
    m = MlpRegressor(1, (5,), 1)
    out = []
    for k in range(K):
        x, xv = g.uniform(-2, 2, (6, 1)), g.uniform(-2, 2, (6, 1))
        out.append(TaskProblem(ModelObjective(m, x, np.sin(x[:, 0] + k)),
                               ModelObjective(m, xv, np.sin(xv[:, 0] + k)), k))
    return m, out


def test_maml_instantiation_matches_maml(gen):
    m, tasks = _mlp_tasks(gen)
    th = m.init_params(gen)
    cfg = InnerConfig(alpha=0.1)
    prob = instantiate_maml(tasks, cfg.alpha, th.size)
    phi = solve_lower(prob, th)
    hg = implicit_hypergradient(prob, th, phi)
    ref = np.mean([maml_meta_gradient(t, th, cfg) for t in tasks], axis=0)
    assert np.max(np.abs(hg - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_imaml_instantiation_matches_imaml(gen):
    m, tasks = _mlp_tasks(gen)
    th = m.init_params(gen)
    cfg = InnerConfig(lam=5.0, tol_inner=1e-11, cg_iters=200, cg_tol=1e-14)
    prob = instantiate_imaml(tasks, cfg.lam, th.size)
    phi = np.concatenate([imaml_inner_solve(t.train, th, cfg) for t in tasks])
    hg = implicit_hypergradient(prob, th, phi, method="cg", cg_tol=1e-14)
    ref = np.mean([imaml_meta_gradient(t, th, cfg, phi_star=p)
                   for t, p in zip(tasks, phi.reshape(len(tasks), -1))], axis=0)
    assert relative_error(hg, ref) < 1e-6


def test_single_quadratic_task_hand_computed():
    # L_tr = 1/2 h (phi - a)^2, L_va = 1/2 (phi - c)^2, MAML with step alpha
    h, a, c, alpha, th = 2.0, 0.5, -1.0, 0.1, np.array([0.3])
    task = TaskProblem(QuadraticObjective([[h]], [a]), QuadraticObjective([[1.0]], [c]))
    prob = instantiate_maml([task], alpha, 1)
    phi = th - alpha * h * (th - a)
    expect = (1 - alpha * h) * (phi - c)
    assert implicit_hypergradient(prob, th, solve_lower(prob, th))[0] == pytest.approx(
        expect[0], abs=1e-14)
