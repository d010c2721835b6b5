import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from metalearn.core import (ConvergenceError, FunctionObjective, MetaBatch, NumericError,
                            QuadraticObjective, RngStream, TaskDataset, adam_step, as_param,
                            as_stream, check_finite, finite_diff_grad, finite_diff_hvp,
                            relative_error, split_dataset)
from metalearn.models import ModelObjective, MlpRegressor


def test_rng_same_path_is_bit_exact():
    a = RngStream(7).child(3, 1).generator().standard_normal(100)
    b = RngStream(7, (3, 1)).generator().standard_normal(100)
    assert np.array_equal(a, b)


def test_rng_distinct_paths_are_uncorrelated():
    a = RngStream(7).child(0).generator().standard_normal(20000)
    b = RngStream(7).child(1).generator().standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20000)
    assert not np.array_equal(a, b)


def test_rng_is_order_independent():
    s = RngStream(3)
    first = s.child(5).generator().random(4)
    s.child(2).generator().random(1000)
    assert np.array_equal(first, s.child(5).generator().random(4))


def test_as_stream_accepts_int_and_stream():
    s = RngStream(4, (1,))
    assert as_stream(s) is s
    assert as_stream(4).root_seed == 4


def test_as_param_and_check_finite():
    assert as_param([1, 2]).dtype == np.float64
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]))


def test_split_dataset_and_task_dataset():
    x = np.arange(10.0).reshape(5, 2)
    y = np.arange(5.0)
    t = TaskDataset.from_samples(x, y, 3, task_id=2)
    assert t.train_x.shape == (3, 2) and t.val_x.shape == (2, 2)
    tr, va = split_dataset(x, 3)
    assert np.array_equal(tr, x[:3]) and np.array_equal(va, x[3:])
    with pytest.raises(ValueError):
        split_dataset(x, 6)


def test_meta_batch_ids_must_increase():
    t = TaskDataset.from_samples(np.zeros((2, 1)), np.zeros(2), 1, task_id=1)
    u = TaskDataset.from_samples(np.zeros((2, 1)), np.zeros(2), 1, task_id=0)
    with pytest.raises(ValueError):
        MetaBatch((t, u))
    with pytest.raises(ValueError):
        MetaBatch(())


def test_finite_diff_constant_is_zero():
    obj = FunctionObjective(lambda p: 3.0)
    assert np.array_equal(finite_diff_grad(obj, np.ones(4)), np.zeros(4))


def test_finite_diff_quadratic_exact():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = QuadraticObjective(A, np.array([1.0, -1.0]))
    phi = np.array([0.3, -0.7])
    assert relative_error(finite_diff_grad(q, phi), q.grad(phi)) < 1e-8
    v = np.array([1.0, 2.0])
    assert relative_error(finite_diff_hvp(q, phi, v), A @ v) < 1e-8


def test_finite_diff_against_mlp(gen):
    m = MlpRegressor(2, (5,), 1)
    x, y = gen.standard_normal((8, 2)), gen.standard_normal(8)
    obj = ModelObjective(m, x, y)
    phi = m.init_params(gen)
    assert relative_error(obj.grad(phi), finite_diff_grad(obj, phi)) < 1e-5
    v = gen.standard_normal(phi.size)
    assert relative_error(obj.hvp(phi, v), finite_diff_hvp(obj, phi, v)) < 1e-4


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_convergence_error_is_numeric():
    assert issubclass(ConvergenceError, NumericError)


@given(st.floats(-3, 3), st.floats(0.1, 2))
def test_adam_first_step_moves_by_lr(g, lr):
    assume(abs(g) > 1e-3)
    new, _ = adam_step(np.zeros(1), np.array([g]), None, 1, lr)
    assert new[0] == pytest.approx(-lr * np.sign(g), rel=1e-4)
