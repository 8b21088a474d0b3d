import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zeroner import autograd as ag
from zeroner.autograd import Tape, Tensor


def param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_sum_of_squares_gradient():
    x = param([1.0, 2.0])
    with Tape() as tape:
        tape.backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_reuse_accumulates():
    y = param(3.0)
    with Tape() as tape:
        tape.backward(y + y)
    assert y.grad == 2.0


def test_backward_twice_accumulates_additively():
    x = param([1.0, 2.0])
    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)
        tape.backward(loss)
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = x * x
        with pytest.raises(ag.GraphError):
            tape.backward(y)


def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = Tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
    assert np.array_equal(ag.matmul(a, b).data, [[58.0, 64.0], [139.0, 154.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    out = ag.softmax(Tensor([0.0, 0.0, 0.0])).data
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    rows = ag.softmax(Tensor(rng.normal(scale=5.0, size=(100, 7)))).data
    assert rows.min() >= 0.0
    assert np.abs(rows.sum(axis=1) - 1.0).max() < 1e-9


def test_logsumexp_single_element_is_identity():
    assert ag.logsumexp(Tensor([3.5])).item() == 3.5


def test_logsumexp_overflow_safe_shift():
    rng = np.random.default_rng(1)
    x = rng.normal(size=12)
    base = ag.logsumexp(Tensor(x)).item()
    shifted = ag.logsumexp(Tensor(x + 1e6)).item()
    assert abs(shifted - base - 1e6) < 1e-6


@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=8))
def test_logsumexp_matches_naive(values):
    ours = ag.logsumexp(Tensor(values)).item()
    naive = math.log(sum(math.exp(v) for v in values))
    assert abs(ours - naive) < 1e-9


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 5)))
    assert np.allclose(ag.log_softmax(x).data, np.log(ag.softmax(x).data),
                       atol=1e-12)


def test_getitem_slice_gradient():
    x = param(np.arange(12.0).reshape(3, 4))
    with Tape() as tape:
        tape.backward(x[1:3, 0:2].sum())
    expected = np.zeros((3, 4))
    expected[1:3, 0:2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_concat_gradient_splits_back():
    a, b = param([[1.0, 2.0]]), param([[3.0, 4.0]])
    weights = Tensor([[1.0, 10.0, 100.0, 1000.0]])
    with Tape() as tape:
        tape.backward((ag.concat([a, b], axis=1) * weights).sum())
    assert np.array_equal(a.grad, [[1.0, 10.0]])
    assert np.array_equal(b.grad, [[100.0, 1000.0]])


def test_gather2d_scatter_adds():
    x = param(np.zeros((3, 3)))
    with Tape() as tape:
        tape.backward(ag.gather2d(x, [0, 0, 2], [1, 1, 2]).sum())
    expected = np.zeros((3, 3))
    expected[0, 1] = 2.0
    expected[2, 2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_embedding_lookup_repeated_rows_accumulate():
    table = param(np.arange(6.0).reshape(3, 2))
    out = ag.embedding_lookup(table, [1, 1, 0])
    assert np.array_equal(out.data, [[2.0, 3.0], [2.0, 3.0], [0.0, 1.0]])
    with Tape() as tape:
        tape.backward(ag.embedding_lookup(table, [1, 1, 0]).sum())
    assert np.array_equal(table.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_broadcast_add_unbroadcasts_gradient():
    m = param(np.ones((2, 3)))
    row = param(np.zeros(3))
    with Tape() as tape:
        tape.backward((m + row).sum())
    assert np.array_equal(m.grad, np.ones((2, 3)))
    assert np.array_equal(row.grad, [2.0, 2.0, 2.0])


# -- dropout -------------------------------------------------------------


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.ones((4, 4)))
    assert ag.dropout(x, 0.5, training=False) is x
    assert ag.dropout(x, 0.0, rng=np.random.default_rng(0), training=True) is x


def test_dropout_training_scales_survivors():
    rng = np.random.default_rng(3)
    x = Tensor(np.ones((50, 50)))
    out = ag.dropout(x, 0.3, rng=rng, training=True).data
    values = set(np.unique(out))
    assert values <= {0.0, 1.0 / 0.7}
    dropped = float((out == 0).mean())
    assert 0.2 < dropped < 0.4


def test_dropout_deterministic_under_seeded_rng():
    x = Tensor(np.ones((10, 10)))
    a = ag.dropout(x, 0.4, rng=np.random.default_rng(7), training=True).data
    b = ag.dropout(x, 0.4, rng=np.random.default_rng(7), training=True).data
    assert np.array_equal(a, b)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        ag.dropout(Tensor([1.0]), 1.0, training=True)


# -- finite differences -----------------------------------------------------


def test_random_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(4)
    params = [param(rng.normal(size=(2, 3))), param(rng.normal(size=(3, 2))),
              param(rng.normal(size=(1, 2))), param(rng.normal(size=2)),
              param(rng.normal(size=(3, 2)))]
    mix = Tensor(rng.normal(size=(2, 2)))

    def f():
        a = ag.tanh(ag.matmul(params[0], params[1]))
        b = ag.sigmoid(a + params[3])
        c = ag.concat([b, params[2]], axis=0)
        d = ag.matmul(c.transpose(), params[4])
        return ag.logsumexp(d * mix, axis=None) + (d * d).mean()

    report = ag.finite_difference_check(f, params, h=1e-5, tol=1e-4)
    assert report.ok(), report.failures


def test_finite_difference_linear_is_exact():
    theta = param([0.3, -0.7, 2.0])
    c = Tensor([2.0, -1.0, 0.5])

    def f():
        return (c * theta).sum()

    report = ag.finite_difference_check(f, [theta], h=1e-5, tol=1e-9)
    assert report.ok()
    assert report.worst < 1e-9


def test_finite_difference_tanh_analytic_value():
    theta = param(0.5)

    def f():
        return ag.tanh(theta)

    with Tape() as tape:
        tape.backward(f())
    analytic = 1.0 - math.tanh(0.5) ** 2
    assert abs(float(theta.grad) - analytic) < 1e-12
    theta.grad = None
    report = ag.finite_difference_check(f, [theta], h=1e-5, tol=1e-8)
    assert report.ok()


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_hand_computed():
    theta = param(0.0)
    theta.grad = np.asarray(1.0)
    ag.Adam([theta], lr=1e-3).step()
    # m_hat = 1, v_hat = 1 after bias correction
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert abs(float(theta.data) - expected) < 1e-15
    assert theta.grad is None


def test_adam_zero_gradient_leaves_parameter_unchanged():
    theta = param([1.5, -2.5])
    opt = ag.Adam([theta])
    theta.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(theta.data, [1.5, -2.5])


def test_adam_missing_gradient_is_an_error():
    opt = ag.Adam([param(0.0)])
    with pytest.raises(ag.GraphError):
        opt.step()


def test_adam_step_counter_and_determinism():
    def run():
        rng = np.random.default_rng(11)
        theta = param(rng.normal(size=4))
        opt = ag.Adam([theta], lr=0.01)
        for _ in range(5):
            with Tape() as tape:
                tape.backward((theta * theta).sum())
            opt.step()
        return opt.t, theta.data.copy()

    t1, run1 = run()
    t2, run2 = run()
    assert t1 == t2 == 5
    assert np.array_equal(run1, run2)


def test_checked_mode_traps_non_finite():
    ag.set_checked(True)
    try:
        with np.errstate(over="ignore"):
            with pytest.raises(ag.NumericsError):
                ag.exp(Tensor(1e9))
    finally:
        ag.set_checked(False)
