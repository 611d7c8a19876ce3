import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mind_eeg import autodiff as ad
from mind_eeg.autodiff import ShapeError, Tensor

from conftest import grad_check


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from_zero(rng, *shape):
    # keep kinks (relu, elu, amax ties) out of the finite-difference stencil
    x = _u(rng, *shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


# ---------------------------------------------------------------- finite differences for every op

UNARY = {
    "elu": ad.elu,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "neg": lambda x: -x,
    "transpose": lambda x: x.T,
    "reshape": lambda x: x.reshape(6, 2),
    "sum_all": lambda x: x.sum(),
    "sum_rows": lambda x: x.sum(axis=1),
    "sum_cols_keep": lambda x: x.sum(axis=0, keepdims=True),
    "mean": lambda x: x.mean(axis=-1),
    "amax": lambda x: ad.amax(x, axis=1),
    "sq_norm": lambda x: ad.sq_norm(x, axis=-1),
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=0),
    "getitem": lambda x: x[1:, ::2],
    "index_select": lambda x: ad.index_select(x, [2, 0, 2], axis=0),
    "gather_rows": lambda x: ad.gather_rows(x, np.array([[1, 0], [3, 1]])),
    "scalar_ops": lambda x: 3.0 * x - 1.5 + x / 4.0,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients_match_finite_differences(name, rng):
    x = _away_from_zero(rng, 4, 3)
    assert grad_check(UNARY[name], [x]) < 1e-4


def test_log_and_rsqrt_gradients(rng):
    x = rng.uniform(0.2, 2.0, size=(3, 4))
    assert grad_check(ad.log, [x]) < 1e-4
    assert grad_check(ad.rsqrt_safe, [x]) < 1e-4


BINARY = {
    "add": (ad.add, (3, 4), (4,)),
    "sub": (ad.sub, (3, 4), (3, 1)),
    "mul": (ad.mul, (2, 3, 4), (3, 4)),
    "div": (ad.div, (3, 4), (3, 4)),
    "matmul": (ad.matmul, (4, 3), (3, 5)),
    "matmul_batched_shared": (ad.matmul, (2, 4, 3), (3, 5)),
    "matmul_batched_both": (ad.matmul, (2, 4, 3), (2, 3, 5)),
    "matmul_left_shared": (ad.matmul, (4, 4), (2, 4, 3)),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), (2, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients_match_finite_differences(name, rng):
    fn, sa, sb = BINARY[name]
    a, b = _u(rng, *sa), _u(rng, *sb)
    if name == "div":
        b = np.where(np.abs(b) < 0.5, 1.0, b)
    assert grad_check(fn, [a, b]) < 1e-4


def test_matmul_sum_gradient_tight(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    assert grad_check(lambda x, y: (x @ y).sum(), [a, b]) < 1e-6


def test_straight_through_and_stop_gradient_under_snapshot(rng):
    x, q = _u(rng, 3, 2), _u(rng, 3, 2)

    def fn(a, b):
        return ad.elu(ad.straight_through(a, b)) * ad.stop_gradient(a) + b * b

    with ad.detach_snapshot() as snap:
        fn(Tensor(x), Tensor(q))
        snap.replay()
        assert grad_check(fn, [x, q]) < 1e-4


# ---------------------------------------------------------------- examples


def test_matmul_identity_examples(rng):
    M = rng.normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(A) @ Tensor(np.eye(2))).data, A)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_elu_values():
    out = ad.elu(Tensor([0.0, 2.0, -1.0])).data
    assert out[0] == 0.0
    assert out[1] == 2.0
    assert out[2] == pytest.approx(math.exp(-1.0) - 1.0, abs=1e-15)
    assert out[2] == pytest.approx(-0.6321, abs=1e-4)


def test_elu_derivative_branches():
    x = Tensor([1.5, -0.7], requires_grad=True)
    ad.backward(ad.elu(x).sum())
    np.testing.assert_allclose(x.grad, [1.0, math.exp(-0.7)], rtol=1e-15)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, 0.25)
    big = ad.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_array_equal(big, [0.5, 0.5])
    e = np.exp([1.0, 2.0, 3.0])
    oracle = e / e.sum()
    out = ad.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, oracle, rtol=1e-14)
    np.testing.assert_allclose(out, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_sigmoid_no_overflow():
    out = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_straight_through_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([0.0, 3.0], requires_grad=True)
    out = ad.straight_through(x, q)
    np.testing.assert_array_equal(out.data, [0.0, 3.0])
    ad.backward(out.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    assert q.grad is None or np.all(q.grad == 0)


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.straight_through(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_stop_gradient_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    sg = ad.stop_gradient(x)
    np.testing.assert_array_equal(sg.data, [1.0, 2.0, 3.0])
    assert not sg.requires_grad
    a = Tensor([0.5, -1.0], requires_grad=True)
    b = Tensor([2.0, 1.0], requires_grad=True)
    ad.backward(ad.sq_norm(ad.stop_gradient(a) - b))
    assert a.grad is None
    np.testing.assert_allclose(b.grad, 2 * (b.data - a.data))


def test_stop_gradient_copies_value():
    x = Tensor([1.0, 2.0])
    sg = ad.stop_gradient(x)
    x.data[0] = 9.0
    assert sg.data[0] == 1.0


def test_shared_value_accumulates_both_branches(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    ad.backward((ad.exp(x) + x * x).sum())
    np.testing.assert_allclose(x.grad, np.exp(x.data) + 2 * x.data, rtol=1e-14)


def test_gradients_accumulate_across_backward_calls(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    ad.backward((3.0 * x).sum())
    ad.backward((2.0 * x).sum())
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 5.0))
    x.zero_grad()
    assert x.grad is None


def test_tape_visits_each_node_once_and_clear_keeps_values(rng):
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    before = w.data.copy()
    y = ad.relu(w @ w).sum()
    recorded = len(ad.get_tape())
    assert ad.backward(y, retain=True) == recorded
    ad.get_tape().clear()
    assert len(ad.get_tape()) == 0
    np.testing.assert_array_equal(w.data, before)
    assert w.grad.shape == w.shape


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.normal(size=(2,)), requires_grad=True)
    with ad.no_grad():
        y = (w * w).sum()
    assert len(ad.get_tape()) == 0
    assert not y.requires_grad


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)
    ad.backward(x * 2.0, seed=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 4.0])


def test_amax_routes_to_first_maximum():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    ad.backward(ad.amax(x, axis=1).sum())
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_rsqrt_safe_zero_is_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    out = ad.rsqrt_safe(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.5])
    ad.backward(out.sum())
    np.testing.assert_array_equal(x.grad, [0.0, -0.5 * 0.5 / 4.0])


def test_index_select_scatters_repeats():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ad.backward(ad.index_select(x, [0, 0, 2], axis=0).sum())
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_first_non_finite_names_the_op():
    x = Tensor(np.array([-1.0, 1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        y = ad.log(x) * 2.0
    hit = ad.get_tape().first_non_finite()
    assert hit is not None and hit[1] == "log"
    assert not np.all(np.isfinite(y.data))


def test_snapshot_replay_errors():
    with ad.detach_snapshot() as snap:
        snap.replay()
        with pytest.raises(RuntimeError):
            ad.stop_gradient(Tensor([1.0]))
    with ad.detach_snapshot() as snap:
        ad.stop_gradient(Tensor([1.0]))
        snap.replay()
        with pytest.raises(RuntimeError, match="diverged"):
            ad.stop_gradient(Tensor([1.0, 2.0]))


def test_snapshot_replays_first_pass_values():
    x = Tensor([1.0, 2.0])
    with ad.detach_snapshot() as snap:
        ad.stop_gradient(x)
        snap.replay()
        x.data[:] = [5.0, 6.0]
        for _ in range(3):
            np.testing.assert_array_equal(ad.stop_gradient(x).data, [1.0, 2.0])


# ---------------------------------------------------------------- properties

_floats = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=5), elements=_floats),
       st.integers(-1, 0))
def test_softmax_rows_sum_to_one(x, axis):
    s = ad.softmax(Tensor(x * 400.0), axis=axis).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=_floats), hnp.arrays(np.float64, (3, 4), elements=_floats))
def test_straight_through_pass_through_identity(x, q):
    # grad_x f(st(x, q)) equals grad_q f(q) for a smooth f
    def f(t):
        return (ad.sigmoid(t) * t).sum()

    xt = Tensor(x, requires_grad=True)
    ad.backward(f(ad.straight_through(xt, Tensor(q))))
    qt = Tensor(q.copy(), requires_grad=True)
    ad.backward(f(qt))
    np.testing.assert_allclose(xt.grad, qt.grad, rtol=1e-13, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=_floats))
def test_two_branch_gradient_is_sum_of_branches(x):
    def branch1(t):
        return ad.sigmoid(t).sum()

    def branch2(t):
        return (t * t * 0.5).sum()

    t = Tensor(x, requires_grad=True)
    ad.backward(branch1(t) + branch2(t))
    joint = t.grad.copy()
    parts = []
    for fn in (branch1, branch2):
        t = Tensor(x, requires_grad=True)
        ad.backward(fn(t))
        parts.append(t.grad)
    np.testing.assert_allclose(joint, parts[0] + parts[1], rtol=1e-14, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = _away_from_zero(rng, 3, 4), _away_from_zero(rng, 4, 2)

    def fn(x, y):
        return ad.softmax(ad.elu(x @ y) * ad.sigmoid(x).mean(axis=-1, keepdims=True), axis=0)

    assert grad_check(fn, [a, b], seed=seed) < 1e-4
