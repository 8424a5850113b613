import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posvit import tensor as T
from posvit.tensor import Tensor


@pytest.fixture(autouse=True)
def _debug_checks():
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_2x2():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(5, 3))
    expect = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            acc = 0.0
            for k in range(5):
                acc += a[i, k] * b[k, j]
            expect[i, j] = acc
    out = T.matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - expect)) < 1e-12


def test_matmul_shape_mismatch_mentions_both_shapes():
    with pytest.raises(T.ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=-1)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax(Tensor([0.0, math.log(2.0)]), axis=-1)
    assert np.allclose(out.data, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)


def test_softmax_shift_invariance():
    x = np.array([0.3, -1.2, 4.0, 2.2])
    a = T.softmax(Tensor(x), axis=-1).data
    b = T.softmax(Tensor(x + 1000.0), axis=-1).data
    assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
)
def test_softmax_rows_sum_to_one(values):
    out = T.softmax(Tensor(values), axis=-1)
    assert abs(out.data.sum() - 1.0) < 1e-12
    assert (out.data >= 0).all()


def test_cross_entropy_uniform_is_log_c():
    for c in (3, 10, 196):
        logits = Tensor(np.zeros((4, c)))
        loss = T.cross_entropy(logits, np.zeros(4, dtype=int))
        assert abs(loss.item() - math.log(c)) < 1e-12


def test_cross_entropy_saturated_correct():
    logits = np.zeros((2, 5))
    logits[0, 3] = 40.0
    logits[1, 1] = 40.0
    loss = T.cross_entropy(Tensor(logits), [3, 1])
    assert loss.item() < 1e-10


def test_cross_entropy_closed_form():
    logits = Tensor([[0.0, math.log(2.0), math.log(3.0)]])
    loss = T.cross_entropy(logits, [2])
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [-1])


def test_layernorm_constant_vector_is_zero():
    x = Tensor(np.full((3, 4), 2.5))
    out = T.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
    assert np.max(np.abs(out.data)) < 1e-9


def test_layernorm_two_point_closed_form():
    out = T.layernorm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)


def test_layernorm_zero_gamma_returns_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6)))
    beta = np.linspace(-1, 1, 6)
    out = T.layernorm(x, Tensor(np.zeros(6)), Tensor(beta))
    assert np.allclose(out.data, np.broadcast_to(beta, (2, 6)), atol=1e-15)


def test_gelu_zero():
    assert T.gelu(Tensor(0.0)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=1),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_concat_slice_round_trip_bit_exact(na, nb, axis, seed):
    rng = np.random.default_rng(seed)
    shape_a = [3, 3]
    shape_b = [3, 3]
    shape_a[axis] = na
    shape_b[axis] = nb
    a = rng.normal(size=shape_a)
    b = rng.normal(size=shape_b)
    cat = T.concat(Tensor(a), Tensor(b), axis=axis)
    back_a = T.slice_axis(cat, axis, 0, na)
    back_b = T.slice_axis(cat, axis, na, na + nb)
    assert np.array_equal(back_a.data, a)
    assert np.array_equal(back_b.data, b)


def test_concat_of_half_slices_restores_extent():
    d = 8
    a = Tensor(np.arange(d, dtype=float))
    b = Tensor(np.arange(d, dtype=float) + 100)
    half_a = T.slice_axis(a, 0, 0, d // 2)
    half_b = T.slice_axis(b, 0, 0, d // 2)
    joined = T.concat(half_a, half_b, axis=0)
    assert joined.shape == (d,)


def test_concat_axis_mismatch():
    with pytest.raises(T.ShapeError):
        T.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), axis=0)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, -4.0, 6.0], atol=1e-15)


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_non_scalar_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.mul(x, x))


def test_take_accumulates_duplicates():
    x = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    out = T.take(x, [1, 1, 3])
    T.backward(T.sum_all(out))
    assert np.array_equal(x.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_grad_check_quadratic():
    params = {"p": Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)}

    def f(ps):
        return T.sum_all(T.mul(ps["p"], ps["p"]))

    err = T.grad_check(f, params, h=1e-5, sample_count=3)
    assert err < 1e-9


def test_grad_check_linear_exact_to_rounding():
    w = np.array([2.0, -3.0, 0.5])
    params = {"p": Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)}

    def f(ps):
        return T.sum_all(T.mul(ps["p"], Tensor(w)))

    err = T.grad_check(f, params, h=1e-5, sample_count=3)
    assert err < 1e-10


OP_CASES = [
    ("matmul", lambda p: T.sum_all(T.gelu(T.matmul(p["a"], p["b"]))), {"a": (4, 3), "b": (3, 5)}),
    ("softmax", lambda p: T.sum_all(T.mul(T.softmax(p["a"], axis=-1), p["b"])), {"a": (3, 4), "b": (3, 4)}),
    (
        "layernorm",
        lambda p: T.sum_all(T.gelu(T.layernorm(p["a"], p["g"], p["bta"]))),
        {"a": (3, 5), "g": (5,), "bta": (5,)},
    ),
    (
        "cross_entropy",
        lambda p: T.cross_entropy(T.matmul(p["a"], p["b"]), [0, 2, 1]),
        {"a": (3, 4), "b": (4, 3)},
    ),
    (
        "concat_slice_take",
        lambda p: T.mean_all(
            T.mul(
                T.take(T.concat(p["a"], p["b"], axis=0), [0, 2, 2, 1]),
                T.slice_axis(T.concat(p["a"], p["b"], axis=0), 0, 0, 4),
            )
        ),
        {"a": (2, 3), "b": (2, 3)},
    ),
]


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("name,fn,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, fn, shapes, seed):
    rng = np.random.default_rng(seed)
    params = {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()}
    err = T.grad_check(fn, params, h=1e-5, sample_count=64, rng=np.random.default_rng(seed))
    assert err < 1e-4, f"{name}: max relative error {err}"


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(123)
        a = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        loss = T.cross_entropy(T.gelu(T.matmul(a, b)), rng.integers(0, 6, size=6))
        T.backward(loss)
        return loss.item(), a.grad.copy(), b.grad.copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert l1 == l2
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)


def test_debug_checks_flag_nan():
    with np.errstate(over="ignore"), pytest.raises(T.NumericsError):
        T.mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))
