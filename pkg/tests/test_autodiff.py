"""Gradient-engine tests: per-primitive finite-difference oracles, tape
semantics, and determinism."""

import numpy as np
import pytest

from crossgrasp import autodiff as ad
from crossgrasp.autodiff import (
    DomainError,
    ShapeMismatchError,
    Tape,
    TapeError,
    Tensor,
    backward,
    finite_difference_check,
)


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_forward():
    out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_tanh_fixed_point():
    assert ad.tanh(t64([0.0])).data[0] == 0.0


def test_softmax_symmetry():
    out = ad.softmax_lastdim(t64([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-12)


def test_slice_concat_roundtrip():
    x = t64(np.arange(12.0).reshape(3, 4))
    parts = [ad.slice_lastdim(x, i, i + 2) for i in (0, 2)]
    np.testing.assert_array_equal(ad.concat_lastdim(parts).data, x.data)


def test_embedding_lookup_rows():
    table = t64(np.arange(10.0).reshape(5, 2))
    out = ad.embedding_lookup(table, [3, 0, 3])
    np.testing.assert_array_equal(out.data, [[6, 7], [0, 1], [6, 7]])


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeMismatchError, match="matmul"):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\)"):
        ad.add(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(t64([1.0, -1.0]))
    with pytest.raises(DomainError):
        ad.softmax_lastdim(t64([0.0, np.inf]))


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_square_sum_gradient():
    x = t64([1.0, 2.0, 3.0], grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.mul(x, x))
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x.node_id].data, [2.0, 4.0, 6.0])


def test_tanh_gradient_at_zero():
    x = t64([0.0], grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.tanh(x))
    assert backward(loss, tape)[x.node_id].data[0] == 1.0


def test_matmul_gradient_matches_finite_differences():
    # DERIVED oracle: central differences, h=1e-3, float64 shadow.
    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(3, 1)), dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
    err = finite_difference_check(lambda v: ad.tensor_mean(ad.matmul(v, x)), w, h=1e-3)
    assert err < 1e-4


def test_unreached_leaf_gets_zero_gradient():
    x = t64([1.0, 2.0], grad=True)
    y = t64([3.0, 4.0], grad=True)
    with Tape() as tape:
        _dead = ad.mul(y, y)
        loss = ad.tensor_sum(ad.mul(x, x))
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[y.node_id].data, [0.0, 0.0])


def test_backward_rejects_second_call():
    x = t64([1.0], grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(x if False else ad.mul(x, x))
    backward(loss, tape)
    with pytest.raises(TapeError):
        backward(loss, tape)
    tape.reset()


def test_backward_rejects_nonscalar_and_detached():
    x = t64([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(TapeError):
        backward(y, tape)
    loose = ad.tensor_sum(ad.mul(t64([1.0], grad=True), t64([2.0])))
    with pytest.raises(TapeError):
        backward(loose, tape)


def test_fanout_accumulates():
    x = t64([2.0], grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)               # x^2
        loss = ad.tensor_sum(ad.add(y, ad.mul(x, y)))   # x^2 + x^3
    g = backward(loss, tape)[x.node_id].data[0]
    assert g == pytest.approx(2 * 2.0 + 3 * 4.0)


# ---------------------------------------------------------------------------
# finite_difference_check contract
# ---------------------------------------------------------------------------

def test_fd_check_quadratic_exact():
    err = finite_difference_check(
        lambda x: ad.tensor_sum(ad.mul(x, x)), t64([1.0, 2.0]), h=1e-3)
    assert err < 1e-5


def test_fd_check_sigmoid():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=5), dtype=np.float64)
    err = finite_difference_check(lambda v: ad.tensor_sum(ad.sigmoid(v)), x, h=1e-4)
    assert err < 1e-4


def test_fd_check_constant_function():
    c = t64([5.0])
    err = finite_difference_check(lambda x: ad.tensor_sum(ad.mul(x, Tensor(np.zeros(2), dtype=np.float64))),
                                  t64([1.0, 2.0]), h=1e-3)
    assert err == 0.0
    assert c.data[0] == 5.0


def test_fd_check_rejects_bad_h():
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: ad.tensor_sum(x), t64([1.0]), h=0.0)


# ---------------------------------------------------------------------------
# per-primitive gradient sweep (100 random shapes/seeds across the op set)
# ---------------------------------------------------------------------------

def _rand(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


UNARY_CASES = [
    ("tanh", lambda x: ad.tanh(x)),
    ("sigmoid", lambda x: ad.sigmoid(x)),
    ("relu", lambda x: ad.add(ad.relu(x), ad.scalar_mul(x, 0.01))),  # keep off the kink
    ("exp", lambda x: ad.exp(x)),
    ("softmax", lambda x: ad.softmax_lastdim(x)),
    ("layernorm", lambda x: ad.layernorm_lastdim(x)),
    ("transpose", lambda x: ad.transpose_2d(x)),
    ("mean_last", lambda x: ad.tensor_mean(x, axis=-1)),
    ("sum_last", lambda x: ad.tensor_sum(x, axis=-1)),
    ("slice", lambda x: ad.slice_lastdim(x, 1, 3)),
]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name,op", UNARY_CASES)
def test_unary_gradients_match_finite_differences(name, op, seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(3, 6)))
    x = _rand(rng, shape)

    def f(v):
        return ad.tensor_sum(ad.mul(op(v), _rand(np.random.default_rng(seed + 1), op(x).shape)))

    assert finite_difference_check(f, x, h=1e-4) < 1e-4


@pytest.mark.parametrize("seed", range(8))
def test_binary_and_matmul_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    c = _rand(rng, (4, 2))

    def f(v):
        y = ad.matmul(ad.add(v, b), c)
        y = ad.sub(y, ad.scalar_mul(y, 0.25))
        return ad.tensor_sum(ad.mul(y, y))

    assert finite_difference_check(f, a, h=1e-4) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_broadcast_bias_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    x = _rand(rng, (5, 3))
    bias = _rand(rng, (3,))

    def f(v):
        return ad.tensor_sum(ad.tanh(ad.add(x, v)))

    assert finite_difference_check(f, bias, h=1e-4) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_embedding_gradient(seed):
    rng = np.random.default_rng(300 + seed)
    table = _rand(rng, (6, 3))
    idx = rng.integers(0, 6, size=4)

    def f(v):
        return ad.tensor_sum(ad.mul(ad.embedding_lookup(v, idx),
                                    _rand(np.random.default_rng(seed), (4, 3))))

    assert finite_difference_check(f, table, h=1e-4) < 1e-4


def test_chained_composition_gradient():
    # Composition exercises tape ordering, not just per-op rules.
    rng = np.random.default_rng(9)
    x = _rand(rng, (2, 6))
    w1 = _rand(rng, (6, 5))
    w2 = _rand(rng, (5, 3))

    def f(v):
        h = ad.tanh(ad.matmul(x, v))
        h = ad.layernorm_lastdim(h)
        out = ad.softmax_lastdim(ad.matmul(h, w2))
        return ad.tensor_mean(ad.mul(out, out))

    assert finite_difference_check(f, w1, h=1e-4) < 1e-4


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("matmul", [t64([[1.0, 0.0]]), t64([[2.0], [3.0]])])
    assert out.data[0, 0] == 2.0
    out = ad.apply_primitive("concat-lastdim", [t64([1.0]), t64([2.0])])
    np.testing.assert_array_equal(out.data, [1.0, 2.0])
    with pytest.raises(KeyError):
        ad.apply_primitive("fused-everything", [])


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(77)
        x = Tensor(rng.normal(size=(4, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = ad.tensor_mean(ad.tanh(ad.matmul(x, w)))
        grads = backward(loss, tape)
        return loss.data.copy(), grads[w.node_id].data.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def test_float32_default_dtype():
    x = Tensor(np.ones(3))
    assert x.dtype == np.float32
    y = ad.add(x, Tensor(np.ones(3)))
    assert y.dtype == np.float32
