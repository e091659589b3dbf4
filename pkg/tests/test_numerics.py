import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rarec import numerics as nx
from rarec.numerics import Tensor

from conftest import check_grads

SEEDS = range(100)


def rand_shape(rng, ndim=None):
    ndim = ndim if ndim is not None else int(rng.integers(1, 4))
    return tuple(int(n) for n in rng.integers(1, 4, size=ndim))


def param(rng, shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def weights_for(rng, shape):
    # a fixed random projection so every output element matters
    return rng.normal(size=shape)


def scalarize(out, w):
    return nx.sum_(nx.mul(out, Tensor(w)))


def unary_case(build, positive=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = param(rng, rand_shape(rng), positive)
        w = weights_for(rng, build(x).shape)
        check_grads(lambda: scalarize(build(x), w), {"x": x})
    return case


def binary_case(build, positive_b=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng)
        # broadcast the second operand over a random subset of axes
        bshape = tuple(1 if rng.random() < 0.3 else n for n in shape)
        a = param(rng, shape)
        b = param(rng, bshape, positive_b)
        w = weights_for(rng, build(a, b).shape)
        check_grads(lambda: scalarize(build(a, b), w), {"a": a, "b": b})
    return case


PRIMITIVE_CASES = {
    "add": binary_case(nx.add),
    "sub": binary_case(nx.sub),
    "mul": binary_case(nx.mul),
    "div": binary_case(nx.div, positive_b=True),
    "scale": unary_case(lambda x: nx.scale(x, -1.7)),
    "softmax": unary_case(lambda x: nx.softmax(x, axis=-1)),
    "logsumexp": unary_case(lambda x: nx.logsumexp(x, axis=-1)),
    "exp": unary_case(nx.exp),
    "log": unary_case(nx.log, positive=True),
    "log_sigmoid": unary_case(nx.log_sigmoid),
    "gelu": unary_case(lambda x: nx.nonlinearity(x, "gelu")),
    "tanh": unary_case(lambda x: nx.nonlinearity(x, "tanh")),
    "sigmoid": unary_case(lambda x: nx.nonlinearity(x, "sigmoid")),
    "transpose": unary_case(lambda x: nx.transpose(x)),
    "reshape": unary_case(lambda x: nx.reshape(x, (-1,))),
    "sum": unary_case(lambda x: nx.sum_(x, axis=0, keepdims=True)),
    "mean": unary_case(lambda x: nx.mean(x, axis=-1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in SEEDS:
        PRIMITIVE_CASES[name](seed)


def test_matmul_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        batch = tuple(int(n) for n in rng.integers(1, 3, size=int(rng.integers(0, 2))))
        n, k, m = (int(v) for v in rng.integers(1, 4, size=3))
        a = param(rng, batch + (n, k))
        # weights shared across the batch half of the time
        b = param(rng, (k, m) if rng.random() < 0.5 else batch + (k, m))
        w = weights_for(rng, nx.matmul(a, b).shape)
        check_grads(lambda: scalarize(nx.matmul(a, b), w), {"a": a, "b": b})


def test_matmul_vector_operands():
    rng = np.random.default_rng(1)
    a, b, v = param(rng, (3,)), param(rng, (3, 2)), param(rng, (2,))
    check_grads(lambda: nx.sum_(nx.matmul(nx.matmul(a, b), v)), {"a": a, "b": b, "v": v})


def test_concat_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng, 2)
        a = param(rng, shape)
        b = param(rng, (int(rng.integers(1, 4)), shape[1]))
        w = weights_for(rng, (shape[0] + b.shape[0], shape[1]))
        check_grads(lambda: scalarize(nx.concat([a, b], axis=0), w), {"a": a, "b": b})


def test_layer_norm_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng, 2)
        shape = shape[:-1] + (shape[-1] + 1,)
        x, g, b = param(rng, shape), param(rng, shape[-1:]), param(rng, shape[-1:])
        w = weights_for(rng, shape)
        check_grads(lambda: scalarize(nx.layer_norm(x, g, b, eps=1e-5), w), {"x": x, "g": g, "b": b})


def test_embedding_gradients_with_repeated_ids():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        table = param(rng, (5, 3))
        ids = rng.integers(0, 5, size=(int(rng.integers(1, 4)), 4))
        w = weights_for(rng, ids.shape + (3,))
        check_grads(lambda: scalarize(nx.embedding(table, ids), w), {"table": table})


def test_cosine_similarity_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng, 2)
        a, b = param(rng, shape), param(rng, shape)
        w = weights_for(rng, shape[:-1])
        check_grads(lambda: scalarize(nx.cosine_similarity(a, b), w), {"a": a, "b": b})


def test_random_five_op_graph():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x, W, c = param(rng, (2, 3)), param(rng, (3, 4)), param(rng, (4,))

        def loss():
            h = nx.nonlinearity(nx.add(nx.matmul(x, W), c), "tanh")
            return nx.sum_(nx.log_sigmoid(nx.softmax(h, axis=-1)))

        check_grads(loss, {"x": x, "W": W, "c": c})


# examples


def test_matmul_identity():
    out = nx.forward_primitive("matmul", Tensor([[1, 2], [3, 4]]), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_of_equal_logits():
    np.testing.assert_array_equal(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6).filter(lambda v: any(abs(x) > 1e-3 for x in v)))
def test_cosine_with_itself_is_one(v):
    t = Tensor(v)
    assert nx.cosine_similarity(t, t).item() == pytest.approx(1.0, abs=1e-12)


def test_unknown_primitive_and_shape_errors():
    with pytest.raises(nx.NumericsError):
        nx.forward_primitive("conv2d", Tensor([1.0]))
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_backward_examples():
    p = Tensor([0.3, -1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(nx.backward(nx.sum_(p), {"p": p})["p"], [1, 1, 1])
    p = Tensor([1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(nx.backward(nx.dot(p, p), {"p": p})["p"], [2, 4])


def test_backward_rejects_non_scalar_and_zero_fills_disconnected():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([5.0], requires_grad=True)
    with pytest.raises(nx.ShapeError):
        nx.backward(nx.scale(p, 2.0))
    grads = nx.backward(nx.sum_(p), {"p": p, "q": q})
    np.testing.assert_array_equal(grads["q"], [0.0])


def test_frozen_tensors_receive_no_gradient():
    frozen = Tensor([1.0, 2.0])
    p = Tensor([3.0, 4.0], requires_grad=True)
    nx.backward(nx.dot(frozen, p), {"p": p})
    assert frozen.grad is None


# optimizer


def test_zero_gradient_leaves_parameter_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = nx.OptimizerState(lr=0.1, total_steps=10, weight_decay=0.0)
    nx.optimizer_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_single_step_with_zero_moments():
    p = Tensor(1.0, requires_grad=True)
    state = nx.OptimizerState(lr=0.1, total_steps=0, weight_decay=0.0, beta1=0.0, beta2=0.0)
    nx.optimizer_step({"p": p}, {"p": np.array(1.0)}, state)
    assert p.data == pytest.approx(0.9, abs=1e-7)


def test_linear_decay_reaches_zero():
    p = Tensor([1.0], requires_grad=True)
    state = nx.OptimizerState(lr=0.1, total_steps=3)
    for _ in range(3):
        nx.optimizer_step({"p": p}, {"p": np.ones(1)}, state)
    assert state.effective_lr() == 0.0
    frozen = p.data.copy()
    for _ in range(2):
        nx.optimizer_step({"p": p}, {"p": np.ones(1)}, state)
    np.testing.assert_array_equal(p.data, frozen)


def test_optimizer_requires_every_gradient():
    with pytest.raises(KeyError):
        nx.optimizer_step({"p": Tensor([1.0])}, {}, nx.OptimizerState(lr=0.1, total_steps=1))


# invariants


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_softmax_rows_and_layer_norm_moments(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    s = nx.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    if cols > 1:
        ln = nx.layer_norm(Tensor(x), Tensor(np.ones(cols)), Tensor(np.zeros(cols))).data
        np.testing.assert_allclose(ln.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(ln.var(axis=-1), 1.0, atol=1e-6)


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 4)))
        W = nx.init_trunc_normal((4, 4), rng_seed=rng)
        return nx.softmax(nx.matmul(x, W)).data
    np.testing.assert_array_equal(run(), run())


def test_log_sigmoid_is_stable_at_extremes():
    out = nx.log_sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == -800.0 and out[2] == 0.0
    assert out[1] == pytest.approx(-math.log(2))


def test_trunc_normal_respects_bounds():
    t = nx.init_trunc_normal((200, 50), rng_seed=3).data
    assert t.min() >= -0.02 and t.max() <= 0.02
    assert 0.007 < t.std() < 0.01
    np.testing.assert_array_equal(t, nx.init_trunc_normal((200, 50), rng_seed=3).data)
