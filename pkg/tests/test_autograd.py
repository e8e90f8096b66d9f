import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from topoformer import autograd as ag
from topoformer.autograd import Tape, Tensor, grad_check, no_grad
from topoformer.errors import ConfigurationError, ContractError, DimensionError


def param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def run_backward(f, *inputs):
    ag.zero_grads(inputs)
    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    return loss


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ag.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ag.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(info.value)
    assert str(info.value).count("(2, 3)") == 2


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 3))), param(rng.normal(size=(3, 3)))
    report = grad_check(lambda a, b: ag.matmul(a, b).sum(), [a, b])
    assert report.max_relative_error < 1e-6
    # sum(A B) has d/dA = 1 B^T
    run_backward(lambda a, b: ag.matmul(a, b).sum(), a, b)
    np.testing.assert_allclose(a.grad, np.ones((3, 3)) @ b.data.T, rtol=1e-14)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(2, 4, 5)))
    assert grad_check(lambda a, b: (ag.matmul(a, b) * ag.matmul(a, b)).sum(), [a, b]).max_relative_error < 1e-6


# ---------------------------------------------------------------- conv1d

def test_conv1d_identity_kernel():
    out = ag.conv1d(Tensor([[1.0, 1.0, 1.0]]), Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[1, 1, 1]])


def test_conv1d_zero_padded_box_filter():
    out = ag.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 1.0, 1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[3, 6, 5]])


def test_conv1d_is_cross_correlation_with_bias():
    out = ag.conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 0.0, -1.0]]]), Tensor([0.5]))
    # y[i] = x[i-1] - x[i+1] + 0.5 with zeros outside
    np.testing.assert_array_equal(out.data, [[-1.5, -1.5, -1.5, 3.5]])


def test_conv1d_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        ag.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))))


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        ag.conv1d(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 3, 3))))


def test_conv1d_kernel_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 8)))
    kernel, bias = param(rng.normal(size=(3, 2, 3))), param(rng.normal(size=3))
    weights = rng.normal(size=(3, 8))
    report = grad_check(lambda x, k, b: (ag.conv1d(x, k, b) * Tensor(weights)).sum(), [x, kernel, bias])
    assert report.max_relative_error < 1e-6


def test_conv1d_input_gradient_batched():
    rng = np.random.default_rng(3)
    x = param(rng.normal(size=(2, 2, 6)))
    kernel = param(rng.normal(size=(2, 2, 5)))
    report = grad_check(lambda x, k: ag.tanh(ag.conv1d(x, k)).sum(), [x, kernel])
    assert report.max_relative_error < 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ag.softmax(Tensor([1000.0, 1000.0, 1000.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, c):
    y = ag.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ag.softmax(Tensor(x + c), axis=-1).data, y, atol=1e-12)


def test_softmax_gradient_other_axis():
    rng = np.random.default_rng(4)
    x = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda x: (ag.softmax(x, axis=0) * w).sum(), [x]).max_relative_error < 1e-6


# ---------------------------------------------------------------- elementwise

def test_scalar_activations():
    assert ag.sigmoid(Tensor(0.0)).item() == 0.5
    assert ag.tanh(Tensor(0.0)).item() == 0.0
    assert ag.relu(Tensor(-2.5)).item() == 0.0


def test_sigmoid_is_stable_for_large_inputs():
    y = ag.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_shape_errors():
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(DimensionError):
        ag.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)
    with pytest.raises(DimensionError):
        Tensor(np.ones(6)).reshape(4, 2)
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))).sum(axis=2)


def test_transpose_round_trip_is_exact():
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4, 5)))
    np.testing.assert_array_equal(x.transpose().transpose().data, x.data)
    np.testing.assert_array_equal(x.reshape(12, 5).reshape(3, 4, 5).data, x.data)


UNARY = {
    "sigmoid": ag.sigmoid,
    "tanh": ag.tanh,
    "relu": ag.relu,
    "absolute": ag.absolute,
    "scale": lambda x: ag.scale(x, -1.7),
    "power": lambda x: ag.power(x, 3.0),
    "mean_axis": lambda x: ag.mean(x, axis=1),
    "sum_axis": lambda x: ag.tensor_sum(x, axis=0, keepdims=True),
    "reshape": lambda x: x.reshape(4, 3),
    "transpose": lambda x: x.transpose(),
    "slice": lambda x: x[1:, ::2],
    "fancy_index": lambda x: x[[0, 2, 2]],
    "softmax": ag.softmax,
    "max_pool": lambda x: ag.max_pool1d(x, 2),
}
BINARY = {
    "add": ag.add,
    "sub": ag.sub,
    "mul": ag.mul,
    "add_broadcast": lambda a, b: ag.add(a, b[0]),
    "mul_broadcast": lambda a, b: ag.mul(a, b[:, :1]),
    "concat0": lambda a, b: ag.concat([a, b], axis=0),
    "concat1": lambda a, b: ag.concat([a, b], axis=1),
    "matmul": lambda a, b: ag.matmul(a, b.transpose()),
}


def _op_trial(op, arity, seed):
    rng = np.random.default_rng(seed)
    inputs = [param(rng.uniform(-2, 2, size=(3, 4))) for _ in range(arity)]
    weights = {}

    def loss(*xs):
        y = op(*xs)
        if y.shape not in weights:
            weights[y.shape] = rng.normal(size=y.shape)
        return (y * Tensor(weights[y.shape])).sum()

    return grad_check(loss, inputs, tolerance=1e-5)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, seed):
    report = _op_trial(UNARY[name], 1, seed)
    assert report.passed, report.failures[:3]


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name, seed):
    report = _op_trial(BINARY[name], 2, seed)
    assert report.passed, report.failures[:3]


# ---------------------------------------------------------------- backward and tape

def test_square_gradient():
    x = param(3.0)
    run_backward(lambda x: x * x, x)
    assert x.grad == 6.0


def test_sum_sigmoid_wx_matches_finite_differences():
    rng = np.random.default_rng(6)
    w, x = param(rng.normal(size=(4, 3))), param(rng.normal(size=(3, 1)))
    assert grad_check(lambda w, x: ag.sigmoid(w @ x).sum(), [w, x]).max_relative_error < 1e-6


def test_repeated_backward_accumulates():
    x = param([1.0, -2.0])
    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    ag.zero_grads([x])
    assert x.grad is None


def test_tensor_backward_method_uses_recording_tape():
    x = param([2.0])
    with Tape():
        loss = (x * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0])


def test_backward_contract_errors():
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = x * x
        with pytest.raises(ContractError):
            tape.backward(y)
    with pytest.raises(ContractError):
        Tape().backward(Tensor(1.0))
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_gradient_reaches_intermediates_and_skips_constants():
    x = param([1.0, 2.0])
    c = Tensor([5.0, 5.0])
    with Tape() as tape:
        h = x * c
        loss = h.sum()
        tape.backward(loss)
    np.testing.assert_array_equal(h.grad, [1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    assert c.grad is None


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(7)
    w = param(rng.normal(size=(3, 3)))
    with Tape() as tape:
        h = ag.tanh(w @ w)
        loss = ag.mean(ag.concat([h, ag.relu(h)], axis=0))
    assert tape.ops == ["matmul", "tanh", "relu", "concat", "mean"]
    produced = set()
    for node in tape.nodes:
        for parent in node.parents:
            assert parent.requires_grad and (id(parent) in produced or parent is w)
        produced.add(id(node.out))
    assert tape.nodes[-1].out is loss


def test_backward_visits_nodes_in_reverse_recording_order():
    visited = []

    def traced(name, x):
        return ag.record_op(name, x.data.copy(), [x], lambda g: (visited.append(name) or g,))

    x = param([1.0])
    with Tape() as tape:
        a = traced("a", x)
        b = traced("b", a)
        c = traced("c", b)
        tape.backward(c.sum())
    assert visited == ["c", "b", "a"]


def test_no_grad_records_nothing():
    x = param([1.0])
    with Tape() as tape:
        with no_grad():
            y = ag.tanh(x * x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_tape_replay_is_bitwise_deterministic():
    def episode():
        rng = np.random.default_rng(11)
        w, x = param(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 2)))
        loss = run_backward(lambda w: ag.softmax(ag.tanh(w @ x), axis=0).sum() * 0 + (w @ x).mean(), w)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = episode(), episode()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_identity_is_exact():
    # at 0 the perturbed points +-h are exact, so the central difference is exactly 1
    x = param(0.0)
    report = grad_check(lambda x: x, [x])
    assert report.max_relative_error == 0.0
    assert report.checked_elements == 1


def test_grad_check_matmul_chain_depth_three():
    rng = np.random.default_rng(8)
    a, b, c = (param(rng.normal(size=(3, 3))) for _ in range(3))
    assert grad_check(lambda a, b, c: ((a @ b) @ c).sum(), [a, b, c]).max_relative_error < 1e-6


def test_grad_check_flags_a_wrong_rule():
    def bad_square(x):
        return ag.record_op("bad", x.data ** 2, [x], lambda g: (g * x.data,))  # missing factor 2

    report = grad_check(lambda x: bad_square(x).sum(), [param([1.0, 2.0])])
    assert not report.passed
    assert len(report.failures) == 2


def test_grad_check_subsampling_is_seeded():
    x = param(np.arange(100.0) / 50)
    r1 = grad_check(lambda x: ag.tanh(x).sum(), [x], max_elements=10, seed=3)
    r2 = grad_check(lambda x: ag.tanh(x).sum(), [x], max_elements=10, seed=3)
    assert r1.checked_elements == 10
    np.testing.assert_array_equal(np.isnan(r1.errors[0]), np.isnan(r2.errors[0]))


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda x: x, [param(1.0)], step=0.0)
