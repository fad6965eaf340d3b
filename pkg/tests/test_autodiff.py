import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from vigicaps.autodiff import BatchNormState, Tape, Tensor, grad_check, grad_check_params, ops
from vigicaps.errors import DoubleBackward, NonScalarOutput, ShapeMismatch

rng = np.random.default_rng(0)


def leaf(*shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def test_elementary_values():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    assert ops.tanh(Tensor(0.0)).item() == 0.0
    assert ops.leaky_relu(Tensor(-2.0), 0.3).item() == pytest.approx(-0.6, abs=1e-15)
    assert np.allclose(ops.softmax(Tensor(np.zeros(10))).data, 0.1)


def test_squash_values():
    assert np.linalg.norm(ops.squash(Tensor([1.0, 0.0])).data) == 0.5
    assert np.linalg.norm(ops.squash(Tensor([3.0, 0.0, 0.0])).data) == pytest.approx(0.9)
    assert np.array_equal(ops.squash(Tensor(np.zeros(4))).data, np.zeros(4))


def test_grad_check_examples():
    x = Tensor([3.0, -1.0], requires_grad=True)
    assert grad_check(lambda t: ops.sum(t * t), x) < 1e-8
    A = rng.standard_normal((5, 3))
    y = rng.standard_normal((5, 1))
    w = Tensor(rng.standard_normal((3, 1)), requires_grad=True)

    def mse(t):
        d = Tensor(A) @ t - y
        return ops.mean(d * d)
    assert grad_check(mse, w) < 1e-6


PRIMITIVES = {
    "add": lambda a, b: ops.add(a, b),
    "sub": lambda a, b: ops.sub(a, b),
    "mul": lambda a, b: ops.mul(a, b),
    "broadcast_mul": lambda a, b: ops.mul(a, b[0:1, :]),
    "matmul": lambda a, b: ops.matmul(a, b.transpose(1, 0)),
    "concat": lambda a, b: ops.concat([a, b], axis=1),
    "reshape": lambda a, b: ops.reshape(a, (12,)) * ops.reshape(b, (12,)),
    "transpose": lambda a, b: ops.transpose(a, (1, 0)) * 2.0,
    "slice": lambda a, b: a[1:, ::2],
    "neg": lambda a, b: -a,
    "sigmoid": lambda a, b: ops.sigmoid(a),
    "tanh": lambda a, b: ops.tanh(a),
    "leaky_relu": lambda a, b: ops.leaky_relu(a + 0.05, 0.3),
    "softmax": lambda a, b: ops.softmax(a, axis=1) * b,
    "sum": lambda a, b: ops.sum(a * b, axis=0),
    "mean": lambda a, b: ops.mean(a * b, axis=1, keepdims=True),
    "l2_norm": lambda a, b: ops.l2_norm(a, axis=1),
    "squash": lambda a, b: ops.squash(a, axis=1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    a, b = leaf(3, 4), leaf(3, 4)
    weights = {}

    def f():
        out = PRIMITIVES[name](a, b)
        if "w" not in weights:
            weights["w"] = np.random.default_rng(1).standard_normal(out.shape)
        return ops.sum(out * weights["w"])
    assert grad_check_params(f, [a, b]) < 1e-6


def test_conv2d_matches_scipy_and_gradients():
    x, w, bias = leaf(2, 4, 5, 5), leaf(6, 2, 3, 3), leaf(6)
    out = ops.conv2d(x, w, bias, groups=2).data
    want = np.zeros((2, 6, 3, 3))
    for n in range(2):
        for o in range(6):
            g = o // 3
            for c in range(2):
                want[n, o] += signal.correlate2d(x.data[n, 2 * g + c], w.data[o, c], mode="valid")
            want[n, o] += bias.data[o]
    assert np.allclose(out, want, atol=1e-12)
    weights = rng.standard_normal((2, 6, 2, 2))
    err = grad_check_params(
        lambda: ops.sum(ops.conv2d(x, w, bias, stride=2, groups=2) * weights), [x, w, bias])
    assert err < 1e-6


def test_batchnorm_gradients_and_eval_affine():
    x, g, b = leaf(4, 3, 5), leaf(5), leaf(5)
    weights = rng.standard_normal((4, 3, 5))
    state = BatchNormState(5)
    err = grad_check_params(lambda: ops.sum(ops.batchnorm(x, g, b, state, True) * weights),
                            [x, g, b])
    assert err < 1e-6
    # eval mode: f(a x1 + (1 - a) x2) = a f(x1) + (1 - a) f(x2)
    x1, x2 = rng.standard_normal((2, 6, 5))
    f = lambda t: ops.batchnorm(Tensor(t), g, b, state, False).data
    assert np.allclose(f(0.3 * x1 + 0.7 * x2), 0.3 * f(x1) + 0.7 * f(x2), atol=1e-12)
    assert grad_check_params(lambda: ops.sum(ops.batchnorm(x, g, b, state, False) * weights),
                             [x, g, b]) < 1e-6


def test_batchnorm_running_statistics():
    state = BatchNormState(2, momentum=0.99)
    data = rng.standard_normal((50, 2)) * 3 + 1
    ops.batchnorm(Tensor(data), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
    assert np.allclose(state.running_mean, data.mean(axis=0))
    assert np.allclose(state.running_var, data.var(axis=0, ddof=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_sums_to_one(seed, shift):
    z = np.random.default_rng(seed).standard_normal((4, 7)) * 20 + shift
    assert np.all(np.abs(ops.softmax(Tensor(z), axis=1).data.sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_squash_norm_monotone_and_below_one(seed):
    r = np.random.default_rng(seed)
    direction = r.standard_normal(8)
    direction /= np.linalg.norm(direction)
    scales = np.sort(r.uniform(0, 100, 20))
    norms = np.linalg.norm(ops.squash(Tensor(scales[:, None] * direction)).data, axis=1)
    assert np.all(np.diff(norms) >= 0) and np.all(norms < 1)


def test_tape_errors():
    a = leaf(3)
    out = ops.sum(a * a)
    out.backward()
    with pytest.raises(DoubleBackward):
        out.backward()
    with pytest.raises(NonScalarOutput):
        (leaf(3) * 2.0).backward()
    with pytest.raises(ShapeMismatch):
        ops.add(leaf(2, 3), leaf(3, 2))


def test_gradients_accumulate_on_shared_leaf():
    a = Tensor([2.0], requires_grad=True)
    out = ops.sum(a * a + a * 3.0)
    out.backward()
    assert a.grad.tolist() == [7.0]


def test_explicit_tape_and_reset():
    tape = Tape()
    x = tape.tensor([1.0, 2.0], requires_grad=True)
    y = ops.sum(x * x)
    tape.backward(y)
    assert x.grad.tolist() == [2.0, 4.0]
    tape.reset()
    assert len(tape) == 0
