import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqosgan.autograd import Adam, AdamState, Conv2d, Dense, LayerParams, Tensor, adam_step, no_grad, ops
from vqosgan.errors import NumericError

from conftest import numeric_grad, rel_err


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = b[ki] if b is not None else 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[ki, ci, u, v] * xp[ni, ci, i * stride + u, j * stride + v]
                    out[ni, ki, i, j] = acc
    return out


def naive_conv_transpose2d(x, w, stride, pad):
    n, c, h, wd = x.shape
    _, k, kh, kw = w.shape
    full = np.zeros((n, k, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[ni, ci, i, j] * w[ci]
    ho, wo = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad:pad + ho, pad:pad + wo]


# ---------------------------------------------------------------------------
# tensor and backward semantics


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_on_non_scalar_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_mse_gradient_matches_hand_derivation():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    x = rng.normal(size=(2, 1))
    y = rng.normal(size=(2, 1))
    ops.mse(W @ Tensor(x), Tensor(y)).backward()
    # d/dW mean((Wx - y)^2) over n = 2 outputs = 2 (Wx - y) x^T / n
    expected = 2.0 * (W.data @ x - y) @ x.T / 2
    np.testing.assert_allclose(W.grad, expected, atol=1e-14)


def test_no_grad_skips_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_shared_subexpression_gradients_add():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


# ---------------------------------------------------------------------------
# forward oracles


def test_conv2d_identity_kernel():
    x = np.ones((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), None, stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_kernel_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    out = ops.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.arange(4.0)))
    for k in range(4):
        np.testing.assert_array_equal(out.data[:, k], np.full((2, 3, 3), float(k)))


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=0)
    assert np.max(np.abs(out.data - naive_conv2d(x, w, b, 2, 0))) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
       st.integers(4, 7), st.integers(0, 10_000))
def test_conv2d_matches_naive_loop_property(n, c, k, stride, pad, size, seed):
    rng = np.random.default_rng(seed)
    kh = int(rng.integers(1, 4))
    x, w, b = rng.normal(size=(n, c, size, size)), rng.normal(size=(k, c, kh, kh)), rng.normal(size=k)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert out.shape[2] == (size + 2 * pad - kh) // stride + 1
    assert np.max(np.abs(out.data - naive_conv2d(x, w, b, stride, pad))) < 1e-10


def test_conv_transpose_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
    out = ops.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_transpose_scatter_of_ones():
    out = ops.conv_transpose2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 2), (3, 1, 3)])
def test_conv_transpose_matches_scatter_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 2, k, k))
    out = ops.conv_transpose2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
    assert out.shape[2] == (4 - 1) * stride - 2 * pad + k
    np.testing.assert_allclose(out.data, naive_conv_transpose2d(x, w, stride, pad), atol=1e-12)


def adjoint_gap(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kh = int(rng.integers(1, 5))
    stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, kh))
    # choose sizes the stride tiles exactly, so the transpose maps back onto x's full shape
    m = int(rng.integers(1, 5))
    while kh - 2 * pad + stride * m < 1:
        m += 1
    size = kh - 2 * pad + stride * m
    x = rng.normal(size=(n, c, size, size))
    w = rng.normal(size=(k, c, kh, kh))
    y_shape = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).shape
    y = rng.normal(size=y_shape)
    lhs = float((ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data * y).sum())
    back = ops.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=pad).data
    assert back.shape == x.shape
    rhs = float((x * back).sum())
    return abs(lhs - rhs)


def test_conv_adjoint_identity_100_instances():
    assert max(adjoint_gap(s) for s in range(100)) < 1e-9


def test_dense_identity_and_bias():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(ops.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = ops.dense(Tensor(x), Tensor(np.zeros((2, 4))), Tensor([1.5, -2.0]))
    np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    expected = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                expected[i, j] += x[i, k] * w[j, k]
    np.testing.assert_allclose(ops.dense(Tensor(x), Tensor(w)).data, expected, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="empty output"):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="stride"):
        ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), stride=0)
    with pytest.raises(ValueError, match="dense"):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        LayerParams(Tensor(np.ones((2, 3, 3, 3))), Tensor(np.zeros(2)), in_channels=4, out_channels=2)


# ---------------------------------------------------------------------------
# activations and losses


def test_activation_values():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    row = ops.softmax(Tensor(np.full((2, 5), 3.0)), axis=1).data
    np.testing.assert_allclose(row, np.full((2, 5), 0.2), atol=1e-15)
    sm = ops.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 30), axis=1).data
    assert np.max(np.abs(sm.sum(axis=1) - 1)) < 1e-12
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    np.testing.assert_allclose(ops.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])


def test_loss_values():
    x = Tensor(np.random.default_rng(0).random((3, 3)))
    assert ops.l1(x, x).item() == 0.0
    assert ops.mse(x, x).item() == 0.0
    assert ops.bce(Tensor([0.5]), 1.0).item() == pytest.approx(np.log(2), abs=1e-12)
    # clamped: a saturated wrong answer is finite
    assert np.isfinite(ops.bce(Tensor([0.0]), 1.0).item())
    assert ops.bce(Tensor([0.0]), 1.0).item() == pytest.approx(-np.log(1e-7), rel=1e-9)
    assert ops.cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(np.log(4))


def test_losses_reject_empty_and_mismatch():
    with pytest.raises(ValueError, match="empty"):
        ops.l1(Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    with pytest.raises(ValueError, match="shape"):
        ops.mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        ops.sigmoid(Tensor([np.nan]))
    with pytest.raises(NumericError):
        ops.cross_entropy(Tensor([[np.inf, 0.0]]), [0])


def _fd_check(build, arrays, tol=1e-6):
    """Compare tape gradients with central differences for every array in ``arrays``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return build(*[Tensor(x) for x in arrays]).item()
        worst = max(worst, rel_err(t.grad, numeric_grad(f, a)))
    assert worst < tol, worst
    return worst


# each case: (name, builder, input shapes); all reduce to a scalar with a fixed random projection
_PROJ = np.random.default_rng(99).normal(size=64)


def _project(t: Tensor) -> Tensor:
    flat = ops.reshape(t, (t.size,))
    return (flat * Tensor(_PROJ[:t.size])).sum()


ELEMENTWISE = {
    "relu": lambda x: _project(ops.relu(x)),
    "leaky_relu": lambda x: _project(ops.leaky_relu(x, 0.2)),
    "sigmoid": lambda x: _project(ops.sigmoid(x)),
    "tanh": lambda x: _project(ops.tanh(x)),
    "softmax": lambda x: _project(ops.softmax(ops.reshape(x, (1, 5)), axis=1)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("seed", range(4))
def test_activation_gradients(name, seed):
    x = np.random.default_rng(seed).normal(size=5)
    x[np.abs(x) < 1e-3] += 0.01  # keep clear of the relu kink
    _fd_check(ELEMENTWISE[name], [x])


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    _fd_check(lambda z: ops.cross_entropy(z, [0, 2, 1]), [rng.normal(size=(3, 4))])
    labels = Tensor(rng.integers(0, 2, 6).astype(float))
    _fd_check(lambda p: ops.bce(p, labels), [rng.uniform(0.1, 0.9, 6)])
    t = rng.normal(size=(2, 3))
    _fd_check(lambda a: ops.mse(a, Tensor(t)), [rng.normal(size=(2, 3))])
    _fd_check(lambda a: ops.l1(a, Tensor(t)), [t + rng.choice([-1, 1], size=t.shape) * rng.uniform(0.1, 1, t.shape)])


@pytest.mark.parametrize("seed", range(4))
def test_structural_op_gradients(seed):
    rng = np.random.default_rng(seed)
    _fd_check(lambda a, b: _project(ops.concat([a, b], axis=1)), [rng.normal(size=(2, 1, 2, 2)),
                                                                   rng.normal(size=(2, 2, 2, 2))])
    _fd_check(lambda a: _project(ops.spatial_mean(a)), [rng.normal(size=(2, 3, 2, 2))])
    _fd_check(lambda a: _project(ops.rows(a, 1, 3)), [rng.normal(size=(4, 3))])
    _fd_check(lambda a, b: _project(a * b + a), [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])
    _fd_check(lambda a, b: _project(a @ b), [rng.normal(size=(2, 3)), rng.normal(size=(3, 2))])


@pytest.mark.parametrize("seed", range(4))
def test_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    _fd_check(lambda x, w, b: _project(ops.dense(x, w, b)),
              [rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)])
    _fd_check(lambda x, w, b: _project(ops.conv2d(x, w, b, stride=2, padding=1)),
              [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)])
    _fd_check(lambda x, w, b: _project(ops.conv_transpose2d(x, w, b, stride=2, padding=1)),
              [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(2, 1, 4, 4)), rng.normal(size=1)])


def test_layers_expose_consistent_params():
    conv = Conv2d(3, 5, 4, 2, 1, np.random.default_rng(0))
    p = conv.params
    assert p.weight.shape == (5, 3, 4, 4) and p.bias.shape == (5,)
    dense = Dense(7, 2)
    assert dense.params.weight.shape == (2, 7)
    assert dense.num_parameters() == 16


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(3)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = np.zeros(3)
    state = AdamState.for_params([p], lr=0.01)
    adam_step([p], [g], state)
    # bias-corrected m = g, v = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), atol=1e-9)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), atol=1e-7)


def test_adam_shape_mismatch_rejected():
    state = AdamState.for_params([np.zeros(3)])
    with pytest.raises(ValueError, match="shape"):
        adam_step([np.zeros(3)], [np.zeros(4)], state)


def test_adam_runs_are_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        opt = Adam([w], lr=0.05)
        for _ in range(10):
            opt.zero_grad()
            ops.mse(Tensor(x) @ w, Tensor(y)).backward()
            opt.step()
        return w.data.copy()

    assert run().tobytes() == run().tobytes()
