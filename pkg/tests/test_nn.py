import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from owsd.errors import (
    FormatError,
    InvalidArchitectureError,
    MissingForwardError,
    MissingGradientError,
    NonFiniteError,
    ShapeError,
)
from owsd.nn import Adam, Network, Parameter, conv2d, conv2d_transpose, softmax
from owsd.nn import io as nnio
from owsd.nn import specs as S


def naive_conv2d(x, w, stride, pad):
    """Direct seven-loop convolution used as an oracle."""
    n, h, wd, c = x.shape
    k, _, _, f = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, f))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(f):
                    patch = xp[b, i * stride : i * stride + k, j * stride : j * stride + k, :]
                    out[b, i, j, o] = np.sum(patch * w[:, :, :, o])
    return out


def numeric_grad(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        up = f()
        arr[i] = old - eps
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    # norm-based; the floor keeps mathematically-zero gradients comparable
    return np.linalg.norm(a - b) / max(1e-6, np.linalg.norm(a) + np.linalg.norm(b))


def gradcheck(specs, input_shape, batch=3, seed=0, init_std=0.5):
    """Check analytic parameter and input gradients of a random linear
    functional of the network output against central differences.

    Returns the worst relative error seen."""
    specs = [
        S.LayerSpec(s.kind, {**s.options, "init_std": init_std}) if s.kind in ("dense", "conv2d", "deconv2d", "residual") else s
        for s in specs
    ]
    net = Network(specs, input_shape, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(batch,) + tuple(input_shape))
    proj = rng.normal(size=(batch,) + net.output_shape)
    # perturb batchnorm affine params away from identity
    for layer in net.layers:
        for p in layer.params.values():
            if layer.kind == "batchnorm":
                p.value = p.value + rng.normal(scale=0.3, size=p.shape)
            elif p.value.ndim == 1:
                p.value = rng.normal(scale=0.1, size=p.shape)

    def loss():
        out = net.forward(x, training=True, rng=np.random.default_rng(99))
        return float(np.sum(out * proj))

    loss()
    dx = net.backward_from(proj)
    analytic = [p.grad.copy() for p in net.parameters()]
    numeric = [numeric_grad(loss, p.value) for p in net.parameters()]
    errors = [rel_error(a, n) for a, n in zip(analytic, numeric)]
    errors.append(rel_error(dx, numeric_grad(loss, x)))
    assert max(errors) < 1e-4, errors
    return max(errors)


LAYER_CASES = {
    "dense": ([S.dense(4)], (5,)),
    "conv2d": ([S.conv2d(3, 3, stride=1, padding=1)], (5, 5, 2)),
    "conv2d_strided": ([S.conv2d(3, 4, stride=2, padding=1)], (6, 6, 2)),
    "deconv2d": ([S.deconv2d(2, 4, stride=2, padding=1)], (3, 3, 3)),
    "deconv2d_unit_stride": ([S.deconv2d(2, 3, stride=1, padding=0)], (3, 3, 2)),
    "batchnorm_dense": ([S.batchnorm()], (4,)),
    "batchnorm_conv": ([S.batchnorm()], (3, 3, 2)),
    "dropout": ([S.dropout(0.4)], (6,)),
    "relu": ([S.relu()], (7,)),
    "tanh": ([S.tanh()], (7,)),
    "softmax": ([S.softmax()], (5,)),
    "reshape": ([S.reshape(2, 3), S.tanh(), S.flatten()], (6,)),
    "maxpool": ([S.maxpool(2)], (4, 4, 2)),
    "residual": ([S.residual()], (4, 4, 2)),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(case):
    specs, shape = LAYER_CASES[case]
    gradcheck(specs, shape)


def test_stacked_network_gradient():
    specs = [
        S.dense(12),
        S.reshape(2, 2, 3),
        S.deconv2d(2, 4, stride=2, padding=1),
        S.batchnorm(),
        S.relu(),
        S.conv2d(3, 3, padding=1),
        S.maxpool(2),
        S.flatten(),
        S.dropout(0.2),
        S.dense(3),
        S.softmax(),
    ]
    gradcheck(specs, (4,))


@pytest.mark.parametrize("loss_kind", ["mse", "cross_entropy"])
def test_backward_loss_gradient(loss_kind):
    net = Network([S.dense(3, init_std=0.5), S.tanh(), S.dense(4, init_std=0.5), S.softmax()], (5,), seed=3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))
    y = np.eye(4)[rng.integers(0, 4, 6)]

    def loss():
        out = net.forward(x, training=True)
        net._output = None
        if loss_kind == "mse":
            return 0.5 * np.mean((out - y) ** 2)
        return -np.sum(y * np.log(out)) / len(x)

    net.forward(x, training=True)
    net.backward(loss_kind, y)
    for p in net.parameters():
        analytic = p.grad.copy()
        assert rel_error(analytic, numeric_grad(loss, p.value)) < 1e-4


def test_dense_identity_forward():
    net = Network([S.dense(3)], (3,))
    net.layers[0].params["w"].value = np.eye(3)
    out = net.forward(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(np.zeros((1, 2))), [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_softmax_is_a_distribution(z):
    p = softmax(z[None, :])
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6


def test_single_weight_mse_gradient():
    net = Network([S.dense(1)], (1,))
    net.layers[0].params["w"].value = np.array([[2.0]])
    net.forward(np.array([[1.0]]), training=True)
    loss = net.backward("mse", np.array([[0.0]]))
    assert loss == pytest.approx(2.0)
    assert net.layers[0].params["w"].grad[0, 0] == pytest.approx(2.0)


def test_cross_entropy_zero_at_certain_prediction():
    net = Network([S.softmax()], (3,))
    net.forward(np.array([[0.0, 800.0, 0.0]]), training=True)
    assert net.backward("cross_entropy", np.array([[0.0, 1.0, 0.0]])) == pytest.approx(0.0, abs=1e-12)


def test_backward_without_forward_raises():
    net = Network([S.dense(2)], (2,))
    with pytest.raises(MissingForwardError):
        net.backward("mse", np.zeros((1, 2)))
    net.forward(np.zeros((1, 2)))  # inference mode does not arm backward
    with pytest.raises(MissingForwardError):
        net.backward("mse", np.zeros((1, 2)))


def test_target_shape_mismatch():
    net = Network([S.dense(2)], (2,))
    net.forward(np.zeros((1, 2)), training=True)
    with pytest.raises(ShapeError):
        net.backward("mse", np.zeros((1, 3)))


def test_input_shape_mismatch_names_input():
    net = Network([S.dense(2)], (2,))
    with pytest.raises(ShapeError, match="input"):
        net.forward(np.zeros((1, 3)))


def test_non_finite_activation_raises():
    net = Network([S.dense(2)], (2,))
    with pytest.raises(NonFiniteError, match="layer 0"):
        net.forward(np.array([[np.inf, 0.0]]))


def test_invalid_architecture_names_layer():
    with pytest.raises(InvalidArchitectureError, match="layer 1"):
        Network([S.dense(4), S.conv2d(2, 3)], (3,))
    with pytest.raises(InvalidArchitectureError):
        S.dropout(1.0)
    with pytest.raises(InvalidArchitectureError):
        S.conv2d(2, 0)


def test_inference_forward_is_pure():
    net = Network([S.dense(8), S.batchnorm(), S.dropout(0.5), S.relu(), S.dense(2), S.softmax()], (4,), seed=1)
    x = np.random.default_rng(0).normal(size=(5, 4))
    a = net.forward(x)
    b = net.forward(x)
    assert a.tobytes() == b.tobytes()


def test_training_dropout_reproducible_with_seed():
    net = Network([S.dropout(0.5)], (100,))
    x = np.ones((2, 100))
    a = net.forward(x, training=True, rng=np.random.default_rng(5))
    b = net.forward(x, training=True, rng=np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_batchnorm_training_statistics():
    net = Network([S.batchnorm()], (4, 4, 3))
    x = np.random.default_rng(0).normal(loc=2.0, scale=3.0, size=(8, 4, 4, 3))
    out = net.forward(x, training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-5)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (3, 2, 5)])
def test_conv_matches_naive_oracle(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 9, 8, 3))
    w = rng.normal(size=(k, k, 3, 4))
    np.testing.assert_allclose(conv2d(x, w, stride, pad), naive_conv2d(x, w, stride, pad), atol=1e-10)


@pytest.mark.parametrize("trial", range(20))
def test_deconv_is_adjoint_of_conv(trial):
    rng = np.random.default_rng(trial)
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    h = int(rng.integers(k, 10))
    x = rng.normal(size=(2, h, h, 3))
    w = rng.normal(size=(k, k, 3, 2))
    y = rng.normal(size=conv2d(x, w, stride, pad).shape)
    lhs = np.sum(conv2d(x, w, stride, pad) * y)
    rhs = np.sum(x * conv2d_transpose(y, w, (h, h), stride, pad))
    assert abs(lhs - rhs) < 1e-8


def test_deconv_output_shape():
    net = Network([S.deconv2d(8, 4, stride=2, padding=1)], (4, 4, 16))
    assert net.output_shape == (8, 8, 8)


# -- ADAM ------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    opt = Adam([p], learning_rate=0.1)
    opt.step()
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.5]))
    p.grad = np.array([1.0])
    Adam([p], learning_rate=0.001).step()
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.value[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_trace_matches_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    # hand-unrolled recurrences for f(w) = w^2, g = 2w, w0 = 1
    w, m, v, expected = 1.0, 0.0, 0.0, []
    for t in (1, 2, 3):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        expected.append(w)
    # frozen values of the trace
    np.testing.assert_allclose(expected, [0.9000000005, 0.8004122287, 0.7015862729], atol=1e-10)

    p = Parameter(np.array([1.0]))
    opt = Adam([p], learning_rate=lr, decay_rate=1.0)
    got = []
    for _ in range(3):
        p.grad = 2 * p.value
        opt.step()
        got.append(p.value[0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_adam_learning_rate_decay():
    opt = Adam([Parameter(np.zeros(1))], learning_rate=1e-4, decay_rate=0.95)
    opt.set_epoch(3)
    assert opt.effective_lr == pytest.approx(1e-4 * 0.95**3)
    assert opt.effective_lr > 0


def test_adam_missing_gradient():
    with pytest.raises(MissingGradientError):
        Adam([Parameter(np.zeros(1))]).step()


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        Adam([], learning_rate=0)
    with pytest.raises(ValueError):
        Adam([], decay_rate=1.5)


# -- serialization -----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple)))
def test_owtn_round_trip_is_bit_exact(arr):
    data = nnio.tensor_to_bytes(arr)
    back = nnio.tensor_from_bytes(data)
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_owtn_layout():
    data = nnio.tensor_to_bytes(np.array([[1.0, 2.0]]))
    assert data[:4] == b"OWTN"
    assert data[4:8] == (1).to_bytes(4, "little")
    assert data[8:12] == (2).to_bytes(4, "little")
    assert data[12:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert data[20] == 0
    assert np.frombuffer(data[21:], "<f8").tolist() == [1.0, 2.0]


def test_owtn_rejects_bad_magic_and_truncation():
    data = nnio.tensor_to_bytes(np.ones(3))
    with pytest.raises(FormatError):
        nnio.tensor_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        nnio.tensor_from_bytes(data[:-1])


def test_network_state_round_trip():
    net = Network([S.dense(3), S.batchnorm(), S.dense(2)], (4,), seed=2)
    blob = nnio.container_to_bytes(b"TEST", 7, "net", "{}", net.state_arrays())
    seed, ident, header, tensors = nnio.container_from_bytes(blob, b"TEST")
    assert (seed, ident, header) == (7, "net", "{}")
    other = Network([S.dense(3), S.batchnorm(), S.dense(2)], (4,), seed=9)
    other.load_state_arrays(tensors)
    assert other.fingerprint() == net.fingerprint()
