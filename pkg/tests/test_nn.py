import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robflat.nn import (
    LayerSpec,
    NetworkSpec,
    NonFiniteError,
    ParamVector,
    ShapeError,
    activation_eval,
    cross_entropy,
    forward,
    grad_inputs,
    grad_params,
    init_params,
    loss_and_grads,
    mlp,
    softmax,
)

from conftest import batch, small_net

FD_H = 1e-6


def rel_err(a, b, floor=1e-4):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_param_grad(spec, params, x, y, mode):
    out = params.zeros_like()
    for key in params.trainable_keys():
        arr = params[key]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + FD_H
            lp, _ = cross_entropy(forward(spec, params, x, mode=mode), y)
            arr[idx] = orig - FD_H
            lm, _ = cross_entropy(forward(spec, params, x, mode=mode), y)
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * FD_H)
        out[key] = g
    return out


def fd_input_grad(spec, params, x, y, mode):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + FD_H
        lp, _ = cross_entropy(forward(spec, params, x, mode=mode), y)
        x[idx] = orig - FD_H
        lm, _ = cross_entropy(forward(spec, params, x, mode=mode), y)
        x[idx] = orig
        g[idx] = (lp - lm) / (2 * FD_H)
    return g


GRAD_NETS = [
    dict(seed=0, hidden=(5,), activation="relu", batchnorm="none", mode="eval"),
    dict(seed=1, hidden=(6, 4), activation="silu", batchnorm="none", mode="eval"),
    dict(seed=2, hidden=(5,), activation="gelu", batchnorm="hidden", mode="train"),
    dict(seed=3, hidden=(4, 4), activation="mish", batchnorm="all", mode="train"),
    dict(seed=4, hidden=(5,), activation="silu", batchnorm="all", mode="eval"),
]


def max_grad_error(net):
    mode = net.pop("mode")
    spec, params = small_net(**net)
    x, y = batch(net["seed"])
    _, gp = grad_params(spec, params, x, y, mode=mode)
    fd = fd_param_grad(spec, params, x, y, mode)
    worst = max(float(rel_err(gp[k], fd[k]).max()) for k in params.trainable_keys())
    _, gx = grad_inputs(spec, params, x, y, mode=mode)
    worst = max(worst, float(rel_err(gx, fd_input_grad(spec, params, x.copy(), y, mode)).max()))
    return worst


@pytest.mark.parametrize("net", GRAD_NETS, ids=lambda n: f"{n['activation']}-{n['batchnorm']}-{n['mode']}")
def test_gradient_matches_finite_differences(net):
    assert max_grad_error(dict(net)) < 1e-5


def test_linear_softmax_closed_form():
    rng = np.random.default_rng(7)
    spec = NetworkSpec((LayerSpec("dense", 4, 3, has_bias=False),))
    W = rng.standard_normal((3, 4))
    params = ParamVector({(0, "weight"): W})
    x = rng.uniform(size=(1, 4))
    y = np.array([2])
    _, g = grad_params(spec, params, x, y)
    p = softmax(x @ W.T)[0]
    expected = np.outer(p - np.eye(3)[2], x[0])
    np.testing.assert_allclose(g[(0, "weight")], expected, rtol=1e-13, atol=1e-15)


def test_constant_output_bias_gradient():
    spec, params = small_net(seed=0)
    params = params.zeros_like()
    x, y = batch(0, n=1)
    _, g = grad_params(spec, params, x, y)
    last = max(k[0] for k in params.keys())
    np.testing.assert_allclose(g[(last, "bias")], np.full(3, 1 / 3) - np.eye(3)[y[0]], atol=1e-15)


def test_zero_network_gives_uniform_softmax():
    spec, params = small_net()
    logits = forward(spec, params.zeros_like(), np.random.default_rng(0).uniform(size=(5, 4)))
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 1 / 3)


def test_identity_dense_layer():
    spec = NetworkSpec((LayerSpec("dense", 3, 3),))
    params = ParamVector({(0, "weight"): np.eye(3), (0, "bias"): np.zeros(3)})
    x = np.array([[0.1, 0.5, 0.9]])
    np.testing.assert_array_equal(forward(spec, params, x), x)


def test_forward_matches_straight_line_reimplementation():
    spec = mlp(2, [4], 3, activation="relu")
    params = init_params(spec, np.random.default_rng(11))
    params[(0, "bias")] = np.array([0.1, -0.2, 0.3, 0.0])
    params[(2, "bias")] = np.array([0.05, 0.0, -0.05])
    x = np.array([[0.2, 0.7], [0.9, 0.1]])
    W1, b1, W2, b2 = params[(0, "weight")], params[(0, "bias")], params[(2, "weight")], params[(2, "bias")]
    expected = np.zeros((2, 3))
    for n in range(2):
        hidden = []
        for j in range(4):
            s = b1[j]
            for i in range(2):
                s += W1[j, i] * x[n, i]
            hidden.append(max(s, 0.0))
        for c in range(3):
            s = b2[c]
            for j in range(4):
                s += W2[c, j] * hidden[j]
            expected[n, c] = s
    np.testing.assert_allclose(forward(spec, params, x), expected, rtol=1e-14, atol=1e-15)


def test_cross_entropy_values():
    mean, per = cross_entropy(np.zeros((4, 10)), [0, 3, 5, 9])
    assert mean == pytest.approx(math.log(10), abs=1e-12)
    assert mean == pytest.approx(2.302585, abs=1e-6)
    np.testing.assert_allclose(per, math.log(10))
    e = np.eye(5)[2][None]
    assert cross_entropy(10 * e, [2])[0] < cross_entropy(1 * e, [2])[0]
    # stabilized for huge logits
    big, _ = cross_entropy(np.array([[1000.0, 0.0]]), [1])
    assert big == pytest.approx(1000.0)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [-1])


def test_activation_values():
    for kind in ("silu", "gelu", "mish"):
        assert activation_eval(kind, 0.0) == 0.0
    assert activation_eval("relu", -3.0) == 0.0
    assert activation_eval("relu", 3.0) == 3.0
    assert activation_eval("silu", 1.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert activation_eval("silu", 1.0) == pytest.approx(0.731059, abs=1e-6)
    assert activation_eval("gelu", 1.0) == pytest.approx(1 / (1 + math.exp(-1.702)), abs=1e-15)
    assert activation_eval("mish", 1.0) == pytest.approx(math.tanh(math.log1p(math.e)), abs=1e-15)


def test_shape_errors():
    with pytest.raises(ShapeError):
        NetworkSpec((LayerSpec("dense", 3, 4), LayerSpec("dense", 5, 2)))
    spec, params = small_net()
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros((2, 5)))


def test_non_finite_logits_raise():
    spec, params = small_net()
    params[(0, "weight")][0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        forward(spec, params, np.ones((2, 4)))


def test_batchnorm_train_updates_running_stats_eval_does_not():
    spec, params = small_net(batchnorm="hidden")
    x, _ = batch(0)
    before = params.copy()
    forward(spec, params, x, mode="eval")
    for k in params.keys():
        np.testing.assert_array_equal(params[k], before[k])
    forward(spec, params, x, mode="train", update_stats=True)
    assert not np.array_equal(params[(1, "bn_running_mean")], before[(1, "bn_running_mean")])


@settings(max_examples=30, deadline=None)
@given(s=st.floats(0.05, 20.0), seed=st.integers(0, 1000))
def test_batchnorm_cancels_layer_scale_in_train_mode(s, seed):
    spec, params = small_net(seed=seed % 7, batchnorm="hidden")
    x, _ = batch(seed)
    base = forward(spec, params, x, mode="train")
    scaled = params.copy()
    scaled[(0, "weight")] = s * params[(0, "weight")]
    scaled[(0, "bias")] = s * params[(0, "bias")]
    scaled[(1, "bn_eps")] = s * s * params[(1, "bn_eps")]
    np.testing.assert_allclose(forward(spec, scaled, x, mode="train"), base, atol=1e-10)


def test_determinism():
    spec, params = small_net(batchnorm="all")
    x, y = batch(0)
    a = loss_and_grads(spec, params, x, y, mode="train", want_inputs=True)
    b = loss_and_grads(spec, params, x, y, mode="train", want_inputs=True)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[3], b[3])
    for k in params.keys():
        np.testing.assert_array_equal(a[2][k], b[2][k])


def test_param_vector_partition_and_flat_roundtrip():
    spec, params = small_net(batchnorm="all")
    flat = params.flat_geometric()
    assert flat.size == params.num_geometric()
    back = params.with_flat_geometric(flat)
    for k in params.geometric_keys():
        np.testing.assert_array_equal(back[k], params[k])
    for k in params.keys():
        if k not in params.geometric_keys():
            assert np.all(back[k] == 0)
    assert all(params[k].min() > 0 for k in params.keys() if k[1] == "bn_running_var")
    with pytest.raises(ShapeError):
        params.check_partition(ParamVector({(0, "weight"): params[(0, "weight")]}))


def test_spec_roundtrip_dict():
    spec = mlp(4, [3], 2, batchnorm="hidden").with_whitening([0.5] * 4, [0.2] * 4)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert NetworkSpec.from_dict(spec.to_dict()).digest() == spec.digest()
