# Copyright 2024, fullnorm contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

# mypy: ignore-errors

import math

import numpy as np
import pytest

from fullnorm import exceptions, layers, models, tensor_core


def test_linear() -> None:
    spec = layers.LayerSpec.linear([[1.0, 2.0, 3.0]])
    y, cache = layers.linear_apply(spec, [[1.0, 1.0]])
    np.testing.assert_array_equal(y, [[6.0]])

    spec = layers.LayerSpec.linear(np.hstack([np.eye(2), np.zeros((2, 1))]))
    x = np.array([[1.0, -2.0], [0.5, 4.0]])
    y, cache = layers.linear_apply(spec, x)
    np.testing.assert_array_equal(y, x)

    grad_in, grad_W = layers.linear_backward(spec, cache, np.zeros((2, 2)))
    assert not grad_in.any() and not grad_W.any()

    with pytest.raises(exceptions.ContractViolation):
        layers.LayerSpec(kind=layers.LayerKind.relu, weights=spec.weights)


def test_relu() -> None:
    y, cache = layers.relu_apply(np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])
    grad = layers.relu_backward(cache, np.ones((1, 3)))
    np.testing.assert_array_equal(grad, [[0.0, 0.0, 1.0]])

    x = np.array([[0.5, 3.0]])
    np.testing.assert_array_equal(layers.relu_apply(x)[0], x)


def test_nll_loss() -> None:
    loss, grad = layers.nll_loss(np.zeros((1, 3)), np.array([2]))
    assert loss == pytest.approx(math.log(3.0))
    np.testing.assert_allclose(grad, [[1 / 3, 1 / 3, -2 / 3]])

    loss, _ = layers.nll_loss(np.array([[10.0, 0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log1p(2.0 * math.exp(-10.0)), rel=1e-9)
    assert loss == pytest.approx(9.08e-5, rel=1e-3)

    with pytest.raises(exceptions.ContractViolation):
        layers.nll_loss(np.zeros((1, 3)), np.array([3]))

    with pytest.raises(exceptions.EmptyBatch):
        layers.nll_loss(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


def test_bn_train_forward() -> None:
    norm = layers.NormState.initial(1, alpha=0.1, eps=0.0)
    y, cache = layers.bn_train_forward(norm, np.array([[1.0], [3.0]]))
    np.testing.assert_allclose(y, [[-1.0], [1.0]])
    np.testing.assert_allclose(norm.mu, [0.2])
    np.testing.assert_allclose(norm.nu, [1.0])
    assert cache.training

    norm = layers.NormState.initial(3)
    y, _ = layers.bn_train_forward(norm, np.array([[5.0, -1.0, 2.0]]))
    np.testing.assert_array_equal(y, np.zeros((1, 3)))

    norm = layers.NormState.initial(2)
    y, _ = layers.bn_train_forward(norm, np.full((4, 2), 7.0))
    np.testing.assert_array_equal(y, np.zeros((4, 2)))

    with pytest.raises(exceptions.ContractViolation):
        layers.bn_train_forward(norm, np.ones((2, 3)))


def test_bn_train_forward_standardizes(stream: tensor_core.RngStream) -> None:
    scale = np.array([1.0, 0.1, 40.0])
    x = scale * tensor_core.rng_normal(stream.derive("x"), (16, 3)) + np.array([3.0, -7.0, 0.5])
    assert np.all(x.var(axis=0) >= 1e-3)

    norm = layers.NormState.initial(3, eps=0.0)
    y, _ = layers.bn_train_forward(norm, x)
    assert np.max(np.abs(y.mean(axis=0))) <= 1e-10
    np.testing.assert_allclose(y.var(axis=0), np.ones(3), atol=1e-8)


def test_bn_infer() -> None:
    norm = layers.NormState(mu=[2.0], nu=[1.0], eps=0.0)
    assert layers.bn_infer(norm, [[2.0]]).tolist() == [[0.0]]

    norm = layers.NormState(mu=[1.0], nu=[4.0], eps=0.0)
    first = layers.bn_infer(norm, [[3.0]])
    second = layers.bn_infer(norm, [[3.0]])
    np.testing.assert_array_equal(first, [[1.0]])
    np.testing.assert_array_equal(second, first)
    np.testing.assert_array_equal(norm.mu, [1.0])
    np.testing.assert_array_equal(norm.nu, [4.0])


def test_bn_backward() -> None:
    norm = layers.NormState.initial(1, eps=0.0)
    _, cache = layers.bn_train_forward(norm, np.array([[1.0], [3.0]]))
    for grad_out in ([[1.0], [0.0]], [[0.3], [-2.0]]):
        grad_in = layers.bn_backward(cache, np.array(grad_out))
        np.testing.assert_allclose(grad_in, [[0.0], [0.0]], atol=1e-12)

    norm = layers.NormState.initial(1, eps=0.0)
    _, cache = layers.bn_train_forward(norm, np.array([[0.0], [1.0], [2.0]]))
    grad_in = layers.bn_backward(cache, np.array([[1.0], [0.0], [0.0]]))
    np.testing.assert_allclose(grad_in, [[0.2041], [-0.4082], [0.2041]], atol=1e-4)

    assert not layers.bn_backward(cache, np.zeros((3, 1))).any()

    norm = layers.NormState(mu=[1.0], nu=[4.0], eps=0.0)
    _, cache = layers.bn_infer_forward(norm, np.array([[3.0], [5.0]]))
    np.testing.assert_allclose(layers.bn_backward(cache, np.ones((2, 1))), [[0.5], [0.5]])

    with pytest.raises(exceptions.MissingCache):
        layers.bn_backward(None, np.ones((2, 1)))


def test_fn_forward() -> None:
    norm = layers.NormState(mu=[-4.0], nu=[30.0], alpha=1.0)
    y, _ = layers.fn_forward(norm, np.array([[1.0], [3.0]]), training=True)
    np.testing.assert_allclose(norm.mu, [2.0])
    np.testing.assert_allclose(norm.nu, [5.0])
    np.testing.assert_allclose(y, [[-1.0], [1.0]])

    norm = layers.NormState(mu=[1.0], nu=[5.0], alpha=0.0)
    y, _ = layers.fn_forward(norm, np.array([[3.0], [-1.0]]), training=True)
    np.testing.assert_array_equal(norm.mu, [1.0])
    np.testing.assert_array_equal(norm.nu, [5.0])
    np.testing.assert_allclose(y, [[1.0], [-1.0]])

    norm = layers.NormState(mu=[0.0], nu=[1.0], alpha=1.0, eps=1e-4)
    y, _ = layers.fn_forward(norm, np.array([[1.0], [1.0]]), training=True)
    np.testing.assert_allclose(norm.mu, [1.0])
    np.testing.assert_allclose(norm.nu, [1.0])
    np.testing.assert_allclose(y, [[0.0], [0.0]])

    norm = layers.NormState(mu=[1.0], nu=[2.0], alpha=0.5)
    y, _ = layers.fn_forward(norm, np.array([[3.0]]), training=False)
    np.testing.assert_array_equal(norm.mu, [1.0])
    np.testing.assert_allclose(y, [[2.0]])


def test_fn_backward() -> None:
    cache = layers.FNCache(
        x=np.array([[2.0]]),
        mu=np.array([1.0]),
        nu=np.array([2.0]),
        alpha=0.5,
        eps=1e-5,
        training=True,
    )
    grad_in = layers.fn_backward(cache, np.array([[1.0]]), mode=models.BackwardMode.elementwise)
    np.testing.assert_allclose(grad_in, [[-1.0]])

    clamped = layers.FNCache(
        x=np.array([[1.5]]),
        mu=np.array([1.0]),
        nu=np.array([1.0]),
        alpha=0.5,
        eps=1e-5,
        training=True,
    )
    _, d_mu, d_nu = layers.fn_partials(clamped)
    np.testing.assert_array_equal(d_nu, [[0.0]])
    np.testing.assert_allclose(d_mu, [[-1.0 / math.sqrt(1e-5)]])
    grad_in = layers.fn_backward(clamped, np.array([[2.0]]), mode=models.BackwardMode.elementwise)
    np.testing.assert_allclose(grad_in, [[0.0]], atol=1e-9)

    for mode in models.BackwardMode:
        assert not layers.fn_backward(cache, np.zeros((1, 1)), mode=mode).any()

    # at inference the exact derivative ignores the statistics path
    frozen = layers.FNCache(
        x=np.array([[2.0], [0.0]]),
        mu=np.array([1.0]),
        nu=np.array([5.0]),
        alpha=0.5,
        eps=1e-5,
        training=False,
    )
    grad_in = layers.fn_backward(frozen, np.ones((2, 1)), mode=models.BackwardMode.exact)
    np.testing.assert_allclose(grad_in, [[0.5], [0.5]])

    with pytest.raises(exceptions.MissingCache):
        layers.fn_backward(None, np.ones((1, 1)))

    with pytest.raises(exceptions.ContractViolation):
        layers.fn_backward(cache, np.ones((2, 1)))


def finite_difference_input(norm: layers.NormState, x: np.ndarray, upstream: np.ndarray):
    step = 1e-6
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        values = []
        for sign in (1.0, -1.0):
            shifted = x.copy()
            shifted[index] += sign * step
            state = layers.NormState(mu=norm.mu, nu=norm.nu, alpha=norm.alpha, eps=norm.eps)
            y, _ = layers.fn_forward(state, shifted, training=True)
            values.append(float(np.sum(y * upstream)))
        grad[index] = (values[0] - values[1]) / (2.0 * step)
    return grad


def test_fn_backward_exact_matches_finite_differences(stream: tensor_core.RngStream) -> None:
    x = tensor_core.rng_normal(stream.derive("x"), (4, 3))
    upstream = tensor_core.rng_normal(stream.derive("g"), (4, 3))
    norm = layers.NormState(mu=[0.1, -0.3, 0.2], nu=[1.5, 2.0, 0.8], alpha=0.3)

    state = layers.NormState(mu=norm.mu, nu=norm.nu, alpha=norm.alpha, eps=norm.eps)
    _, cache = layers.fn_forward(state, x, training=True)
    res = layers.fn_backward(cache, upstream, mode=models.BackwardMode.exact)
    exp = finite_difference_input(norm, x, upstream)
    np.testing.assert_allclose(res, exp, rtol=1e-6, atol=1e-8)

    oracle = layers.fn_backward(
        layers.FNCache(
            x=cache.x, mu=cache.mu, nu=cache.nu, alpha=1.0, eps=cache.eps, training=True
        ),
        upstream,
        mode=models.BackwardMode.exact,
    )
    np.testing.assert_allclose(
        layers.fn_backward(cache, upstream, mode=models.BackwardMode.oracle), oracle
    )


def test_network_validation() -> None:
    with pytest.raises(exceptions.ContractViolation):
        layers.Network(layers=[layers.LayerSpec.linear(np.zeros((3, 4)))])

    with pytest.raises(exceptions.ContractViolation):
        layers.Network(
            layers=[
                layers.LayerSpec.nll(),
                layers.LayerSpec.linear(np.zeros((3, 4))),
                layers.LayerSpec.nll(),
            ]
        )

    with pytest.raises(exceptions.ContractViolation):
        layers.Network(
            layers=[
                layers.LayerSpec.linear(np.zeros((2, 4))),
                layers.LayerSpec.bn(3),
                layers.LayerSpec.nll(),
            ]
        )


def test_net_forward(zero_linear: layers.Network, toy3) -> None:
    forward = layers.net_forward(zero_linear, toy3.features, toy3.labels)
    assert forward.loss == pytest.approx(math.log(3.0))
    assert len(forward.caches) == 2

    net = layers.build_network(
        3, [3], 3, models.NormKind.bn, tensor_core.RngStream(seed=3), input_norm=True
    )
    layers.net_forward(net, toy3.features, toy3.labels)
    net.mode = layers.Mode.infer
    states = [(layer.norm.mu.copy(), layer.norm.nu.copy()) for layer in net.norm_layers]
    first = layers.net_forward(net, toy3.features, toy3.labels).loss
    second = layers.net_forward(net, toy3.features, toy3.labels).loss
    assert first == second
    for layer, (mu, nu) in zip(net.norm_layers, states):
        np.testing.assert_array_equal(layer.norm.mu, mu)
        np.testing.assert_array_equal(layer.norm.nu, nu)

    net = layers.build_network(
        3, [3], 3, models.NormKind.fn, tensor_core.RngStream(seed=3), input_norm=True
    )
    layers.net_forward(net, toy3.features, toy3.labels)
    first_norm = net.norm_layers[0].norm
    np.testing.assert_allclose(first_norm.mu, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(first_norm.nu, [5.0 / 3.0] * 3)


def test_net_backward() -> None:
    W = np.array([[0.2, -0.1, 0.05], [0.0, 0.3, -0.2]])
    net = layers.Network(layers=[layers.LayerSpec.linear(W), layers.LayerSpec.nll()])
    x = np.array([[1.5, -0.5]])
    forward = layers.net_forward(net, x, np.array([1]))
    (res,) = layers.net_backward(net, forward)

    logits = W[:, :-1] @ x[0] + W[:, -1]
    probs = np.exp(logits) / np.exp(logits).sum()
    exp = np.outer(probs - np.array([0.0, 1.0]), np.append(x[0], 1.0))
    np.testing.assert_allclose(res, exp, atol=1e-10)

    confident = layers.Network(
        layers=[layers.LayerSpec.linear([[60.0, 0.0], [-60.0, 0.0]]), layers.LayerSpec.nll()]
    )
    forward = layers.net_forward(confident, np.array([[1.0]]), np.array([0]))
    (res,) = layers.net_backward(confident, forward)
    assert np.abs(res).max() < 1e-12

    with pytest.raises(exceptions.MissingCache):
        layers.net_backward(
            net, layers.ForwardResult(loss=0.0, logits=np.zeros((1, 2)), caches=[])
        )


def test_build_network() -> None:
    net = layers.build_network(
        4, [5, 6], 3, models.NormKind.fn, tensor_core.RngStream(seed=0), input_norm=True
    )
    res_kinds = [layer.kind.value for layer in net.layers]
    exp_kinds = ["fn", "linear", "fn", "relu", "linear", "fn", "relu", "linear", "nll"]
    assert res_kinds == exp_kinds
    assert net.input_dim == 4
    assert [layer.weights.W.shape for layer in net.linear_layers] == [(5, 5), (6, 6), (3, 7)]

    plain = layers.build_network(4, [5], 3, models.NormKind.none, tensor_core.RngStream(seed=0))
    assert [layer.kind.value for layer in plain.layers] == ["linear", "relu", "linear", "nll"]

    again = layers.build_network(4, [5], 3, models.NormKind.none, tensor_core.RngStream(seed=0))
    for left, right in zip(plain.linear_layers, again.linear_layers):
        np.testing.assert_array_equal(left.weights.W, right.weights.W)
    bound = np.sqrt(1.0 / 4)
    assert np.abs(plain.linear_layers[0].weights.W).max() <= bound

    clone = plain.clone()
    clone.linear_layers[0].weights.W[0, 0] += 1.0
    assert clone.linear_layers[0].weights.W[0, 0] != plain.linear_layers[0].weights.W[0, 0]
