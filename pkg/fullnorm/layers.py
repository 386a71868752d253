"""Layers with hand-derived forward and backward passes.

A `Network` is an ordered list of `LayerSpec` ending with the negative
log-likelihood head. Batch normalization (BN) normalizes with the current
batch statistics while training and with its running averages at inference.
Full normalization (FN) always normalizes with its running estimates of the
whole-dataset mean and mean of squares, updating them first while training.
"""

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

import copy
import enum
from typing import Any

import attrs
import numpy as np
import numpy.typing as npt

from . import exceptions, models, tensor_core
from .norm_operators import AffineAug
from .tensor_core import Tensor

Labels = npt.NDArray[np.int64]

DEFAULT_EPS = 1e-5
DEFAULT_BN_ALPHA = 0.1


class LayerKind(str, enum.Enum):
    linear = "linear"
    relu = "relu"
    bn = "bn"
    fn = "fn"
    nll = "nll"


class Mode(str, enum.Enum):
    train = "train"
    infer = "infer"


NORM_KINDS = (LayerKind.bn, LayerKind.fn)


@attrs.define
class NormState:
    """Running statistics of a normalization layer.

    For BN `nu` is a running variance, for FN a running mean of squares.
    """

    mu: Tensor = attrs.field(converter=tensor_core.as_tensor)
    nu: Tensor = attrs.field(converter=tensor_core.as_tensor)
    alpha: float = DEFAULT_BN_ALPHA
    eps: float = DEFAULT_EPS

    def __attrs_post_init__(self) -> None:
        if self.mu.ndim != 1 or self.mu.shape != self.nu.shape:
            raise exceptions.ContractViolation(
                detail=f"mu {self.mu.shape} and nu {self.nu.shape} must be equal vectors"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise exceptions.ContractViolation(
                detail=f"averaging constant must lie in [0, 1], got {self.alpha}"
            )
        if self.eps < 0.0:
            raise exceptions.ContractViolation(
                detail=f"stability constant must be >= 0, got {self.eps}"
            )

    @classmethod
    def initial(
        cls, d: int, alpha: float = DEFAULT_BN_ALPHA, eps: float = DEFAULT_EPS
    ) -> "NormState":
        return cls(mu=np.zeros(d), nu=np.ones(d), alpha=alpha, eps=eps)

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    @property
    def populated(self) -> bool:
        return bool(np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.nu)))


@attrs.define
class LayerSpec:
    kind: LayerKind
    weights: AffineAug | None = None
    norm: NormState | None = None

    def __attrs_post_init__(self) -> None:
        if (self.kind is LayerKind.linear) != (self.weights is not None):
            raise exceptions.ContractViolation(
                detail=f"{self.kind.value} layer: weights only belong to linear layers"
            )
        if (self.kind in NORM_KINDS) != (self.norm is not None):
            raise exceptions.ContractViolation(
                detail=f"{self.kind.value} layer: norm state only belongs to bn/fn layers"
            )

    @classmethod
    def linear(cls, W: Any) -> "LayerSpec":
        return cls(kind=LayerKind.linear, weights=AffineAug(W=W))

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind=LayerKind.relu)

    @classmethod
    def bn(
        cls, d: int, alpha: float = DEFAULT_BN_ALPHA, eps: float = DEFAULT_EPS
    ) -> "LayerSpec":
        return cls(kind=LayerKind.bn, norm=NormState.initial(d, alpha=alpha, eps=eps))

    @classmethod
    def fn(cls, d: int, alpha: float = 1.0, eps: float = DEFAULT_EPS) -> "LayerSpec":
        return cls(kind=LayerKind.fn, norm=NormState.initial(d, alpha=alpha, eps=eps))

    @classmethod
    def nll(cls) -> "LayerSpec":
        return cls(kind=LayerKind.nll)


@attrs.define(frozen=True)
class LinearCache:
    x: Tensor


@attrs.define(frozen=True)
class ReluCache:
    x: Tensor


@attrs.define(frozen=True)
class BNCache:
    y: Tensor
    inv_std: Tensor
    training: bool


@attrs.define(frozen=True)
class FNCache:
    x: Tensor
    mu: Tensor
    nu: Tensor
    alpha: float
    eps: float
    training: bool


@attrs.define(frozen=True)
class NLLCache:
    grad_logits: Tensor


Cache = LinearCache | ReluCache | BNCache | FNCache | NLLCache


def require_batch(x: Tensor) -> Tensor:
    x = tensor_core.as_matrix(x)
    if x.shape[0] == 0:
        raise exceptions.EmptyBatch(detail="forward pass on an empty batch")
    return x


def check_norm_dim(norm: NormState, x: Tensor) -> None:
    if x.shape[1] != norm.dim:
        raise exceptions.ContractViolation(
            detail=f"input has {x.shape[1]} features, normalization expects {norm.dim}"
        )


def linear_apply(spec: LayerSpec, x: Tensor) -> tuple[Tensor, LinearCache]:
    if spec.weights is None:
        raise exceptions.ContractViolation(detail="linear_apply on a non-linear layer")
    x = tensor_core.as_matrix(x)
    return spec.weights.affine(x), LinearCache(x=x)


def linear_backward(
    spec: LayerSpec, cache: LinearCache, grad_out: Tensor
) -> tuple[Tensor, Tensor]:
    """Return the input gradient and the weight gradient (bias as last column).

    `grad_out` already carries the 1/b of the batch-mean loss, so the weight
    gradient sums over the rows.
    """
    if spec.weights is None:
        raise exceptions.ContractViolation(detail="linear_backward on a non-linear layer")
    W = spec.weights.W
    if grad_out.shape != (cache.x.shape[0], W.shape[0]):
        raise exceptions.ContractViolation(
            detail=f"gradient shape {grad_out.shape} does not match layer output"
        )
    grad_in = grad_out @ W[:, :-1]
    grad_W = np.empty_like(W)
    grad_W[:, :-1] = grad_out.T @ cache.x
    grad_W[:, -1] = grad_out.sum(axis=0)
    return grad_in, grad_W


def relu_apply(x: Tensor) -> tuple[Tensor, ReluCache]:
    x = tensor_core.as_tensor(x)
    return np.maximum(x, 0.0), ReluCache(x=x)


def relu_backward(cache: ReluCache, grad_out: Tensor) -> Tensor:
    # subgradient 0 at 0
    return np.where(cache.x > 0.0, grad_out, 0.0)


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def nll_loss(logits: Tensor, labels: Labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood of a log-softmax and its gradient.

    Parameters
    ----------
    logits : Tensor
        Scores of shape (b, c).
    labels : Labels
        Class ids in [0, c).

    Returns
    -------
    tuple[float, Tensor]
        Loss and gradient ``(softmax - onehot) / b``.
    """
    logits = require_batch(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise exceptions.ContractViolation(
            detail=f"{labels.shape[0]} labels for a batch of {b}"
        )
    if np.any(labels < 0) or np.any(labels >= c):
        raise exceptions.ContractViolation(
            detail=f"labels must lie in [0, {c}), got {labels.min()}..{labels.max()}"
        )
    log_probs = log_softmax(logits)
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / b


def error_rate(logits: Tensor, labels: Labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != labels))


def bn_train_forward(norm: NormState, b_in: Tensor) -> tuple[Tensor, BNCache]:
    """Normalize by batch statistics and update the running mean and variance."""
    b_in = require_batch(b_in)
    check_norm_dim(norm, b_in)
    mean, var = tensor_core.column_stats(b_in)
    norm.mu = (1.0 - norm.alpha) * norm.mu + norm.alpha * mean
    norm.nu = (1.0 - norm.alpha) * norm.nu + norm.alpha * var
    inv_std = 1.0 / np.sqrt(var + norm.eps)
    y = (b_in - mean) * inv_std
    return y, BNCache(y=y, inv_std=inv_std, training=True)


def bn_infer(norm: NormState, b_in: Tensor) -> Tensor:
    b_in = tensor_core.as_matrix(b_in)
    check_norm_dim(norm, b_in)
    return (b_in - norm.mu) / np.sqrt(norm.nu + norm.eps)


def bn_infer_forward(norm: NormState, b_in: Tensor) -> tuple[Tensor, BNCache]:
    y = bn_infer(norm, b_in)
    inv_std = 1.0 / np.sqrt(norm.nu + norm.eps)
    return y, BNCache(y=y, inv_std=inv_std, training=False)


def bn_backward(cache: BNCache | None, grad_out: Tensor) -> Tensor:
    """Backpropagate through the batch mean and variance of a BN layer.

    Running-average updates contribute no gradient.
    """
    if cache is None:
        raise exceptions.MissingCache(detail="bn_backward called before forward")
    if not cache.training:
        return grad_out * cache.inv_std
    b = grad_out.shape[0]
    return (cache.inv_std / b) * (
        b * grad_out
        - grad_out.sum(axis=0)
        - cache.y * (grad_out * cache.y).sum(axis=0)
    )


def fn_forward(
    norm: NormState, b_in: Tensor, training: bool
) -> tuple[Tensor, FNCache]:
    """Full normalization forward pass.

    While training, the running mean and mean of squares are updated first and
    the batch is normalized with the updated estimates, never with the batch
    statistics.
    """
    b_in = require_batch(b_in)
    check_norm_dim(norm, b_in)
    if training:
        norm.mu = (1.0 - norm.alpha) * norm.mu + norm.alpha * b_in.mean(axis=0)
        norm.nu = (1.0 - norm.alpha) * norm.nu + norm.alpha * np.square(b_in).mean(
            axis=0
        )
    std = np.sqrt(np.maximum(norm.nu - np.square(norm.mu), norm.eps))
    cache = FNCache(
        x=b_in,
        mu=norm.mu.copy(),
        nu=norm.nu.copy(),
        alpha=norm.alpha,
        eps=norm.eps,
        training=training,
    )
    return (b_in - norm.mu) / std, cache


def fn_partials(cache: FNCache) -> tuple[Tensor, Tensor, Tensor]:
    """Partial derivatives of ``(x - mu) / sqrt(max(nu - mu^2, eps))``.

    Returns the derivatives with respect to the input, mu and nu, evaluated
    element-wise at the cached values. On the clamped branch the derivative
    with respect to nu is 0.
    """
    variance = cache.nu - np.square(cache.mu)
    clamped = variance <= cache.eps
    std = np.sqrt(np.where(clamped, cache.eps, variance))
    centered = cache.x - cache.mu
    d_x = np.broadcast_to(1.0 / std, cache.x.shape)
    d_mu = np.where(clamped, -1.0 / std, -1.0 / std + centered * cache.mu / std**3)
    d_nu = np.where(clamped, 0.0, -0.5 * centered / std**3)
    return d_x, d_mu, d_nu


def fn_backward(
    cache: FNCache | None,
    grad_out: Tensor,
    mode: models.BackwardMode = models.BackwardMode.exact,
) -> Tensor:
    """Gradient at the input of a full normalization layer.

    ``elementwise`` applies ``g * (df/dx + (df/dmu + 2 x df/dnu) / (b d))`` element by
    element. ``exact`` is the derivative of the training forward with the
    previous state held fixed: the statistic path is summed per feature,
    divided by b and scaled by alpha (0 at inference). ``oracle`` uses the
    same per-feature path with coefficient 1, i.e. the stored estimates stand
    in for the dataset statistics while the batch estimates their derivative.
    """
    if cache is None:
        raise exceptions.MissingCache(detail="fn_backward called before forward")
    if grad_out.shape != cache.x.shape:
        raise exceptions.ContractViolation(
            detail=f"gradient shape {grad_out.shape} does not match {cache.x.shape}"
        )
    b, d = cache.x.shape
    d_x, d_mu, d_nu = fn_partials(cache)
    if mode is models.BackwardMode.elementwise:
        return grad_out * (d_x + (d_mu + 2.0 * cache.x * d_nu) / (b * d))
    if mode is models.BackwardMode.exact:
        coefficient = cache.alpha if cache.training else 0.0
    else:
        coefficient = 1.0
    through_mu = (grad_out * d_mu).sum(axis=0)
    through_nu = (grad_out * d_nu).sum(axis=0)
    statistic_path = (coefficient / b) * (through_mu + 2.0 * cache.x * through_nu)
    return grad_out * d_x + statistic_path


@attrs.define
class Network:
    layers: list[LayerSpec]
    mode: Mode = Mode.train

    def __attrs_post_init__(self) -> None:
        if not self.layers or self.layers[-1].kind is not LayerKind.nll:
            raise exceptions.ContractViolation(
                detail="a network must end with an nll layer"
            )
        for position, layer in enumerate(self.layers[:-1]):
            if layer.kind is LayerKind.nll:
                raise exceptions.ContractViolation(
                    detail=f"nll layer at position {position} is not the last one"
                )
        self.check_chain()

    def check_chain(self) -> None:
        width: int | None = None
        for position, layer in enumerate(self.layers):
            if layer.weights is not None:
                if width is not None and layer.weights.in_features != width:
                    raise exceptions.ContractViolation(
                        detail=(
                            f"linear layer {position} expects "
                            f"{layer.weights.in_features} features, gets {width}"
                        )
                    )
                width = layer.weights.out_features
            elif layer.norm is not None:
                if width is not None and layer.norm.dim != width:
                    raise exceptions.ContractViolation(
                        detail=(
                            f"{layer.kind.value} layer {position} expects "
                            f"{layer.norm.dim} features, gets {width}"
                        )
                    )
                width = layer.norm.dim

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if layer.weights is not None:
                return layer.weights.in_features
            if layer.norm is not None:
                return layer.norm.dim
        raise exceptions.ContractViolation(detail="network has no sized layer")

    @property
    def linear_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind is LayerKind.linear]

    @property
    def norm_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind in NORM_KINDS]

    def clone(self) -> "Network":
        return copy.deepcopy(self)


@attrs.define(frozen=True)
class ForwardResult:
    loss: float
    logits: Tensor
    caches: list[Cache]


def net_forward(net: Network, b_in: Tensor, labels: Labels) -> ForwardResult:
    """Compose the layers left to right and evaluate the loss.

    In train mode normalization states are updated; in infer mode the network
    is left untouched.
    """
    x = require_batch(b_in)
    training = net.mode is Mode.train
    caches: list[Cache] = []
    loss = 0.0
    logits = x
    for layer in net.layers:
        cache: Cache
        if layer.kind is LayerKind.linear:
            x, cache = linear_apply(layer, x)
        elif layer.kind is LayerKind.relu:
            x, cache = relu_apply(x)
        elif layer.kind is LayerKind.bn:
            assert layer.norm is not None
            if training:
                x, cache = bn_train_forward(layer.norm, x)
            else:
                x, cache = bn_infer_forward(layer.norm, x)
        elif layer.kind is LayerKind.fn:
            assert layer.norm is not None
            x, cache = fn_forward(layer.norm, x, training=training)
        else:
            logits = x
            loss, grad_logits = nll_loss(x, labels)
            cache = NLLCache(grad_logits=grad_logits)
        caches.append(cache)
    return ForwardResult(loss=loss, logits=logits, caches=caches)


def net_backward(
    net: Network,
    forward: ForwardResult,
    mode: models.BackwardMode = models.BackwardMode.exact,
    loss_scale: float = 1.0,
) -> list[Tensor]:
    """Reverse composition of the layer backward passes.

    Returns
    -------
    list[Tensor]
        Gradient of the batch-mean loss with respect to each linear layer's
        weights, in layer order.
    """
    caches = forward.caches
    if len(caches) != len(net.layers):
        raise exceptions.MissingCache(
            detail=f"{len(caches)} caches for {len(net.layers)} layers"
        )
    grads: list[Tensor] = []
    grad = np.zeros(0)
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        if isinstance(cache, NLLCache) and layer.kind is LayerKind.nll:
            grad = loss_scale * cache.grad_logits
        elif isinstance(cache, LinearCache) and layer.kind is LayerKind.linear:
            grad, grad_W = linear_backward(layer, cache, grad)
            grads.append(grad_W)
        elif isinstance(cache, ReluCache) and layer.kind is LayerKind.relu:
            grad = relu_backward(cache, grad)
        elif isinstance(cache, BNCache) and layer.kind is LayerKind.bn:
            grad = bn_backward(cache, grad)
        elif isinstance(cache, FNCache) and layer.kind is LayerKind.fn:
            grad = fn_backward(cache, grad, mode=mode)
        else:
            raise exceptions.MissingCache(
                detail=f"cache {type(cache).__name__} does not match a {layer.kind.value} layer"
            )
    grads.reverse()
    return grads


def init_linear(stream: tensor_core.RngStream, n_in: int, n_out: int) -> Tensor:
    """Uniform weights and bias on +-sqrt(1 / fan_in)."""
    bound = float(np.sqrt(1.0 / n_in))
    return tensor_core.rng_uniform(stream, -bound, bound, (n_out, n_in + 1))


def norm_layer(
    kind: models.NormKind, d: int, bn_alpha: float, eps: float
) -> LayerSpec:
    if kind is models.NormKind.bn:
        return LayerSpec.bn(d, alpha=bn_alpha, eps=eps)
    return LayerSpec.fn(d, alpha=1.0, eps=eps)


def build_network(
    input_dim: int,
    widths: list[int],
    n_classes: int,
    norm: models.NormKind,
    stream: tensor_core.RngStream,
    bn_alpha: float = DEFAULT_BN_ALPHA,
    eps: float = DEFAULT_EPS,
    input_norm: bool = False,
) -> Network:
    """Build ``[norm] -> (linear -> norm -> relu)* -> linear -> nll``.

    Normalization layers are only inserted when `norm` is not ``none``.
    """
    layers: list[LayerSpec] = []
    if input_norm and norm is not models.NormKind.none:
        layers.append(norm_layer(norm, input_dim, bn_alpha, eps))
    width = input_dim
    for position, hidden in enumerate(widths):
        layers.append(
            LayerSpec.linear(init_linear(stream.derive(f"linear{position}"), width, hidden))
        )
        if norm is not models.NormKind.none:
            layers.append(norm_layer(norm, hidden, bn_alpha, eps))
        layers.append(LayerSpec.relu())
        width = hidden
    layers.append(
        LayerSpec.linear(
            init_linear(stream.derive(f"linear{len(widths)}"), width, n_classes)
        )
    )
    layers.append(LayerSpec.nll())
    return Network(layers=layers)
