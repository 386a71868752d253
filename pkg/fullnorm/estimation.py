"""Full-dataset oracles: exact statistics, exact gradients and objective values.

Every expectation over the finite dataset is computed as an exact average.
The oracles work on private copies and never modify the network they are
given.
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

import csv
import enum
import pathlib

import attrs
import numpy as np
import structlog

from . import data, exceptions, layers, models, norm_operators
from .tensor_core import Tensor

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

ERRORS_HEADER = ("k", "layer_index", "sq_error", "grad_norm_sq")
MIN_FIT_POINTS = 10


class ObjectiveMode(str, enum.Enum):
    plain = "plain"
    bn = "bn"
    fn = "fn"


@attrs.define(frozen=True)
class ExactStats:
    """Mean and mean of squares of the input of each normalization layer."""

    means: list[Tensor]
    mean_squares: list[Tensor]

    def __attrs_post_init__(self) -> None:
        if len(self.means) != len(self.mean_squares):
            raise exceptions.ContractViolation(
                detail=f"{len(self.means)} means for {len(self.mean_squares)} layers"
            )

    def __len__(self) -> int:
        return len(self.means)

    def variances(self) -> list[Tensor]:
        return [
            np.maximum(sq - np.square(mean), 0.0)
            for mean, sq in zip(self.means, self.mean_squares)
        ]


@attrs.define(frozen=True)
class StaticForward:
    loss: float
    logits: Tensor
    stats: ExactStats


def effective_variance(layer: layers.LayerSpec, mean: Tensor, mean_sq: Tensor) -> Tensor:
    """Squared denominator the layer applies for the given statistics."""
    assert layer.norm is not None
    if layer.kind is layers.LayerKind.bn:
        return np.maximum(mean_sq - np.square(mean), 0.0) + layer.norm.eps
    return np.maximum(mean_sq - np.square(mean), layer.norm.eps)


def static_forward(
    net: layers.Network, x: Tensor, labels: layers.Labels, normalize: bool = True
) -> StaticForward:
    """Forward `x` normalizing every layer by the statistics of its own input.

    With ``normalize=False`` normalization layers are skipped. No state is
    read or written.
    """
    x = layers.require_batch(x)
    means: list[Tensor] = []
    mean_squares: list[Tensor] = []
    loss = 0.0
    logits = x
    for layer in net.layers:
        if layer.kind is layers.LayerKind.linear:
            x, _ = layers.linear_apply(layer, x)
        elif layer.kind is layers.LayerKind.relu:
            x = np.maximum(x, 0.0)
        elif layer.kind in layers.NORM_KINDS:
            if not normalize:
                continue
            mean = x.mean(axis=0)
            mean_sq = np.square(x).mean(axis=0)
            means.append(mean)
            mean_squares.append(mean_sq)
            x = (x - mean) / np.sqrt(effective_variance(layer, mean, mean_sq))
        else:
            logits = x
            loss, _ = layers.nll_loss(x, labels)
    return StaticForward(
        loss=loss, logits=logits, stats=ExactStats(means=means, mean_squares=mean_squares)
    )


def full_dataset_stats(net: layers.Network, ds: data.Dataset) -> ExactStats:
    """Exact statistics of every normalization layer over the whole dataset.

    Each layer's input is computed with the exact statistics of the layers
    below it.
    """
    return static_forward(net, ds.features, ds.labels).stats


def estimates_of(net: layers.Network) -> ExactStats:
    """Running estimates as (mean, mean of squares); BN variances are converted."""
    means: list[Tensor] = []
    mean_squares: list[Tensor] = []
    for layer in net.norm_layers:
        assert layer.norm is not None
        means.append(layer.norm.mu.copy())
        if layer.kind is layers.LayerKind.bn:
            mean_squares.append(layer.norm.nu + np.square(layer.norm.mu))
        else:
            mean_squares.append(layer.norm.nu.copy())
    return ExactStats(means=means, mean_squares=mean_squares)


def estimation_error(est: ExactStats, exact: ExactStats) -> list[float]:
    """Per-layer squared distance over both the mean and mean-of-squares parts."""
    if len(est) != len(exact):
        raise exceptions.ContractViolation(
            detail=f"{len(est)} estimated layers against {len(exact)} exact layers"
        )
    errors = []
    for mean, sq, exact_mean, exact_sq in zip(
        est.means, est.mean_squares, exact.means, exact.mean_squares
    ):
        if mean.shape != exact_mean.shape or sq.shape != exact_sq.shape:
            raise exceptions.ContractViolation(
                detail=f"estimate of size {mean.shape} against {exact_mean.shape}"
            )
        errors.append(
            float(np.sum(np.square(mean - exact_mean)) + np.sum(np.square(sq - exact_sq)))
        )
    return errors


def full_gradient_with_stats(
    net: layers.Network, ds: data.Dataset, loss_scale: float = 1.0
) -> tuple[list[Tensor], ExactStats]:
    """Gradient of the full-normalization objective and the exact statistics.

    A copy of the network is run on the whole dataset in train mode with every
    averaging constant set to 1, so each normalization layer uses and stores
    the exact statistics, and is differentiated through those statistics.
    """
    exact_net = net.clone()
    exact_net.mode = layers.Mode.train
    for layer in exact_net.norm_layers:
        assert layer.norm is not None
        layer.norm.alpha = 1.0
    forward = layers.net_forward(exact_net, ds.features, ds.labels)
    grads = layers.net_backward(
        exact_net, forward, mode=models.BackwardMode.exact, loss_scale=loss_scale
    )
    return grads, estimates_of(exact_net)


def full_gradient(
    net: layers.Network, ds: data.Dataset, loss_scale: float = 1.0
) -> list[Tensor]:
    return full_gradient_with_stats(net, ds, loss_scale)[0]


def gradient_norm_sq(grads: list[Tensor]) -> float:
    return float(sum(np.sum(np.square(grad)) for grad in grads))


def full_gradient_norm_sq(
    net: layers.Network, ds: data.Dataset, loss_scale: float = 1.0
) -> float:
    return gradient_norm_sq(full_gradient(net, ds, loss_scale))


def evaluate_objective(
    net: layers.Network,
    ds: data.Dataset,
    plan: data.BatchPlan | None = None,
    mode: ObjectiveMode = ObjectiveMode.fn,
) -> float:
    """Value of the objective at the network's weights under one formulation.

    Parameters
    ----------
    net : layers.Network
        Source of the weights; its normalization states are ignored.
    ds : data.Dataset
        Whole dataset.
    plan : data.BatchPlan | None
        Batches averaged over in ``bn`` mode.
    mode : ObjectiveMode
        ``plain`` skips normalization, ``bn`` normalizes every batch of the
        plan by its own statistics and averages the batch losses, ``fn``
        normalizes by exact full-dataset statistics.

    Returns
    -------
    float
        Objective value.
    """
    if mode is ObjectiveMode.plain:
        return static_forward(net, ds.features, ds.labels, normalize=False).loss
    if mode is ObjectiveMode.fn:
        return static_forward(net, ds.features, ds.labels).loss
    if plan is None or len(plan) == 0:
        raise exceptions.ContractViolation(detail="bn objective needs a non-empty plan")
    losses = [
        static_forward(net, ds.features[batch], ds.labels[batch]).loss for batch in plan
    ]
    return float(np.mean(losses))


def absorb_normalization(net: layers.Network, ds: data.Dataset) -> layers.Network:
    """Plain network equal to `net` under exact full-dataset normalization.

    Every normalization layer must be directly followed by a linear layer,
    whose weights are replaced by their absorbed form.
    """
    stats = full_dataset_stats(net, ds)
    source = net.clone()
    absorbed: list[layers.LayerSpec] = []
    pending: norm_operators.StatsProfile | None = None
    position = 0
    for index, layer in enumerate(source.layers):
        if layer.kind in layers.NORM_KINDS:
            following = source.layers[index + 1] if index + 1 < len(source.layers) else None
            if following is None or following.kind is not layers.LayerKind.linear:
                raise exceptions.ContractViolation(
                    detail=f"normalization layer {index} is not followed by a linear layer"
                )
            mean, mean_sq = stats.means[position], stats.mean_squares[position]
            pending = norm_operators.StatsProfile(
                means=mean, vars=effective_variance(layer, mean, mean_sq)
            )
            position += 1
        elif layer.weights is not None and pending is not None:
            absorbed.append(
                layers.LayerSpec(
                    kind=layers.LayerKind.linear,
                    weights=norm_operators.build_w_prime(layer.weights, pending),
                )
            )
            pending = None
        else:
            absorbed.append(layers.LayerSpec(kind=layer.kind, weights=layer.weights))
    return layers.Network(layers=absorbed, mode=net.mode)


@attrs.define
class ErrorSeries:
    """Estimation errors and exact gradient norms indexed by iteration."""

    ks: list[int] = attrs.field(factory=list)
    errors: list[list[float]] = attrs.field(factory=list)
    grad_norms: list[float] = attrs.field(factory=list)

    def append(self, k: int, errors: list[float], grad_norm_sq: float) -> None:
        if any(error < 0 for error in errors):
            raise exceptions.ContractViolation(detail="squared errors must be >= 0")
        self.ks.append(k)
        self.errors.append(list(errors))
        self.grad_norms.append(grad_norm_sq)

    @property
    def layer_count(self) -> int:
        return len(self.errors[0]) if self.errors else 0

    def layer(self, index: int) -> tuple[Tensor, Tensor]:
        return (
            np.asarray(self.ks, dtype=np.float64),
            np.asarray([row[index] for row in self.errors], dtype=np.float64),
        )

    def write_csv(self, path: str | pathlib.Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(ERRORS_HEADER)
            for k, errors, grad_norm_sq in zip(self.ks, self.errors, self.grad_norms):
                if not errors:
                    writer.writerow([k, -1, "", repr(grad_norm_sq)])
                for index, error in enumerate(errors):
                    writer.writerow([k, index, repr(error), repr(grad_norm_sq)])


def fit_slope(ks: Tensor, values: Tensor) -> float:
    """Least-squares slope of ``log(values)`` against ``log(ks)``."""
    ks = np.asarray(ks, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if ks.shape[0] < MIN_FIT_POINTS:
        raise exceptions.ContractViolation(
            detail=f"{ks.shape[0]} points, at least {MIN_FIT_POINTS} are needed"
        )
    if np.any(values <= 0) or np.any(ks <= 0):
        raise exceptions.ContractViolation(
            detail="log-log fit needs positive iterations and values"
        )
    slope, _ = np.polyfit(np.log(ks), np.log(values), 1)
    return float(slope)


def loglog_slope(series: ErrorSeries, window: tuple[int, int]) -> list[float]:
    """Slope of each layer's estimation error over ``window[0] <= k <= window[1]``."""
    k_lo, k_hi = window
    slopes = []
    for index in range(series.layer_count):
        ks, errors = series.layer(index)
        inside = (ks >= k_lo) & (ks <= k_hi)
        slopes.append(fit_slope(ks[inside], errors[inside]))
    return slopes


def trailing_ratio(values: list[float], width: int) -> float:
    """Mean of the last `width` values divided by the mean of the first `width`."""
    if len(values) < width or width < 1:
        raise exceptions.ContractViolation(
            detail=f"{len(values)} values, windows of {width} are needed"
        )
    leading = float(np.mean(values[:width]))
    return float(np.mean(values[-width:])) / leading
