"""Power-law schedules, the compositional SGD step and momentum SGD."""

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

import attrs
import numpy as np
import numpy.typing as npt
import pydantic
import structlog

from . import exceptions, layers, models
from .tensor_core import Tensor

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

ORDERED_RATES = "gamma > a > 0"
DECAY_BALANCE = "a < 2*gamma - 1"
SLOW_ESTIMATION = "a < 1/2"
RATIO_BOUND = "gamma_k*L_g/alpha_(k+1) <= 1/2"


class Schedule(pydantic.BaseModel):
    """``value(k) = scale * (k / divisor + shift) ** (-exponent)``."""

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)

    scale: float = pydantic.Field(default=1.0, gt=0.0)
    shift: float = pydantic.Field(default=1.0, gt=0.0)
    divisor: float = pydantic.Field(default=1.0, gt=0.0)
    exponent: float = pydantic.Field(default=0.0, ge=0.0)

    def value(self, k: int) -> float:
        if k < 0:
            raise exceptions.ContractViolation(
                detail=f"schedule evaluated at negative iteration {k}"
            )
        return float(self.scale * (k / self.divisor + self.shift) ** -self.exponent)

    def values(self, ks: npt.NDArray[np.int64]) -> Tensor:
        return self.scale * (ks / self.divisor + self.shift) ** -self.exponent


def default_gamma(L_g: float = 1.0) -> Schedule:
    """Step size ``1 / (2 L_g) * (k + 2) ** -0.8``."""
    return Schedule(scale=1.0 / (2.0 * L_g), shift=2.0, exponent=0.8)


def default_alpha() -> Schedule:
    """Approximation rate ``(k + 1) ** -0.4``."""
    return Schedule(exponent=0.4)


def decay_alpha(divisor: float, exponent: float) -> Schedule:
    """Approximation rate ``(k / divisor + 1) ** -exponent``."""
    return Schedule(divisor=divisor, exponent=exponent)


def schedule_value(s: Schedule, k: int) -> float:
    return s.value(k)


@attrs.define(frozen=True)
class ScheduleConstraint:
    gamma_exp: float
    alpha_exp: float
    L_g: float = 1.0


def check_schedule(
    c: ScheduleConstraint, gamma_s: Schedule, alpha_s: Schedule, horizon: int
) -> models.ScheduleReport:
    """Check the admissibility conditions of a (step size, approximation rate) pair.

    Parameters
    ----------
    c : ScheduleConstraint
        Decay exponents of the two schedules and the oracle-error constant.
    gamma_s : Schedule
        Step-size schedule.
    alpha_s : Schedule
        Approximation-rate schedule.
    horizon : int
        The ratio condition is checked for every ``k <= horizon``.

    Returns
    -------
    models.ScheduleReport
        One entry per condition; nothing is raised on failure.
    """
    gamma, a = c.gamma_exp, c.alpha_exp
    ks = np.arange(max(horizon, 0) + 1, dtype=np.int64)
    ratios = gamma_s.values(ks) * c.L_g / alpha_s.values(ks + 1)
    worst = float(ratios.max())
    conditions = [
        models.ConditionResult(
            name=ORDERED_RATES,
            passed=gamma > a > 0.0,
            detail=f"gamma={gamma!r}, a={a!r}",
        ),
        models.ConditionResult(
            name=DECAY_BALANCE,
            passed=a < 2.0 * gamma - 1.0,
            detail=f"a={a!r}, 2*gamma-1={2.0 * gamma - 1.0!r}",
        ),
        models.ConditionResult(
            name=SLOW_ESTIMATION, passed=a < 0.5, detail=f"a={a!r}"
        ),
        models.ConditionResult(
            name=RATIO_BOUND,
            passed=worst <= 0.5,
            detail=f"max ratio {worst!r} at k={int(ratios.argmax())}",
        ),
    ]
    return models.ScheduleReport(
        gamma_exp=gamma, alpha_exp=a, L_g=c.L_g, horizon=horizon, conditions=conditions
    )


def require_admissible(report: models.ScheduleReport) -> None:
    if not report.admissible:
        logger.warning("inadmissible schedule", violations=report.violations)
        raise exceptions.ScheduleInadmissible(
            detail=f"violated: {', '.join(report.violations)}",
            violations=report.violations,
        )


@attrs.define
class OptimState:
    """Iteration counter and momentum buffers, one per linear layer.

    The estimates of the compositional method live in the network's
    normalization states.
    """

    k: int = 0
    buffers: list[Tensor] = attrs.field(factory=list)

    @classmethod
    def for_network(cls, net: layers.Network) -> "OptimState":
        return cls(buffers=[np.zeros_like(w) for w in weights_of(net)])


@attrs.define(frozen=True)
class StepResult:
    loss: float
    logits: Tensor
    grads: list[Tensor]
    lr: float
    alpha: float | None


def weights_of(net: layers.Network) -> list[Tensor]:
    return [layer.weights.W for layer in net.linear_layers if layer.weights is not None]


def set_estimation_rate(net: layers.Network, alpha_k: float) -> None:
    """Use `alpha_k` as the averaging constant of every FN layer."""
    for layer in net.norm_layers:
        if layer.kind is layers.LayerKind.fn and layer.norm is not None:
            if not 0.0 <= alpha_k <= 1.0:
                raise exceptions.ContractViolation(
                    detail=f"approximation rate must lie in [0, 1], got {alpha_k}"
                )
            layer.norm.alpha = alpha_k


def mcsgd_estimation_update(
    state: OptimState,
    net: layers.Network,
    x: Tensor,
    labels: layers.Labels,
    alpha_k: float,
) -> layers.ForwardResult:
    """Blend each FN layer's estimates with the current batch at rate `alpha_k`.

    A single training forward realizes the update: every FN layer sees an input
    computed with the estimates of the layers below it.
    """
    set_estimation_rate(net, alpha_k)
    net.mode = layers.Mode.train
    return layers.net_forward(net, x, labels)


def gradient_oracle(
    net: layers.Network,
    x: Tensor,
    labels: layers.Labels,
    forward: layers.ForwardResult | None = None,
) -> list[Tensor]:
    """Stochastic gradient with FN layers normalized by their stored estimates.

    Without `forward`, a training forward with rate 0 is run first so that the
    estimates are left untouched.
    """
    if forward is None:
        for layer in net.norm_layers:
            if layer.norm is not None and not layer.norm.populated:
                raise exceptions.MissingCache(detail="estimates are not populated")
        fn_states = [
            layer.norm
            for layer in net.norm_layers
            if layer.kind is layers.LayerKind.fn and layer.norm is not None
        ]
        saved = [norm.alpha for norm in fn_states]
        mode = net.mode
        try:
            set_estimation_rate(net, 0.0)
            net.mode = layers.Mode.train
            forward = layers.net_forward(net, x, labels)
        finally:
            for norm, alpha in zip(fn_states, saved):
                norm.alpha = alpha
            net.mode = mode
    return layers.net_backward(net, forward, mode=models.BackwardMode.oracle)


def momentum_update(
    buffers: list[Tensor],
    weights: list[Tensor],
    grads: list[Tensor],
    lr: float,
    momentum: float = 0.0,
) -> list[Tensor]:
    """``v <- momentum * v + g; w <- w - lr * v``, in place on `weights`."""
    if not len(buffers) == len(weights) == len(grads):
        raise exceptions.ContractViolation(
            detail=(
                f"{len(buffers)} buffers, {len(weights)} weights "
                f"and {len(grads)} gradients"
            )
        )
    for buffer, weight, grad in zip(buffers, weights, grads):
        if not buffer.shape == weight.shape == grad.shape:
            raise exceptions.ContractViolation(
                detail=f"shapes {buffer.shape}, {weight.shape}, {grad.shape} differ"
            )
        buffer *= momentum
        buffer += grad
        weight -= lr * buffer
    return weights


def step_decay(lr: float, epoch: int, every: int | None, factor: float) -> float:
    """Divide `lr` by `factor` once every `every` epochs."""
    if every is None:
        return lr
    return float(lr / factor ** (epoch // every))


def mcsgd_step(
    state: OptimState,
    net: layers.Network,
    x: Tensor,
    labels: layers.Labels,
    gamma_s: Schedule,
    alpha_s: Schedule,
    momentum: float = 0.0,
) -> StepResult:
    """One iteration: estimation update, oracle gradient, weight update, ``k += 1``.

    The oracle reuses the caches of the estimation forward, so it sees the
    just-updated estimates and the same batch at every layer.
    """
    alpha_k = alpha_s.value(state.k)
    gamma_k = gamma_s.value(state.k)
    forward = mcsgd_estimation_update(state, net, x, labels, alpha_k)
    grads = gradient_oracle(net, x, labels, forward=forward)
    momentum_update(state.buffers, weights_of(net), grads, gamma_k, momentum)
    state.k += 1
    return StepResult(
        loss=forward.loss, logits=forward.logits, grads=grads, lr=gamma_k, alpha=alpha_k
    )


def sgd_step(
    state: OptimState,
    net: layers.Network,
    x: Tensor,
    labels: layers.Labels,
    lr: float,
    momentum: float = 0.0,
    alpha_k: float | None = None,
    fn_backward: models.BackwardMode = models.BackwardMode.elementwise,
) -> StepResult:
    if alpha_k is not None:
        set_estimation_rate(net, alpha_k)
    net.mode = layers.Mode.train
    forward = layers.net_forward(net, x, labels)
    grads = layers.net_backward(net, forward, mode=fn_backward)
    momentum_update(state.buffers, weights_of(net), grads, lr, momentum)
    state.k += 1
    return StepResult(
        loss=forward.loss, logits=forward.logits, grads=grads, lr=lr, alpha=alpha_k
    )
