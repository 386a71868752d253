"""Property checks: gradients, schedules, convergence rates and absorption."""

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

import enum
import pathlib
from typing import Callable

import numpy as np
import structlog

from . import (
    config,
    estimation,
    exceptions,
    harness,
    layers,
    models,
    norm_operators,
    optim,
    tensor_core,
)
from .tensor_core import Tensor

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

SETTINGS = config.settings

RELATIVE_FLOOR = 1e-2
RATES_WINDOW_START = 1000
RATES_GRADIENT_WIDTH = 1000
RATES_GRADIENT_RATIO = 0.1


class VerifyKind(str, enum.Enum):
    grads = "grads"
    schedules = "schedules"
    rates = "rates"
    absorption = "absorption"


def finite_difference(loss: Callable[[], float], weight: Tensor, step: float) -> Tensor:
    """Central differences of `loss` with respect to every entry of `weight`.

    `weight` is perturbed in place and restored after each entry.
    """
    grad = np.zeros_like(weight)
    for index in np.ndindex(weight.shape):
        original = weight[index]
        weight[index] = original + step
        loss_plus = loss()
        weight[index] = original - step
        loss_minus = loss()
        weight[index] = original
        grad[index] = (loss_plus - loss_minus) / (2.0 * step)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_norm_layer(stream: tensor_core.RngStream, d: int) -> layers.LayerSpec:
    """A BN or FN layer with a random rate and a well-conditioned prior state."""
    alpha = float(1.0 - stream.derive("alpha").random(1)[0])
    if stream.derive("kind").integers(0, 2, 1)[0] == 0:
        return layers.LayerSpec.bn(d, alpha=alpha)
    mu = tensor_core.rng_normal(stream.derive("mu"), d)
    spread = tensor_core.rng_uniform(stream.derive("nu"), 0.5, 1.5, d)
    norm = layers.NormState(mu=mu, nu=np.square(mu) + spread, alpha=alpha)
    return layers.LayerSpec(kind=layers.LayerKind.fn, norm=norm)


def random_instance(
    stream: tensor_core.RngStream,
) -> tuple[layers.Network, Tensor, layers.Labels]:
    """Random net with 1 to 3 linear layers, widths 2 to 8 and a batch of 3 to 6."""
    n_linear = int(stream.derive("depth").integers(1, 4, 1)[0])
    widths = stream.derive("widths").integers(2, 9, n_linear).tolist()
    batch = int(stream.derive("batch").integers(3, 7, 1)[0])
    classes = 3
    specs: list[layers.LayerSpec] = []
    width = widths[0]
    if stream.derive("input_norm").integers(0, 2, 1)[0] == 1:
        specs.append(random_norm_layer(stream.derive("norm_input"), width))
    for position in range(n_linear):
        out = classes if position == n_linear - 1 else widths[position + 1]
        specs.append(
            layers.LayerSpec.linear(
                layers.init_linear(stream.derive(f"linear{position}"), width, out)
            )
        )
        if position < n_linear - 1:
            specs.append(random_norm_layer(stream.derive(f"norm{position}"), out))
            specs.append(layers.LayerSpec.relu())
        width = out
    specs.append(layers.LayerSpec.nll())
    x = tensor_core.rng_normal(stream.derive("x"), (batch, widths[0]))
    labels = stream.derive("labels").integers(0, classes, batch)
    return layers.Network(layers=specs), x, labels


def gradient_error(net: layers.Network, x: Tensor, labels: layers.Labels, step: float) -> float:
    """Largest relative error of exact-mode gradients against central differences.

    Every loss evaluation starts from the same pre-update normalization states.
    """
    reference = net.clone()
    analytic = layers.net_backward(
        reference, layers.net_forward(reference, x, labels), mode=models.BackwardMode.exact
    )
    worst = 0.0
    perturbed = net.clone()

    def loss() -> float:
        fresh = perturbed.clone()
        return layers.net_forward(fresh, x, labels).loss

    for position, layer in enumerate(perturbed.linear_layers):
        assert layer.weights is not None
        numeric = finite_difference(loss, layer.weights.W, step)
        worst = max(worst, relative_error(analytic[position], numeric))
    return worst


def verify_grads(
    tol: float | None = None,
    step: float | None = None,
    instances: int | None = None,
    seed: int = 0,
) -> models.VerificationReport:
    tol = SETTINGS.grad_check_tol if tol is None else tol
    step = SETTINGS.grad_check_step if step is None else step
    instances = SETTINGS.grad_check_instances if instances is None else instances
    stream = tensor_core.RngStream(seed=seed).derive("grads")
    errors = []
    for index in range(instances):
        net, x, labels = random_instance(stream.derive(f"instance{index}"))
        error = gradient_error(net, x, labels, step)
        if error > tol:
            logger.warning("gradient mismatch", instance=index, relative_error=error)
        errors.append(error)
    worst = max(errors) if errors else 0.0
    return models.VerificationReport(
        kind=VerifyKind.grads.value,
        assertions=[
            models.Assertion(
                name=f"max relative error over {instances} instances",
                passed=bool(errors) and worst <= tol,
                value=worst,
                threshold=tol,
            )
        ],
    )


def schedule_assertions(
    label: str, c: optim.ScheduleConstraint, horizon: int
) -> list[models.Assertion]:
    gamma_s = optim.Schedule(scale=1.0 / (2.0 * c.L_g), shift=2.0, exponent=c.gamma_exp)
    alpha_s = optim.Schedule(exponent=c.alpha_exp)
    report = optim.check_schedule(c, gamma_s, alpha_s, horizon)
    return [
        models.Assertion(name=f"{label}: {condition.name}", passed=condition.passed)
        for condition in report.conditions
    ]


def recipe_schedule_assertions(
    label: str, cfg: config.ExperimentConfig, horizon: int
) -> list[models.Assertion]:
    """MCSGD arms are checked in full, fixed-rate SGD arms through their alpha schedule."""
    opt = cfg.optimizer
    if opt.alpha is None:
        return []
    if opt.gamma is not None:
        c = optim.ScheduleConstraint(
            gamma_exp=opt.gamma.exponent, alpha_exp=opt.alpha.exponent, L_g=opt.L_g
        )
        report = optim.check_schedule(c, opt.gamma, opt.alpha, horizon)
        return [
            models.Assertion(name=f"{label}: {condition.name}", passed=condition.passed)
            for condition in report.conditions
        ]
    values = opt.alpha.values(np.arange(horizon + 1, dtype=np.int64))
    return [
        models.Assertion(
            name=f"{label}: alpha schedule nonincreasing in (0, 1]",
            passed=bool(
                np.all(np.diff(values) <= 0.0) and values[-1] > 0.0 and values[0] <= 1.0
            ),
            value=float(values[0]),
        ),
        models.Assertion(
            name=f"{label}: alpha {optim.SLOW_ESTIMATION}",
            passed=opt.alpha.exponent < 0.5,
            value=opt.alpha.exponent,
            threshold=0.5,
        ),
    ]


def verify_schedules(
    gamma: float | None = None,
    alpha_exp: float | None = None,
    L_g: float = 1.0,
    horizon: int = harness.RATES_ITERATIONS,
) -> models.VerificationReport:
    """Admissibility of a user pair, or of the default pair and the recipe schedules."""
    if gamma is not None or alpha_exp is not None:
        c = optim.ScheduleConstraint(
            gamma_exp=0.8 if gamma is None else gamma,
            alpha_exp=0.4 if alpha_exp is None else alpha_exp,
            L_g=L_g,
        )
        assertions = schedule_assertions("requested", c, horizon)
    else:
        default = optim.ScheduleConstraint(gamma_exp=0.8, alpha_exp=0.4, L_g=L_g)
        assertions = schedule_assertions("default", default, horizon)
        for recipe_id, build in harness.RECIPES.items():
            for arm, cfg in build(None).items():
                assertions.extend(recipe_schedule_assertions(f"{recipe_id}-{arm}", cfg, horizon))
    for assertion in assertions:
        if not assertion.passed:
            logger.warning("schedule check failed", assertion=assertion.name)
    return models.VerificationReport(kind=VerifyKind.schedules.value, assertions=assertions)


def verify_rates(
    iterations: int = harness.RATES_ITERATIONS,
    out_dir: str | pathlib.Path | None = None,
) -> models.VerificationReport:
    """Run the rates recipe and check the estimation and gradient decay."""
    arms = harness.rates(None, iterations)
    every = arms["fn"].oracle.every
    results = harness.run_arms("rates", arms, out_dir)
    series = results["fn"].series
    if series is None or not series.ks:
        raise exceptions.VerificationFailed(detail="the rates recipe recorded no errors")
    window = (min(RATES_WINDOW_START, max(iterations // 10, 1)), iterations)
    lo, hi = SETTINGS.slope_band
    assertions = []
    for index, slope in enumerate(estimation.loglog_slope(series, window)):
        assertions.append(
            models.Assertion(
                name=f"layer {index} estimation error slope in [{lo}, {hi}]",
                passed=lo <= slope <= hi,
                value=slope,
                threshold=hi,
            )
        )
    width = min(RATES_GRADIENT_WIDTH, max(iterations // 10, 1))
    # one recorded entry per `every` iterations
    ratio = estimation.trailing_ratio(series.grad_norms, max(width // every, 1))
    assertions.append(
        models.Assertion(
            name=f"trailing/leading mean of squared gradient norm over {width} iterations",
            passed=ratio <= RATES_GRADIENT_RATIO,
            value=ratio,
            threshold=RATES_GRADIENT_RATIO,
        )
    )
    return models.VerificationReport(kind=VerifyKind.rates.value, assertions=assertions)


def absorption_deviation(stream: tensor_core.RngStream) -> float:
    n = int(stream.derive("n").integers(1, 7, 1)[0])
    m = int(stream.derive("m").integers(1, 7, 1)[0])
    aug = norm_operators.AffineAug(W=tensor_core.rng_normal(stream.derive("W"), (m, n + 1)))
    stats = norm_operators.StatsProfile(
        means=tensor_core.rng_normal(stream.derive("means"), n),
        vars=tensor_core.rng_uniform(stream.derive("vars"), 0.1, 4.0, n),
    )
    g_value = 3.0 * tensor_core.rng_normal(stream.derive("g"), (5, n))
    sigma = (
        norm_operators.Activation.relu
        if stream.derive("sigma").integers(0, 2, 1)[0] == 1
        else norm_operators.Activation.identity
    )
    absorbed = norm_operators.apply_plain_operator(
        norm_operators.build_w_prime(aug, stats), sigma, g_value
    )
    direct = norm_operators.apply_norm_operator(
        aug, sigma, stats, g_value, floor=SETTINGS.variance_floor
    )
    return float(np.max(np.abs(absorbed - direct)))


def verify_absorption(
    instances: int | None = None, tol: float | None = None, seed: int = 0
) -> models.VerificationReport:
    instances = SETTINGS.absorption_instances if instances is None else instances
    tol = SETTINGS.absorption_tol if tol is None else tol
    stream = tensor_core.RngStream(seed=seed).derive("absorption")
    worst = max(
        (absorption_deviation(stream.derive(f"instance{i}")) for i in range(instances)),
        default=0.0,
    )
    return models.VerificationReport(
        kind=VerifyKind.absorption.value,
        assertions=[
            models.Assertion(
                name=f"max deviation over {instances} instances",
                passed=instances > 0 and worst <= tol,
                value=worst,
                threshold=tol,
            )
        ],
    )


def verify(
    kind: VerifyKind,
    tol: float | None = None,
    gamma: float | None = None,
    alpha_exp: float | None = None,
    L_g: float = 1.0,
    iterations: int | None = None,
    out_dir: str | pathlib.Path | None = None,
) -> models.VerificationReport:
    """Run one family of property checks.

    Parameters
    ----------
    kind : VerifyKind
        Family of checks.
    tol : float | None
        Tolerance override for ``grads`` and ``absorption``.
    gamma, alpha_exp, L_g : float
        Schedule pair checked by ``schedules`` instead of the defaults.
    iterations : int | None
        Iteration count of ``rates`` and horizon of ``schedules``.
    out_dir : str | pathlib.Path | None
        Directory receiving the ``rates`` CSVs.

    Returns
    -------
    models.VerificationReport
        One assertion per checked property.
    """
    if kind is VerifyKind.grads:
        report = verify_grads(tol=tol)
    elif kind is VerifyKind.schedules:
        report = verify_schedules(
            gamma=gamma,
            alpha_exp=alpha_exp,
            L_g=L_g,
            horizon=iterations or harness.RATES_ITERATIONS,
        )
    elif kind is VerifyKind.rates:
        report = verify_rates(iterations=iterations or harness.RATES_ITERATIONS, out_dir=out_dir)
    else:
        report = verify_absorption(tol=tol)
    logger.info("verification finished", kind=kind.value, passed=report.passed)
    return report
