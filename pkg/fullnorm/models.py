"""fullnorm specific models."""

# Copyright 2024, fullnorm contributors.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License

import enum

import pydantic

METRICS_HEADER = (
    "iteration",
    "epoch",
    "split",
    "loss",
    "error_rate",
    "est_sq_error",
    "grad_norm_sq",
    "lr",
    "alpha",
    "wall_ms",
)


class Split(str, enum.Enum):
    train = "train"
    test = "test"


class NormKind(str, enum.Enum):
    none = "none"
    bn = "bn"
    fn = "fn"


class BackwardMode(str, enum.Enum):
    """Gradient routed through the statistics of a full normalization layer."""

    elementwise = "elementwise"
    exact = "exact"
    oracle = "oracle"


class BatchStrategy(str, enum.Enum):
    shuffled = "shuffled"
    single_label = "single_label"
    max_k_labels = "max_k_labels"
    partitioned = "partitioned"
    iid = "iid"


class DatasetKind(str, enum.Enum):
    toy3 = "toy3"
    large_variation = "large_variation"
    gaussian_mixture = "gaussian_mixture"
    mnist = "mnist"
    cifar10 = "cifar10"
    file = "file"


class OptimizerKind(str, enum.Enum):
    sgd = "sgd"
    mcsgd = "mcsgd"


class ErrorReport(pydantic.BaseModel):
    type: str
    title: str
    detail: str | None = None
    exit_code: int = 1
    run_id: str | None = None


class MetricsRow(pydantic.BaseModel):
    iteration: int = pydantic.Field(ge=0)
    epoch: int = pydantic.Field(ge=0)
    split: Split
    loss: float
    error_rate: float = pydantic.Field(ge=0.0, le=1.0)
    est_sq_error: list[float] | None = None
    grad_norm_sq: float | None = None
    lr: float = 0.0
    alpha: float | None = None
    wall_ms: float = 0.0

    def to_csv_fields(self) -> list[str]:
        """Render the row in `METRICS_HEADER` order.

        Floats use ``repr`` so that identical runs produce identical bytes.
        """
        est_sq_error = (
            ";".join(repr(value) for value in self.est_sq_error)
            if self.est_sq_error is not None
            else ""
        )
        return [
            str(self.iteration),
            str(self.epoch),
            self.split.value,
            repr(self.loss),
            repr(self.error_rate),
            est_sq_error,
            repr(self.grad_norm_sq) if self.grad_norm_sq is not None else "",
            repr(self.lr),
            repr(self.alpha) if self.alpha is not None else "",
            repr(self.wall_ms),
        ]


class ConditionResult(pydantic.BaseModel):
    name: str
    passed: bool
    detail: str | None = None


class ScheduleReport(pydantic.BaseModel):
    gamma_exp: float
    alpha_exp: float
    L_g: float
    horizon: int
    conditions: list[ConditionResult] = []

    @pydantic.computed_field  # type: ignore[prop-decorator]
    @property
    def admissible(self) -> bool:
        return all(condition.passed for condition in self.conditions)

    @property
    def violations(self) -> list[str]:
        return [
            condition.name for condition in self.conditions if not condition.passed
        ]


class Assertion(pydantic.BaseModel):
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None


class VerificationReport(pydantic.BaseModel):
    kind: str
    assertions: list[Assertion] = []

    @pydantic.computed_field  # type: ignore[prop-decorator]
    @property
    def passed(self) -> bool:
        return bool(self.assertions) and all(
            assertion.passed for assertion in self.assertions
        )
