"""Configuration of the experiments.

Options are based on pydantic.BaseSettings, so they automatically get values from
the environment (variables prefixed with ``FULLNORM_``).
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

import pathlib
from typing import Annotated, Any

import pydantic
import pydantic_settings
import structlog

from . import exceptions, models, optim

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

COMMENT_PREFIX = "#"
NULL_LITERALS = ("null", "None")


class Settings(pydantic_settings.BaseSettings):
    """General settings."""

    model_config = pydantic_settings.SettingsConfigDict(env_prefix="FULLNORM_")

    data_dir: str = "."
    output_dir: str = "results"

    log_format: str = "console"
    log_level: str = "INFO"

    norm_eps: float = 1e-5
    bn_alpha: float = 0.1
    variance_floor: float = 1e-5

    mnist_cap: int = 6400
    cifar_cap: int = 5000
    dataset_cache_maxsize: int = 8

    grad_check_tol: float = 1e-6
    grad_check_step: float = 1e-6
    grad_check_instances: int = 50
    absorption_instances: int = 200
    absorption_tol: float = 1e-10
    slope_band: tuple[float, float] = (-0.8, -0.2)

    record_wall_time: bool = False

    @property
    def data_path(self) -> pathlib.Path:
        return pathlib.Path(self.data_dir)


settings = Settings()


def validate_positive(value: int) -> int:
    if value < 1:
        raise ValueError(f"must be a positive integer, got {value}")
    return value


PositiveInt = Annotated[int, pydantic.AfterValidator(validate_positive)]


class StrictModel(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")


class DatasetConfig(StrictModel):
    """Dataset section: generator or loader and desk-scale caps."""

    kind: models.DatasetKind = models.DatasetKind.toy3
    n: PositiveInt = 10000
    d: PositiveInt = 1000
    classes: PositiveInt = 1000
    scale_max: float = 50.0
    test_n: PositiveInt = 100
    spread: float = 2.0
    noise: bool = True
    root: str | None = None
    train_path: str | None = None
    test_path: str | None = None
    cap: PositiveInt | None = None
    test_cap: PositiveInt | None = None
    scale_lo: float | None = None
    scale_hi: float | None = None
    test_on_train: bool = False


class ArchitectureConfig(StrictModel):
    widths: list[PositiveInt] = pydantic.Field(default=[128, 64])
    norm: models.NormKind = models.NormKind.none
    input_norm: bool = False
    fn_backward: models.BackwardMode = models.BackwardMode.elementwise
    bn_alpha: float | None = None
    eps: float | None = None


class BatchConfig(StrictModel):
    strategy: models.BatchStrategy = models.BatchStrategy.shuffled
    size: PositiveInt = 64
    max_labels: PositiveInt = 3
    workers: PositiveInt = 2


class OptimizerConfig(StrictModel):
    kind: models.OptimizerKind = models.OptimizerKind.sgd
    lr: float = 0.01
    momentum: float = 0.0
    lr_decay_every: PositiveInt | None = None
    lr_decay_factor: float = 5.0
    gamma: optim.Schedule | None = None
    alpha: optim.Schedule | None = None
    L_g: float = 1.0
    allow_inadmissible: bool = False


class OracleConfig(StrictModel):
    enabled: bool = False
    every: PositiveInt = 1


class ExperimentConfig(StrictModel):
    """A complete, reproducible training run."""

    name: str = "experiment"
    seed: int
    epochs: int = pydantic.Field(default=1, ge=0)
    max_iterations: PositiveInt | None = None
    test_every: PositiveInt = 1
    output: str | None = None
    notes: str | None = None
    dataset: DatasetConfig = pydantic.Field(default_factory=DatasetConfig)
    architecture: ArchitectureConfig = pydantic.Field(
        default_factory=ArchitectureConfig
    )
    batch: BatchConfig = pydantic.Field(default_factory=BatchConfig)
    optimizer: OptimizerConfig = pydantic.Field(default_factory=OptimizerConfig)
    oracle: OracleConfig = pydantic.Field(default_factory=OracleConfig)


def parse_value(raw: str) -> Any:
    """Parse a scalar or bracketed list from the flat config format."""
    value = raw.strip()
    if value in NULL_LITERALS:
        return None
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    if value.startswith("[") and value.endswith("]"):
        inner = value[1:-1].strip()
        if not inner:
            return []
        return [parse_value(item) for item in inner.split(",")]
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value


def parse_flat_config(text: str) -> dict[str, Any]:
    """Build a nested dictionary out of dotted ``key = value`` lines.

    Parameters
    ----------
    text : str
        Content of the configuration file.

    Returns
    -------
    dict[str, Any]
        Nested dictionary, one level per dotted key component.

    Raises
    ------
    exceptions.InvalidConfig
        Raised on malformed lines or keys assigned twice.
    """
    tree: dict[str, Any] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(COMMENT_PREFIX):
            continue
        if "=" not in stripped:
            raise exceptions.InvalidConfig(
                detail=f"line {line_number}: expected 'key = value', got {stripped!r}"
            )
        key, raw_value = stripped.split("=", 1)
        parts = [part.strip() for part in key.strip().split(".")]
        if not all(parts):
            raise exceptions.InvalidConfig(
                detail=f"line {line_number}: malformed key {key.strip()!r}"
            )
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise exceptions.InvalidConfig(
                    detail=f"line {line_number}: {part!r} is both a value and a section"
                )
            node = child
        if parts[-1] in node:
            raise exceptions.InvalidConfig(
                detail=f"line {line_number}: key {key.strip()!r} assigned twice"
            )
        node[parts[-1]] = parse_value(raw_value)
    return tree


def validate_experiment_config(tree: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except pydantic.ValidationError as exc:
        unknown_keys = [
            ".".join(str(part) for part in error["loc"])
            for error in exc.errors()
            if error["type"] == "extra_forbidden"
        ]
        if unknown_keys:
            raise exceptions.InvalidConfig(
                detail=f"unknown keys: {', '.join(unknown_keys)}",
                unknown_keys=unknown_keys,
            ) from exc
        raise exceptions.InvalidConfig(detail=str(exc)) from exc


def load_experiment_config(config_file: str | pathlib.Path) -> ExperimentConfig:
    """Load and validate an experiment configuration file.

    Parameters
    ----------
    config_file : str | pathlib.Path
        Path to a flat ``key = value`` configuration file.

    Returns
    -------
    ExperimentConfig
        Validated configuration.
    """
    try:
        text = pathlib.Path(config_file).read_text(encoding="utf-8")
    except OSError as exc:
        raise exceptions.InvalidConfig(
            detail=f"cannot read config file {config_file}: {exc}"
        ) from exc
    return validate_experiment_config(parse_flat_config(text))


def format_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(format_value(item) for item in value) + "]"
    return str(value)


def flatten(tree: dict[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    items: list[tuple[str, Any]] = []
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(flatten(value, prefix=f"{dotted}."))
        else:
            items.append((dotted, value))
    return items


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    """Render a configuration in the flat format read by `load_experiment_config`."""
    tree = cfg.model_dump(mode="json", exclude_none=True)
    lines = [f"{key} = {format_value(value)}" for key, value in flatten(tree)]
    return "\n".join(lines) + "\n"
