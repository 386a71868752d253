"""fullnorm specific exceptions."""

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

import traceback

import attrs
import structlog

from . import models

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INTERNAL_ERROR = 2


@attrs.define
class FullNormError(Exception):
    type: str = "fullnorm error"
    title: str = "fullnorm error"
    detail: str | None = None
    exit_code: int = EXIT_FAILURE

    def __str__(self) -> str:
        if self.detail:
            return f"{self.title}: {self.detail}"
        return self.title


@attrs.define
class ContractViolation(FullNormError):
    type: str = "contract violation"
    title: str = "contract violation"


@attrs.define
class EmptyBatch(FullNormError):
    type: str = "empty batch"
    title: str = "empty batch"


@attrs.define
class SingularStatistics(FullNormError):
    type: str = "singular statistics"
    title: str = "singular statistics"


@attrs.define
class MissingCache(FullNormError):
    type: str = "missing cache"
    title: str = "forward cache missing"


@attrs.define
class DataFormatError(FullNormError):
    type: str = "data format error"
    title: str = "data format error"


@attrs.define
class MissingDatasetFiles(FullNormError):
    type: str = "missing dataset files"
    title: str = "missing dataset files"


@attrs.define
class InvalidConfig(FullNormError):
    type: str = "invalid config"
    title: str = "invalid config"
    unknown_keys: list[str] = attrs.field(factory=list)


@attrs.define
class ScheduleInadmissible(FullNormError):
    type: str = "schedule inadmissible"
    title: str = "schedule inadmissible"
    violations: list[str] = attrs.field(factory=list)


@attrs.define
class UnknownRecipe(FullNormError):
    type: str = "unknown recipe"
    title: str = "unknown recipe"


@attrs.define
class VerificationFailed(FullNormError):
    type: str = "verification failed"
    title: str = "verification failed"


def format_exception_content(
    exc: FullNormError,
) -> dict[str, str | int | list[str] | None]:
    """Format a fullnorm exception as a JSON serializable python dictionary.

    Parameters
    ----------
    exc : FullNormError
        Exception to be formatted.

    Returns
    -------
    dict[str, str | int | list[str] | None]
        Formatted exception.
    """
    exception_content = models.ErrorReport(
        type=exc.type,
        title=exc.title,
        detail=exc.detail,
        exit_code=exc.exit_code,
        run_id=structlog.contextvars.get_contextvars().get("run_id", "unset"),
    ).model_dump(exclude_none=True)
    if isinstance(exc, InvalidConfig) and exc.unknown_keys:
        exception_content["unknown_keys"] = exc.unknown_keys
    if isinstance(exc, ScheduleInadmissible) and exc.violations:
        exception_content["violations"] = exc.violations
    return exception_content


def exception_handler(exc: FullNormError) -> int:
    """Handle all exceptions defined as fullnorm exceptions.

    Parameters
    ----------
    exc : FullNormError
        Exception to be handled.

    Returns
    -------
    int
        Process exit code.
    """
    logger.error(
        exc.title,
        exception="".join(traceback.TracebackException.from_exception(exc).format()),
        **format_exception_content(exc),
    )
    return exc.exit_code


def general_exception_handler(exc: Exception) -> int:
    """Handle all uncaught exceptions.

    The function also add an ERROR message to the log with information on the
    raised exception.

    Parameters
    ----------
    exc : Exception
        Exception to be handled.

    Returns
    -------
    int
        Process exit code.
    """
    logger.error(
        "internal error",
        exception="".join(traceback.TracebackException.from_exception(exc).format()),
        run_id=structlog.contextvars.get_contextvars().get("run_id", "unset"),
    )
    return EXIT_INTERNAL_ERROR
