"""fullnorm training metrics."""

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

import prometheus_client
import structlog

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)


TRAINING_ITERATIONS = prometheus_client.Counter(
    "fullnorm_training_iterations",
    "Optimization steps taken",
    labelnames=("norm_kind",),
)

STEP_SECONDS = prometheus_client.Summary(
    "fullnorm_step_seconds",
    "Duration of one optimization step",
    labelnames=("norm_kind",),
)


def observe_step(norm_kind: str, seconds: float) -> None:
    """Update the step metrics after an optimization step."""
    try:
        TRAINING_ITERATIONS.labels(norm_kind).inc()
        STEP_SECONDS.labels(norm_kind).observe(seconds)
    except Exception as e:
        logger.error("Error updating step metrics", error=e)
    return
