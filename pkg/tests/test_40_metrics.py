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

import prometheus_client

from fullnorm import metrics


def test_observe_step() -> None:
    for seconds in (0.25, 0.5):
        metrics.observe_step("timed", seconds)

    exp_iterations = 2
    res_iterations = prometheus_client.REGISTRY.get_sample_value(
        "fullnorm_training_iterations_total", labels={"norm_kind": "timed"}
    )
    assert res_iterations == exp_iterations

    exp_step_seconds_count = 2
    res_step_seconds_count = prometheus_client.REGISTRY.get_sample_value(
        "fullnorm_step_seconds_count", labels={"norm_kind": "timed"}
    )
    assert res_step_seconds_count == exp_step_seconds_count

    exp_step_seconds_sum = 0.75
    res_step_seconds_sum = prometheus_client.REGISTRY.get_sample_value(
        "fullnorm_step_seconds_sum", labels={"norm_kind": "timed"}
    )
    assert res_step_seconds_sum == exp_step_seconds_sum


def test_observe_step_never_raises() -> None:
    metrics.observe_step("timed-bad", "not a number")
