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

import numpy as np
import pytest

from fullnorm import exceptions, tensor_core


def test_matmul() -> None:
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(tensor_core.matmul(np.eye(3), m), m)

    res = tensor_core.matmul([[1, 2], [3, 4]], [[1], [1]])
    exp = np.array([[3.0], [7.0]])
    np.testing.assert_array_equal(res, exp)
    assert res.dtype == np.float64

    with pytest.raises(exceptions.ContractViolation):
        tensor_core.matmul(np.ones((2, 3)), np.ones((2, 3)))

    with pytest.raises(exceptions.ContractViolation):
        tensor_core.matmul(np.ones(3), np.ones((3, 1)))


def test_column_stats() -> None:
    mean, var = tensor_core.column_stats([[0.0], [1.0], [2.0]])
    np.testing.assert_allclose(mean, [1.0])
    np.testing.assert_allclose(var, [2.0 / 3.0])

    mean, var = tensor_core.column_stats([[4.5], [4.5]])
    np.testing.assert_array_equal(mean, [4.5])
    np.testing.assert_array_equal(var, [0.0])

    with pytest.raises(exceptions.EmptyBatch):
        tensor_core.column_stats(np.zeros((0, 2)))


def test_rng_stream() -> None:
    first = tensor_core.RngStream(seed=42)
    second = tensor_core.RngStream(seed=42)
    np.testing.assert_array_equal(first.random(5), second.random(5))

    # derived streams ignore draws made on the parent
    first.random(100)
    np.testing.assert_array_equal(
        first.derive("child").random(5), second.derive("child").random(5)
    )
    assert not np.array_equal(
        second.derive("a").random(5), second.derive("b").random(5)
    )

    with pytest.raises(exceptions.ContractViolation):
        tensor_core.RngStream(seed=-1)


def test_rng_uniform() -> None:
    res = tensor_core.rng_uniform(tensor_core.RngStream(seed=1), 0.0, 1.0, 100_000)
    exp = tensor_core.rng_uniform(tensor_core.RngStream(seed=1), 0.0, 1.0, 100_000)
    np.testing.assert_array_equal(res, exp)
    assert abs(res.mean() - 0.5) < 0.01
    assert res.min() >= 0.0 and res.max() < 1.0

    scaled = tensor_core.rng_uniform(tensor_core.RngStream(seed=1), -2.5, 2.5, (10, 3))
    assert scaled.shape == (10, 3)
    assert np.all((scaled >= -2.5) & (scaled < 2.5))

    with pytest.raises(exceptions.ContractViolation):
        tensor_core.rng_uniform(tensor_core.RngStream(seed=1), 1.0, 1.0, 3)


def test_rng_normal() -> None:
    res = tensor_core.rng_normal(tensor_core.RngStream(seed=2), 100_000)
    exp = tensor_core.rng_normal(tensor_core.RngStream(seed=2), 100_000)
    np.testing.assert_array_equal(res, exp)
    assert abs(res.var() - 1.0) < 0.05
    assert abs(res.mean()) < 0.02
    assert np.all(np.isfinite(res))

    empty = tensor_core.rng_normal(tensor_core.RngStream(seed=2), (0, 0))
    assert empty.shape == (0, 0)
