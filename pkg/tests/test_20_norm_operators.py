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

from fullnorm import exceptions, norm_operators, tensor_core

identity = norm_operators.Activation.identity
relu = norm_operators.Activation.relu


def test_stats_of() -> None:
    stats = norm_operators.stats_of([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    np.testing.assert_allclose(stats.means, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(stats.vars, [2.0 / 3.0] * 3)

    stats = norm_operators.stats_of([[3.0, -1.0]])
    np.testing.assert_array_equal(stats.vars, [0.0, 0.0])

    g = np.array([[1.0, 2.0], [4.0, -1.0], [0.5, 0.5]])
    stats = norm_operators.stats_of(g)
    np.testing.assert_allclose(
        stats.vars, np.square(g).mean(axis=0) - np.square(g.mean(axis=0))
    )


def test_stats_of_duplicated(stream: tensor_core.RngStream) -> None:
    g = 3.0 * tensor_core.rng_normal(stream.derive("g"), (7, 4)) + 1.5
    exp = norm_operators.stats_of(g)
    res = norm_operators.stats_of(np.vstack([g, g]))
    np.testing.assert_allclose(res.means, exp.means, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(res.vars, exp.vars, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("sigma", [identity, relu])
def test_apply_norm_operator_affine_invariance(
    stream: tensor_core.RngStream, sigma: norm_operators.Activation
) -> None:
    g = tensor_core.rng_normal(stream.derive("g"), (12, 3))
    aug = norm_operators.AffineAug(W=tensor_core.rng_normal(stream.derive("W"), (2, 4)))
    scale = tensor_core.rng_uniform(stream.derive("scale"), 0.5, 3.0, 3)
    shift = tensor_core.rng_uniform(stream.derive("shift"), -5.0, 5.0, 3)
    rescaled = scale * g + shift

    exp = norm_operators.apply_norm_operator(aug, sigma, norm_operators.stats_of(g), g)
    res = norm_operators.apply_norm_operator(
        aug, sigma, norm_operators.stats_of(rescaled), rescaled
    )
    np.testing.assert_allclose(res, exp, atol=1e-10)


def test_stats_profile() -> None:
    with pytest.raises(exceptions.ContractViolation):
        norm_operators.StatsProfile(means=np.zeros(2), vars=np.ones(3))

    with pytest.raises(exceptions.ContractViolation):
        norm_operators.StatsProfile(means=np.zeros(1), vars=np.array([-1.0]))


def test_apply_norm_operator() -> None:
    stats = norm_operators.StatsProfile(
        means=np.array([1.0, -2.0]), vars=np.array([2.0, 0.5])
    )
    aug = norm_operators.AffineAug(W=[[1.0, 3.0, 0.0], [-2.0, 1.0, 0.0]])
    res = norm_operators.apply_norm_operator(aug, identity, stats, stats.means)
    np.testing.assert_allclose(res, [0.0, 0.0])

    stats = norm_operators.StatsProfile(means=np.array([1.0]), vars=np.array([2.0 / 3.0]))
    aug = norm_operators.AffineAug(W=[[1.0, 0.0]])
    res = norm_operators.apply_norm_operator(aug, identity, stats, [2.0])
    np.testing.assert_allclose(res, [1.224745], atol=1e-6)

    aug = norm_operators.AffineAug(W=[[-1.0, 0.0]])
    res = norm_operators.apply_norm_operator(aug, relu, stats, [2.0])
    np.testing.assert_array_equal(res, [0.0])

    with pytest.raises(exceptions.ContractViolation):
        norm_operators.apply_norm_operator(aug, identity, stats, [1.0, 2.0])


def test_apply_plain_operator() -> None:
    aug = norm_operators.AffineAug(W=np.hstack([np.eye(3), np.zeros((3, 1))]))
    g = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(
        norm_operators.apply_plain_operator(aug, identity, g), g
    )

    aug = norm_operators.AffineAug(W=[[1.0, 2.0]])
    assert norm_operators.apply_plain_operator(aug, identity, [3.0]).tolist() == [5.0]
    assert norm_operators.apply_plain_operator(aug, relu, [-3.0]).tolist() == [0.0]


def test_build_w_prime() -> None:
    aug = norm_operators.AffineAug(W=[[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]])
    stats = norm_operators.StatsProfile(means=np.zeros(2), vars=np.ones(2))
    np.testing.assert_array_equal(norm_operators.build_w_prime(aug, stats).W, aug.W)

    aug = norm_operators.AffineAug(W=[[2.0, 0.0]])
    stats = norm_operators.StatsProfile(means=np.array([1.0]), vars=np.array([4.0]))
    res = norm_operators.build_w_prime(aug, stats)
    np.testing.assert_allclose(res.W, [[1.0, -1.0]])
    for g in (-3.0, 0.0, 2.5):
        np.testing.assert_allclose(
            norm_operators.apply_plain_operator(res, identity, [g]),
            norm_operators.apply_norm_operator(aug, identity, stats, [g]),
        )

    stats = norm_operators.StatsProfile(means=np.array([1.0]), vars=np.array([0.0]))
    with pytest.raises(exceptions.SingularStatistics):
        norm_operators.build_w_prime(aug, stats)
