"""Normalization as an operator on sampled feature tables.

The normalized operator maps a feature table ``g`` (one row per sample) to
``sigma(W [(g - mean) / sqrt(var); 1])``; the plain operator drops the
normalization. When the statistics are fixed the normalization is a linear
change of variables that can be absorbed into ``W``.
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

import enum

import attrs
import numpy as np

from . import exceptions, tensor_core
from .tensor_core import Tensor

VARIANCE_FLOOR = 1e-5


class Activation(str, enum.Enum):
    identity = "identity"
    relu = "relu"

    def __call__(self, x: Tensor) -> Tensor:
        if self is Activation.relu:
            return np.maximum(x, 0.0)
        return x


@attrs.define(frozen=True)
class StatsProfile:
    means: Tensor
    vars: Tensor

    def __attrs_post_init__(self) -> None:
        if self.means.shape != self.vars.shape or self.means.ndim != 1:
            raise exceptions.ContractViolation(
                detail=(
                    f"means {self.means.shape} and vars {self.vars.shape} "
                    "must be vectors of equal length"
                )
            )
        if np.any(self.vars < 0):
            raise exceptions.ContractViolation(detail="variances must be >= 0")

    @property
    def size(self) -> int:
        return int(self.means.shape[0])


@attrs.define(frozen=True)
class AffineAug:
    """Weights acting on a feature vector with an appended constant 1.

    The last column of `W` is the bias.
    """

    W: Tensor = attrs.field(converter=tensor_core.as_matrix)

    @property
    def out_features(self) -> int:
        return int(self.W.shape[0])

    @property
    def in_features(self) -> int:
        return int(self.W.shape[1]) - 1

    def affine(self, g_value: Tensor) -> Tensor:
        g_value = tensor_core.as_tensor(g_value)
        if g_value.shape[-1] != self.in_features:
            raise exceptions.ContractViolation(
                detail=(
                    f"feature dimension {g_value.shape[-1]} does not match "
                    f"weights expecting {self.in_features}"
                )
            )
        return g_value @ self.W[:, :-1].T + self.W[:, -1]


def stats_of(g_values: Tensor) -> StatsProfile:
    """Per-coordinate mean and population variance of ``g`` over a sample set.

    Parameters
    ----------
    g_values : Tensor
        Values of ``g`` on the samples, shape (|B|, n).

    Returns
    -------
    StatsProfile
        Means and variances of each coordinate.
    """
    means, vars_ = tensor_core.column_stats(g_values)
    return StatsProfile(means=means, vars=vars_)


def apply_norm_operator(
    aug: AffineAug,
    sigma: Activation,
    stats: StatsProfile,
    g_value: Tensor,
    floor: float = VARIANCE_FLOOR,
) -> Tensor:
    """Evaluate the normalized operator on one sample or a table of samples.

    Variances are passed through ``max(var, floor)`` before the square root.
    """
    g_value = tensor_core.as_tensor(g_value)
    if g_value.shape[-1] != stats.size:
        raise exceptions.ContractViolation(
            detail=(
                f"feature dimension {g_value.shape[-1]} does not match "
                f"statistics of size {stats.size}"
            )
        )
    normalized = (g_value - stats.means) / np.sqrt(np.maximum(stats.vars, floor))
    return sigma(aug.affine(normalized))


def apply_plain_operator(aug: AffineAug, sigma: Activation, g_value: Tensor) -> Tensor:
    return sigma(aug.affine(g_value))


def build_w_prime(aug: AffineAug, stats: StatsProfile) -> AffineAug:
    """Absorb fixed normalization statistics into the weights.

    Returns ``W' = W M`` with ``M`` the (n+1)x(n+1) matrix holding
    ``1/sqrt(var_i)`` on the diagonal, ``-mean_i/sqrt(var_i)`` in the last
    column and 1 in the bottom-right corner, so that the plain operator with
    ``W'`` equals the normalized operator with ``W``.

    Raises
    ------
    exceptions.SingularStatistics
        Raised if any variance is not strictly positive.
    """
    if stats.size != aug.in_features:
        raise exceptions.ContractViolation(
            detail=(
                f"statistics of size {stats.size} do not match weights "
                f"expecting {aug.in_features} features"
            )
        )
    if np.any(stats.vars <= 0):
        raise exceptions.SingularStatistics(
            detail="cannot absorb statistics with a zero variance"
        )
    inv_std = 1.0 / np.sqrt(stats.vars)
    n = stats.size
    m = np.zeros((n + 1, n + 1))
    m[np.arange(n), np.arange(n)] = inv_std
    m[:n, n] = -stats.means * inv_std
    m[n, n] = 1.0
    return AffineAug(W=tensor_core.matmul(aug.W, m))
