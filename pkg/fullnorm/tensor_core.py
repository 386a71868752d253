"""Dense float64 tensors and seeded random streams."""

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

import hashlib
from typing import Any, Sequence

import attrs
import numpy as np
import numpy.typing as npt

from . import exceptions

Tensor = npt.NDArray[np.float64]
Shape = int | Sequence[int]

DTYPE = np.float64


def as_tensor(data: Any) -> Tensor:
    """Return `data` as a C-ordered float64 array (no copy when already one)."""
    return np.ascontiguousarray(data, dtype=DTYPE)


def as_matrix(data: Any) -> Tensor:
    tensor = as_tensor(data)
    if tensor.ndim != 2:
        raise exceptions.ContractViolation(
            detail=f"expected a 2-d tensor, got shape {tensor.shape}"
        )
    return tensor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with an explicit inner-dimension check.

    Parameters
    ----------
    a : Tensor
        Left operand, shape (m, k).
    b : Tensor
        Right operand, shape (k, n).

    Returns
    -------
    Tensor
        Product of shape (m, n).

    Raises
    ------
    exceptions.ContractViolation
        Raised if the operands are not matrices or the inner dimensions differ.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise exceptions.ContractViolation(
            detail=f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ"
        )
    return np.matmul(a, b)


def column_stats(m: Tensor) -> tuple[Tensor, Tensor]:
    """Per-column population mean and variance (divisor b).

    Negative variances produced by cancellation are clamped at 0.
    """
    m = as_matrix(m)
    if m.shape[0] == 0:
        raise exceptions.EmptyBatch(detail="column statistics of an empty batch")
    mean = m.mean(axis=0)
    var = np.maximum(np.mean(np.square(m - mean), axis=0), 0.0)
    return mean, var


def label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@attrs.define
class RngStream:
    """Seeded PCG64 stream; identical seeds give identical draws on every platform.

    Sub-streams obtained with `derive` depend only on the seed and the labels
    along the derivation path, not on how many values were drawn elsewhere.
    """

    seed: int
    path: tuple[int, ...] = ()
    generator: np.random.Generator = attrs.field(init=False, repr=False)

    def __attrs_post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise exceptions.ContractViolation(
                detail=f"seed must be a 64-bit unsigned integer, got {self.seed}"
            )
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, label: str) -> "RngStream":
        return RngStream(seed=self.seed, path=self.path + (label_key(label),))

    def random(self, shape: Shape) -> Tensor:
        return self.generator.random(shape, dtype=DTYPE)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n).astype(np.int64)

    def integers(self, low: int, high: int, size: Shape) -> npt.NDArray[np.int64]:
        return self.generator.integers(low, high, size=size, dtype=np.int64)


def rng_uniform(stream: RngStream, lo: float, hi: float, shape: Shape) -> Tensor:
    """Draw i.i.d. uniform entries on [lo, hi)."""
    if not lo < hi:
        raise exceptions.ContractViolation(
            detail=f"uniform interval is empty: lo={lo}, hi={hi}"
        )
    return lo + (hi - lo) * stream.random(shape)


def rng_normal(stream: RngStream, shape: Shape) -> Tensor:
    """Draw standard normal entries with the Box-Muller transform.

    Pairs of uniforms (u1, u2) become ``sqrt(-2 ln u1) * cos(2 pi u2)``; u1 is
    mapped to (0, 1] so the logarithm is finite.
    """
    size = int(np.prod(shape, dtype=np.int64))
    if size == 0:
        return np.zeros(shape, dtype=DTYPE)
    uniforms = stream.random(2 * size)
    u1 = 1.0 - uniforms[0::2]
    u2 = uniforms[1::2]
    normals = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return normals.reshape(shape)
