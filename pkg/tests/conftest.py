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

from fullnorm import data, layers, tensor_core


@pytest.fixture
def toy3() -> data.Dataset:
    return data.gen_toy3()


@pytest.fixture
def stream() -> tensor_core.RngStream:
    return tensor_core.RngStream(seed=0)


@pytest.fixture
def mixture() -> data.Dataset:
    train, _ = data.gen_gaussian_mixture(n=48, d=4, c=3, seed=0, test_n=12)
    return train


@pytest.fixture
def fn_net(stream: tensor_core.RngStream) -> layers.Network:
    """``fn -> linear -> relu -> fn -> linear -> nll`` on 4 features, 3 classes."""
    return layers.Network(
        layers=[
            layers.LayerSpec.fn(4),
            layers.LayerSpec.linear(layers.init_linear(stream.derive("w0"), 4, 5)),
            layers.LayerSpec.relu(),
            layers.LayerSpec.fn(5),
            layers.LayerSpec.linear(layers.init_linear(stream.derive("w1"), 5, 3)),
            layers.LayerSpec.nll(),
        ]
    )


@pytest.fixture
def zero_linear() -> layers.Network:
    return layers.Network(
        layers=[layers.LayerSpec.linear(np.zeros((3, 4))), layers.LayerSpec.nll()]
    )
