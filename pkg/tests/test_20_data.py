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

import pathlib
import struct

import numpy as np
import pytest

from fullnorm import data, exceptions, models, tensor_core


def write_mnist_pair(
    root: pathlib.Path, stem: str, pixels: np.ndarray, labels: list[int], magic: int = 2051
) -> tuple[pathlib.Path, pathlib.Path]:
    count, rows, cols = pixels.shape
    images_path = root / f"{stem}-images-idx3-ubyte"
    labels_path = root / f"{stem}-labels-idx1-ubyte"
    images_path.write_bytes(
        struct.pack(">iiii", magic, count, rows, cols) + pixels.astype(np.uint8).tobytes()
    )
    labels_path.write_bytes(struct.pack(">ii", 2049, len(labels)) + bytes(labels))
    return images_path, labels_path


def test_dataset(toy3: data.Dataset) -> None:
    assert toy3.n_samples == 3
    assert toy3.dim == 3
    mean, var = tensor_core.column_stats(toy3.features)
    np.testing.assert_allclose(mean, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(var, [2.0 / 3.0] * 3)
    np.testing.assert_array_equal(data.gen_toy3().features, toy3.features)
    assert toy3.labels.tolist() == [0, 1, 2]

    with pytest.raises(ValueError):
        toy3.features[0, 0] = 5.0

    with pytest.raises(exceptions.ContractViolation):
        data.Dataset(features=np.zeros((2, 3)), labels=[0, 3], class_count=3)

    with pytest.raises(exceptions.ContractViolation):
        data.Dataset(features=np.zeros((2, 3)), labels=[0], class_count=3)


def test_gen_large_variation() -> None:
    train, test = data.gen_large_variation(
        n=60, d=12, c=6, scale_max=50.0, test_n=10, seed=0, noise=False
    )
    assert train.features.shape == (60, 12)
    assert test.features.shape == (10, 12)
    rows = np.arange(train.n_samples)
    signal = train.features[rows, train.labels]
    assert np.all((signal >= 0.0) & (signal < 50.0))
    assert np.count_nonzero(train.features) <= train.n_samples
    off_label = train.features.copy()
    off_label[rows, train.labels] = 0.0
    assert not off_label.any()

    noisy, _ = data.gen_large_variation(n=60, d=12, c=6, test_n=10, seed=0)
    again, _ = data.gen_large_variation(n=60, d=12, c=6, test_n=10, seed=0)
    np.testing.assert_array_equal(noisy.features, again.features)
    np.testing.assert_array_equal(noisy.labels, train.labels)

    with pytest.raises(exceptions.ContractViolation):
        data.gen_large_variation(n=10, d=3, c=4)


def test_gen_gaussian_mixture() -> None:
    train, test = data.gen_gaussian_mixture(n=40, d=3, c=2, seed=5, test_n=8)
    assert train.features.shape == (40, 3)
    assert test.features.shape == (8, 3)
    assert train.class_count == 2
    assert set(train.labels.tolist()) <= {0, 1}


def test_load_mnist_idx(tmp_path: pathlib.Path) -> None:
    pixels = np.array([[[0, 255], [51, 102]], [[255, 255], [0, 0]]])
    images_path, labels_path = write_mnist_pair(tmp_path, "good", pixels, [3, 7])
    ds = data.load_mnist_idx(images_path, labels_path)

    assert ds.features.shape == (2, 4)
    assert ds.class_count == 10
    np.testing.assert_allclose(ds.features[0], [0.0, 1.0, 0.2, 0.4])
    assert ds.labels.tolist() == [3, 7]
    assert data.load_mnist_idx(images_path, labels_path) is ds

    images_path, labels_path = write_mnist_pair(tmp_path, "magic", pixels, [3, 7], magic=2050)
    with pytest.raises(exceptions.DataFormatError):
        data.load_mnist_idx(images_path, labels_path)

    images_path, labels_path = write_mnist_pair(tmp_path, "label", pixels, [3, 10])
    with pytest.raises(exceptions.DataFormatError):
        data.load_mnist_idx(images_path, labels_path)

    images_path, labels_path = write_mnist_pair(tmp_path, "count", pixels, [3])
    with pytest.raises(exceptions.DataFormatError):
        data.load_mnist_idx(images_path, labels_path)

    truncated = tmp_path / "truncated-images-idx3-ubyte"
    truncated.write_bytes(images_path.read_bytes()[:-1])
    with pytest.raises(exceptions.DataFormatError):
        data.load_mnist_idx(truncated, labels_path)

    with pytest.raises(exceptions.MissingDatasetFiles):
        data.load_mnist_idx(tmp_path / "absent", labels_path)


def test_mnist_dataset(tmp_path: pathlib.Path) -> None:
    root = tmp_path / "mnist"
    root.mkdir()
    pixels = np.zeros((3, 2, 2))
    write_mnist_pair(root, "train", pixels, [0, 1, 2])
    ds = data.mnist_dataset(tmp_path, train=True)
    assert ds.n_samples == 3

    with pytest.raises(exceptions.MissingDatasetFiles):
        data.mnist_dataset(tmp_path, train=False)


def test_load_cifar10_bin(tmp_path: pathlib.Path) -> None:
    records = np.zeros((2, data.CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[0, 0] = 4
    records[1, 0] = 9
    records[1, 1:] = 255
    batch = tmp_path / "data_batch_1.bin"
    batch.write_bytes(records.tobytes())
    ds = data.load_cifar10_bin((batch,))

    assert ds.features.shape == (2, 3072)
    assert ds.labels.tolist() == [4, 9]
    assert ds.features[1].min() == 1.0

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(records.tobytes()[:-5])
    with pytest.raises(exceptions.DataFormatError):
        data.load_cifar10_bin((truncated,))

    records[0, 0] = 10
    bad_label = tmp_path / "bad_label.bin"
    bad_label.write_bytes(records.tobytes())
    with pytest.raises(exceptions.DataFormatError):
        data.load_cifar10_bin((bad_label,))

    with pytest.raises(exceptions.MissingDatasetFiles):
        data.cifar_dataset(tmp_path, train=False)


def test_scale_samples() -> None:
    ds = data.Dataset(
        features=np.vstack([np.zeros((1, 3)), np.ones((99, 3))]),
        labels=np.zeros(100),
        class_count=1,
    )
    scaled = data.scale_samples(ds, -2.5, 2.5, seed=3)
    assert not scaled.features[0].any()
    multipliers = scaled.features[1:, 0]
    assert np.all((multipliers > -2.5) & (multipliers < 2.5))
    np.testing.assert_array_equal(multipliers, scaled.features[1:, 2])
    np.testing.assert_array_equal(
        data.scale_samples(ds, -2.5, 2.5, seed=3).features, scaled.features
    )


def test_cap_samples() -> None:
    labels = [0] * 6 + [1] * 3 + [2]
    ds = data.Dataset(
        features=np.arange(10.0)[:, None], labels=labels, class_count=3, provenance="x"
    )
    capped = data.cap_samples(ds, 5, seed=0)

    assert capped.n_samples == 5
    assert np.bincount(capped.labels, minlength=3).tolist() == [3, 2, 0]
    assert np.all(np.diff(capped.features[:, 0]) > 0)
    assert capped.provenance == "x|cap=5"
    assert data.cap_samples(ds, 20, seed=0) is ds
    np.testing.assert_array_equal(data.cap_samples(ds, 5, seed=0).features, capped.features)


def test_make_batch_plan() -> None:
    ds = data.Dataset(features=np.zeros((4, 1)), labels=[0, 0, 1, 1], class_count=2)
    plan = data.make_batch_plan(ds, models.BatchStrategy.single_label, 2, seed=0)
    assert len(plan) == 2
    for batch in plan:
        assert len(set(ds.labels[batch].tolist())) == 1

    plan = data.make_batch_plan(ds, models.BatchStrategy.shuffled, 4, seed=0)
    assert len(plan) == 1
    assert sorted(plan.batches[0].tolist()) == [0, 1, 2, 3]

    with pytest.raises(exceptions.ContractViolation):
        data.make_batch_plan(ds, models.BatchStrategy.shuffled, 0, seed=0)

    with pytest.raises(exceptions.ContractViolation):
        data.make_batch_plan(ds, models.BatchStrategy.shuffled, 5, seed=0)


def test_make_batch_plan_strategies() -> None:
    labels = np.repeat(np.arange(6), 5)
    ds = data.Dataset(features=np.zeros((30, 2)), labels=labels, class_count=6)
    for strategy in set(models.BatchStrategy) - {models.BatchStrategy.iid}:
        plan = data.make_batch_plan(ds, strategy, 4, seed=11, max_labels=2, workers=3)
        again = data.make_batch_plan(ds, strategy, 4, seed=11, max_labels=2, workers=3)
        covered = np.sort(np.concatenate(plan.batches))
        np.testing.assert_array_equal(covered, np.arange(30))
        assert all(batch.shape[0] <= 4 for batch in plan)
        for left, right in zip(plan, again):
            np.testing.assert_array_equal(left, right)

    plan = data.make_batch_plan(ds, models.BatchStrategy.max_k_labels, 4, seed=1, max_labels=2)
    assert all(len(set(labels[batch].tolist())) <= 2 for batch in plan)

    plan = data.make_batch_plan(ds, models.BatchStrategy.partitioned, 4, seed=1, workers=3)
    assert all(np.unique(batch // 10).shape[0] == 1 for batch in plan)

    first = data.make_batch_plan(ds, models.BatchStrategy.shuffled, 30, seed=1, epoch=0)
    second = data.make_batch_plan(ds, models.BatchStrategy.shuffled, 30, seed=1, epoch=1)
    assert not np.array_equal(first.batches[0], second.batches[0])

    full = data.full_plan(ds)
    assert len(full) == 1 and full.batch_size == 30


def test_make_batch_plan_iid() -> None:
    labels = np.repeat(np.arange(6), 5)
    ds = data.Dataset(features=np.zeros((30, 2)), labels=labels, class_count=6)
    plan = data.make_batch_plan(ds, models.BatchStrategy.iid, 4, seed=11)
    again = data.make_batch_plan(ds, models.BatchStrategy.iid, 4, seed=11)

    assert len(plan) == 8
    assert all(batch.shape == (4,) for batch in plan)
    for left, right in zip(plan, again):
        np.testing.assert_array_equal(left, right)

    draws = np.concatenate(
        [
            np.concatenate(data.make_batch_plan(ds, models.BatchStrategy.iid, 10, 0, epoch).batches)
            for epoch in range(50)
        ]
    )
    assert draws.min() == 0 and draws.max() == 29
    # with replacement, so a full epoch repeats some indices
    assert np.unique(draws[:30]).shape[0] < 30
