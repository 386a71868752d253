"""Datasets, loaders for MNIST and CIFAR-10 and batch construction strategies."""

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
import struct
import threading
from typing import Any, Iterator, Sequence

import attrs
import cachetools
import cachetools.keys
import numpy as np
import numpy.typing as npt
import structlog

from . import config, exceptions, models, tensor_core
from .tensor_core import Tensor

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

SETTINGS = config.settings

Indices = npt.NDArray[np.int64]

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
MNIST_CLASSES = 10
CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR_CLASSES = 10

MNIST_FILES = {
    True: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    False: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    True: tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    False: ("test_batch.bin",),
}


def read_only_features(data: Any) -> Tensor:
    features = np.array(data, dtype=np.float64, order="C")
    features.flags.writeable = False
    return features


def read_only_labels(data: Any) -> npt.NDArray[np.int64]:
    labels = np.array(data, dtype=np.int64)
    labels.flags.writeable = False
    return labels


@attrs.define(frozen=True)
class Dataset:
    """Labelled samples; arrays are read-only so datasets can be shared."""

    features: Tensor = attrs.field(converter=read_only_features)
    labels: npt.NDArray[np.int64] = attrs.field(converter=read_only_labels)
    class_count: int
    provenance: str = ""

    def __attrs_post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise exceptions.ContractViolation(
                detail=f"features must be a non-empty N x d table, got {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise exceptions.ContractViolation(
                detail=f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples"
            )
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise exceptions.ContractViolation(
                detail=f"labels must lie in [0, {self.class_count})"
            )

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Indices, provenance: str | None = None) -> "Dataset":
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            provenance=self.provenance if provenance is None else provenance,
        )


def gen_toy3() -> Dataset:
    """Three samples ``[i, i, i]`` labelled ``i`` for ``i`` in 0, 1, 2."""
    return Dataset(
        features=[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
        labels=[0, 1, 2],
        class_count=3,
        provenance="toy3",
    )


def large_variation_split(
    stream: tensor_core.RngStream, n: int, d: int, c: int, scale_max: float, noise: bool
) -> tuple[Tensor, npt.NDArray[np.int64]]:
    labels = stream.derive("labels").integers(0, c, n)
    values = tensor_core.rng_uniform(stream.derive("values"), 0.0, scale_max, n)
    if noise:
        features = tensor_core.rng_normal(stream.derive("noise"), (n, d))
    else:
        features = np.zeros((n, d))
    features[np.arange(n), labels] += values
    return features, labels


def gen_large_variation(
    n: int = 10000,
    d: int = 1000,
    c: int = 1000,
    scale_max: float = 50.0,
    test_n: int = 100,
    seed: int = 0,
    noise: bool = True,
) -> tuple[Dataset, Dataset]:
    """Samples of class ``i`` carry a uniform ``[0, scale_max)`` value at index ``i``.

    Standard normal noise is added to every element unless `noise` is off.

    Raises
    ------
    exceptions.ContractViolation
        Raised if there are more classes than dimensions.
    """
    if c > d:
        raise exceptions.ContractViolation(
            detail=f"{c} classes cannot be encoded in {d} dimensions"
        )
    stream = tensor_core.RngStream(seed=seed).derive("large_variation")
    provenance = f"large_variation:n={n},d={d},c={c},seed={seed}"
    train_x, train_y = large_variation_split(
        stream.derive("train"), n, d, c, scale_max, noise
    )
    test_x, test_y = large_variation_split(
        stream.derive("test"), test_n, d, c, scale_max, noise
    )
    return (
        Dataset(features=train_x, labels=train_y, class_count=c, provenance=provenance),
        Dataset(features=test_x, labels=test_y, class_count=c, provenance=provenance),
    )


def gen_gaussian_mixture(
    n: int = 512,
    d: int = 8,
    c: int = 4,
    spread: float = 2.0,
    seed: int = 0,
    test_n: int = 128,
) -> tuple[Dataset, Dataset]:
    """Class centres uniform on ``[-spread, spread]^d`` plus unit normal noise."""
    stream = tensor_core.RngStream(seed=seed).derive("gaussian_mixture")
    centres = tensor_core.rng_uniform(stream.derive("centres"), -spread, spread, (c, d))
    provenance = f"gaussian_mixture:n={n},d={d},c={c},seed={seed}"
    splits = []
    for name, size in (("train", n), ("test", test_n)):
        split = stream.derive(name)
        labels = split.derive("labels").integers(0, c, size)
        features = centres[labels] + tensor_core.rng_normal(
            split.derive("noise"), (size, d)
        )
        splits.append(
            Dataset(features=features, labels=labels, class_count=c, provenance=provenance)
        )
    return splits[0], splits[1]


def resolved(path: str | pathlib.Path) -> str:
    return str(pathlib.Path(path).resolve())


def read_file(path: str | pathlib.Path) -> bytes:
    try:
        return pathlib.Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise exceptions.MissingDatasetFiles(detail=f"{path} does not exist") from exc


def parse_idx_header(
    blob: bytes, path: str | pathlib.Path, magic: int, dims: int
) -> tuple[int, ...]:
    header_size = 4 * (dims + 1)
    if len(blob) < header_size:
        raise exceptions.DataFormatError(detail=f"{path}: truncated IDX header")
    found, *shape = struct.unpack_from(f">{dims + 1}i", blob)
    if found != magic:
        raise exceptions.DataFormatError(
            detail=f"{path}: magic number {found}, expected {magic}"
        )
    expected = header_size + int(np.prod(shape, dtype=np.int64))
    if len(blob) != expected:
        raise exceptions.DataFormatError(
            detail=f"{path}: {len(blob)} bytes, header announces {expected}"
        )
    return tuple(shape)


@cachetools.cached(
    cache=cachetools.LRUCache(maxsize=SETTINGS.dataset_cache_maxsize),
    lock=threading.Lock(),
    key=lambda images_path, labels_path: cachetools.keys.hashkey(
        resolved(images_path), resolved(labels_path)
    ),
)
def load_mnist_idx(
    images_path: str | pathlib.Path, labels_path: str | pathlib.Path
) -> Dataset:
    """Read an MNIST image/label file pair in IDX format.

    Parameters
    ----------
    images_path : str | pathlib.Path
        IDX3 file (magic 2051) with N x rows x cols unsigned bytes.
    labels_path : str | pathlib.Path
        IDX1 file (magic 2049) with N unsigned bytes.

    Returns
    -------
    Dataset
        Flattened images scaled to [0, 1], 10 classes.
    """
    images = read_file(images_path)
    labels = read_file(labels_path)
    count, rows, cols = parse_idx_header(images, images_path, MNIST_IMAGE_MAGIC, 3)
    (label_count,) = parse_idx_header(labels, labels_path, MNIST_LABEL_MAGIC, 1)
    if count != label_count:
        raise exceptions.DataFormatError(
            detail=f"{count} images but {label_count} labels"
        )
    pixels = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    label_ids = np.frombuffer(labels, dtype=np.uint8, offset=8)
    if np.any(label_ids >= MNIST_CLASSES):
        raise exceptions.DataFormatError(
            detail=f"{labels_path}: label {int(label_ids.max())} out of range"
        )
    logger.info("loaded mnist", images=str(images_path), samples=count)
    return Dataset(
        features=pixels / 255.0,
        labels=label_ids,
        class_count=MNIST_CLASSES,
        provenance=f"mnist:{pathlib.Path(images_path).name}",
    )


@cachetools.cached(
    cache=cachetools.LRUCache(maxsize=SETTINGS.dataset_cache_maxsize),
    lock=threading.Lock(),
    key=lambda paths: cachetools.keys.hashkey(*(resolved(path) for path in paths)),
)
def load_cifar10_bin(paths: Sequence[str | pathlib.Path]) -> Dataset:
    """Read CIFAR-10 binary batches of 3073-byte records (label, 3072 pixels)."""
    if not paths:
        raise exceptions.MissingDatasetFiles(detail="no CIFAR-10 batch file given")
    records = []
    for path in paths:
        blob = read_file(path)
        if not blob or len(blob) % CIFAR_RECORD_BYTES:
            raise exceptions.DataFormatError(
                detail=f"{path}: {len(blob)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records.append(
            np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        )
    table = np.concatenate(records)
    if np.any(table[:, 0] >= CIFAR_CLASSES):
        raise exceptions.DataFormatError(
            detail=f"label {int(table[:, 0].max())} out of range"
        )
    logger.info("loaded cifar10", files=len(paths), samples=table.shape[0])
    return Dataset(
        features=table[:, 1:] / 255.0,
        labels=table[:, 0],
        class_count=CIFAR_CLASSES,
        provenance=f"cifar10:{','.join(pathlib.Path(path).name for path in paths)}",
    )


def existing_files(root: pathlib.Path, names: Sequence[str]) -> list[pathlib.Path]:
    paths = [root / name for name in names]
    missing = [str(path) for path in paths if not path.is_file()]
    if missing:
        raise exceptions.MissingDatasetFiles(detail=f"missing: {', '.join(missing)}")
    return paths


def mnist_dataset(root: str | pathlib.Path | None, train: bool) -> Dataset:
    base = SETTINGS.data_path if root is None else pathlib.Path(root)
    if (base / "mnist").is_dir():
        base = base / "mnist"
    images, labels = existing_files(base, MNIST_FILES[train])
    return load_mnist_idx(images, labels)


def cifar_dataset(root: str | pathlib.Path | None, train: bool) -> Dataset:
    base = SETTINGS.data_path if root is None else pathlib.Path(root)
    if (base / "cifar-10-batches-bin").is_dir():
        base = base / "cifar-10-batches-bin"
    return load_cifar10_bin(tuple(existing_files(base, CIFAR_FILES[train])))


def scale_samples(ds: Dataset, lo: float, hi: float, seed: int) -> Dataset:
    """Multiply each sample by an independent uniform draw on ``[lo, hi)``."""
    stream = tensor_core.RngStream(seed=seed).derive("scale_samples")
    multipliers = tensor_core.rng_uniform(stream, lo, hi, ds.n_samples)
    return Dataset(
        features=ds.features * multipliers[:, None],
        labels=ds.labels,
        class_count=ds.class_count,
        provenance=f"{ds.provenance}|scaled({lo!r},{hi!r},seed={seed})",
    )


def cap_samples(ds: Dataset, cap: int, seed: int) -> Dataset:
    """Keep at most `cap` samples, stratified by label.

    Each class gets ``floor(cap * n_c / N)`` samples and the remaining slots go
    to the largest fractional parts. The original sample order is preserved.
    """
    if cap < 1:
        raise exceptions.ContractViolation(detail=f"cap must be positive, got {cap}")
    if cap >= ds.n_samples:
        return ds
    classes, counts = np.unique(ds.labels, return_counts=True)
    exact = cap * counts / ds.n_samples
    quotas = np.floor(exact).astype(np.int64)
    remainder = cap - int(quotas.sum())
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1
    stream = tensor_core.RngStream(seed=seed).derive("cap_samples")
    chosen = []
    for label, quota in zip(classes, quotas):
        members = np.flatnonzero(ds.labels == label)
        picked = stream.derive(f"class{int(label)}").permutation(members.shape[0])
        chosen.append(members[picked[:quota]])
    kept = np.sort(np.concatenate(chosen))
    return ds.subset(kept, provenance=f"{ds.provenance}|cap={cap}")


@attrs.define(frozen=True)
class BatchPlan:
    strategy: models.BatchStrategy
    batch_size: int
    batches: list[Indices]
    seed: int
    epoch: int = 0
    max_labels: int = 3
    workers: int = 2

    def __iter__(self) -> Iterator[Indices]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def chunk(indices: Indices, b: int) -> list[Indices]:
    return [indices[start : start + b] for start in range(0, indices.shape[0], b)]


def label_groups(
    ds: Dataset, stream: tensor_core.RngStream
) -> list[tuple[int, Indices]]:
    groups = []
    for label in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == label)
        order = stream.derive(f"label{int(label)}").permutation(members.shape[0])
        groups.append((int(label), members[order]))
    return groups


def make_batch_plan(
    ds: Dataset,
    strategy: models.BatchStrategy,
    b: int,
    seed: int,
    epoch: int = 0,
    max_labels: int = 3,
    workers: int = 2,
) -> BatchPlan:
    """Partition the sample indices into batches of at most `b`.

    Parameters
    ----------
    ds : Dataset
        Dataset to cover.
    strategy : models.BatchStrategy
        ``shuffled`` chunks a random permutation; ``single_label`` chunks each
        label group; ``max_k_labels`` chunks blocks of `max_labels`
        consecutive label groups; ``partitioned`` chunks `workers` contiguous
        shards independently; ``iid`` draws ``ceil(N / b)`` batches of
        exactly `b` indices uniformly with replacement.
    b : int
        Batch size; tail batches are kept.
    seed : int
        Plan seed; `epoch` selects the reshuffle of a given epoch.

    Returns
    -------
    BatchPlan
        Batches covering every index exactly once, except for ``iid``.
    """
    if not 1 <= b <= ds.n_samples:
        raise exceptions.ContractViolation(
            detail=f"batch size {b} outside [1, {ds.n_samples}]"
        )
    stream = tensor_core.RngStream(seed=seed).derive(f"epoch{epoch}")
    batches: list[Indices] = []
    if strategy is models.BatchStrategy.shuffled:
        batches = chunk(stream.permutation(ds.n_samples), b)
    elif strategy is models.BatchStrategy.single_label:
        for _, members in label_groups(ds, stream):
            batches.extend(chunk(members, b))
    elif strategy is models.BatchStrategy.max_k_labels:
        if max_labels < 1:
            raise exceptions.ContractViolation(
                detail=f"max_labels must be positive, got {max_labels}"
            )
        groups = label_groups(ds, stream)
        for start in range(0, len(groups), max_labels):
            block = np.concatenate([members for _, members in groups[start : start + max_labels]])
            mixed = stream.derive(f"block{start}").permutation(block.shape[0])
            batches.extend(chunk(block[mixed], b))
    elif strategy is models.BatchStrategy.iid:
        count = -(-ds.n_samples // b)
        batches = list(stream.integers(0, ds.n_samples, (count, b)))
    else:
        if workers < 1:
            raise exceptions.ContractViolation(
                detail=f"workers must be positive, got {workers}"
            )
        shards = np.array_split(np.arange(ds.n_samples, dtype=np.int64), workers)
        for worker, shard in enumerate(shards):
            if shard.shape[0] == 0:
                continue
            order = stream.derive(f"worker{worker}").permutation(shard.shape[0])
            batches.extend(chunk(shard[order], b))
    return BatchPlan(
        strategy=strategy,
        batch_size=b,
        batches=batches,
        seed=seed,
        epoch=epoch,
        max_labels=max_labels,
        workers=workers,
    )


def full_plan(ds: Dataset, seed: int = 0) -> BatchPlan:
    """The plan whose only batch is the whole dataset."""
    return make_batch_plan(ds, models.BatchStrategy.shuffled, ds.n_samples, seed)
