"""Little-endian binary codecs for network checkpoints and datasets."""

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

import io
import pathlib
import struct

import numpy as np

from . import data, exceptions, layers

NETWORK_MAGIC = b"FNRM1"
DATASET_MAGIC = b"FNDS1"

KIND_TAGS = {
    layers.LayerKind.linear: 0,
    layers.LayerKind.relu: 1,
    layers.LayerKind.bn: 2,
    layers.LayerKind.fn: 3,
    layers.LayerKind.nll: 4,
}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}


class Reader:
    """Sequential reader raising DataFormatError on truncated input."""

    def __init__(self, blob: bytes, source: str) -> None:
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise exceptions.DataFormatError(
                detail=f"{self.source}: truncated at byte {self.offset}"
            )
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int | float, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()

    def finish(self) -> None:
        if self.offset != len(self.blob):
            raise exceptions.DataFormatError(
                detail=f"{self.source}: {len(self.blob) - self.offset} trailing bytes"
            )


def check_magic(reader: Reader, magic: bytes) -> None:
    found = reader.take(len(magic))
    if found != magic:
        raise exceptions.DataFormatError(
            detail=f"{reader.source}: magic {found!r}, expected {magic!r}"
        )


def network_to_bytes(net: layers.Network) -> bytes:
    """Serialize the layers of a network (the mode is not stored)."""
    out = io.BytesIO()
    out.write(NETWORK_MAGIC)
    out.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        out.write(struct.pack("<B", KIND_TAGS[layer.kind]))
        if layer.weights is not None:
            W = layer.weights.W
            out.write(struct.pack("<II", *W.shape))
            out.write(W.astype("<f8").tobytes())
        elif layer.norm is not None:
            norm = layer.norm
            out.write(struct.pack("<I", norm.dim))
            out.write(norm.mu.astype("<f8").tobytes())
            out.write(norm.nu.astype("<f8").tobytes())
            out.write(struct.pack("<dd", norm.alpha, norm.eps))
    return out.getvalue()


def network_from_bytes(blob: bytes, source: str = "<bytes>") -> layers.Network:
    reader = Reader(blob, source)
    check_magic(reader, NETWORK_MAGIC)
    (count,) = reader.unpack("<I")
    specs = []
    for _ in range(int(count)):
        (tag,) = reader.unpack("<B")
        kind = TAG_KINDS.get(int(tag))
        if kind is None:
            raise exceptions.DataFormatError(detail=f"{source}: unknown layer tag {tag}")
        if kind is layers.LayerKind.linear:
            rows, cols = reader.unpack("<II")
            W = reader.array("<f8", int(rows) * int(cols)).reshape(int(rows), int(cols))
            specs.append(layers.LayerSpec.linear(W))
        elif kind in layers.NORM_KINDS:
            (d,) = reader.unpack("<I")
            mu = reader.array("<f8", int(d))
            nu = reader.array("<f8", int(d))
            alpha, eps = reader.unpack("<dd")
            norm = layers.NormState(mu=mu, nu=nu, alpha=float(alpha), eps=float(eps))
            specs.append(layers.LayerSpec(kind=kind, norm=norm))
        else:
            specs.append(layers.LayerSpec(kind=kind))
    reader.finish()
    return layers.Network(layers=specs)


def dump_network(net: layers.Network, path: str | pathlib.Path) -> None:
    pathlib.Path(path).write_bytes(network_to_bytes(net))


def load_network(path: str | pathlib.Path) -> layers.Network:
    return network_from_bytes(read_blob(path), source=str(path))


def dataset_to_bytes(ds: data.Dataset) -> bytes:
    provenance = ds.provenance.encode("utf-8")
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<QQQ", ds.n_samples, ds.dim, ds.class_count))
    out.write(struct.pack("<I", len(provenance)))
    out.write(provenance)
    out.write(ds.features.astype("<f8").tobytes())
    out.write(ds.labels.astype("<i8").tobytes())
    return out.getvalue()


def dataset_from_bytes(blob: bytes, source: str = "<bytes>") -> data.Dataset:
    reader = Reader(blob, source)
    check_magic(reader, DATASET_MAGIC)
    n, d, c = (int(value) for value in reader.unpack("<QQQ"))
    (length,) = reader.unpack("<I")
    provenance = reader.take(int(length)).decode("utf-8")
    features = reader.array("<f8", n * d).reshape(n, d)
    labels = reader.array("<i8", n)
    reader.finish()
    return data.Dataset(
        features=features, labels=labels, class_count=c, provenance=provenance
    )


def dump_dataset(ds: data.Dataset, path: str | pathlib.Path) -> None:
    pathlib.Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: str | pathlib.Path) -> data.Dataset:
    """Read a dataset written by `dump_dataset`.

    Raises
    ------
    exceptions.MissingDatasetFiles
        Raised if the file does not exist.
    exceptions.DataFormatError
        Raised on a wrong magic, truncated or oversized file.
    """
    return dataset_from_bytes(read_blob(path), source=str(path))


def read_blob(path: str | pathlib.Path) -> bytes:
    try:
        return pathlib.Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise exceptions.MissingDatasetFiles(detail=f"{path} does not exist") from exc
