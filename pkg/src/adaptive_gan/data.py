"""
Dataset ingestion for MNIST (IDX files) and CIFAR-10 (binary batches).

Every loader returns an :class:`ImageBatch` with channel-last float32 images
in [0, 1] and int64 labels. Nothing here downloads anything; point the
loaders at the canonical files as shipped.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from adaptive_gan.errors import ArgumentError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    image_height: int
    image_width: int
    channels: int
    num_classes: int

    def __post_init__(self):
        if min(self.image_height, self.image_width, self.channels, self.num_classes) < 1:
            raise ArgumentError(f"non-positive dimension in {self}")

    @property
    def flat_dim(self):
        return self.image_height * self.image_width * self.channels

    @property
    def image_shape(self):
        return (self.image_height, self.image_width, self.channels)

    @classmethod
    def named(cls, name):
        try:
            return DATASETS[name]
        except KeyError:
            raise ArgumentError(f"unknown dataset {name!r}; expected one of {sorted(DATASETS)}")


DATASETS = {
    "mnist": DatasetSpec("mnist", 28, 28, 1, 10),
    "cifar10": DatasetSpec("cifar10", 32, 32, 3, 10),
}


@dataclass
class ImageBatch:
    """Images ``[B, H, W, C]`` in [0, 1] with integer labels ``[B]``."""

    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be [B, H, W, C], got shape {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ArgumentError("labels must be [B] and agree with images on B")
        if self.images.shape[0] < 1:
            raise ArgumentError("empty batch")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ArgumentError("pixel values outside [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index):
        return ImageBatch(self.images[index], self.labels[index])


def _read_bytes(path):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw, expected_magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    expected = int(np.prod(dims))
    if payload.size < expected:
        raise FormatError(f"{path}: payload has {payload.size} bytes, header promises {expected}")
    return payload[:expected].reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Load an MNIST image/label IDX pair (plain or gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(-1)
    return ImageBatch(x, torch.from_numpy(labels.astype(np.int64)))


def load_cifar10_binary(batch_paths):
    """Load and concatenate CIFAR-10 binary batch files.

    Each record is one label byte followed by 1024 red, 1024 green and 1024
    blue bytes (row-major planes).
    """
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    if not batch_paths:
        raise ArgumentError("no CIFAR-10 batch files given")
    images, labels = [], []
    for path in batch_paths:
        raw = np.frombuffer(_read_bytes(path), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        if records[:, 0].max() >= 10:
            raise FormatError(f"{path}: label byte {records[:, 0].max()} >= 10")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    x = np.concatenate(images).astype(np.float32) / 255.0
    return ImageBatch(torch.from_numpy(x), torch.from_numpy(np.concatenate(labels)))


def load_dataset(name, data_dir, split="train", cifar_files=None):
    """Load a canonical split from ``data_dir`` by file naming convention."""
    if split not in ("train", "test"):
        raise ArgumentError(f"split must be train or test, got {split!r}")
    if name == "mnist":
        img, lab = MNIST_FILES[split]
        return load_mnist_idx(os.path.join(data_dir, img), os.path.join(data_dir, lab))
    if name == "cifar10":
        files = cifar_files if cifar_files else CIFAR_FILES[split]
        return load_cifar10_binary([os.path.join(data_dir, f) for f in files])
    raise ArgumentError(f"unknown dataset {name!r}")


def make_batches(data, batch_size, seed=0, shuffle=True):
    """Partition ``data`` into consecutive batches; the last one may be short.

    With ``shuffle`` the permutation depends only on ``seed``.
    """
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be positive, got {batch_size}")
    count = len(data)
    if batch_size > count:
        raise ArgumentError(f"batch_size {batch_size} exceeds sample count {count}")
    if shuffle:
        order = torch.from_numpy(np.random.default_rng(seed).permutation(count))
        return [data.subset(order[i : i + batch_size]) for i in range(0, count, batch_size)]
    return [data.subset(slice(i, i + batch_size)) for i in range(0, count, batch_size)]
