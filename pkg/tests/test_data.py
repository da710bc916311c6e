import gzip
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_gan.data import (
    CIFAR_RECORD_BYTES,
    DATASETS,
    DatasetSpec,
    ImageBatch,
    load_cifar10_binary,
    load_mnist_idx,
    make_batches,
)
from adaptive_gan.errors import ArgumentError, ConsistencyError, FormatError


def write_idx_images(path, pixels, magic=0x00000803):
    n, h, w = pixels.shape
    path.write_bytes(struct.pack(">IIII", magic, n, h, w) + pixels.astype(np.uint8).tobytes())


def write_idx_labels(path, labels, magic=0x00000801):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + np.asarray(labels, np.uint8).tobytes())


@pytest.fixture
def mnist_files(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 28, 28))
    pixels[0, 0, 0], pixels[0, 0, 1] = 255, 0
    labels = [3, 1, 4, 1, 5]
    write_idx_images(tmp_path / "img", pixels)
    write_idx_labels(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", pixels, labels


def test_dataset_specs():
    assert DATASETS["mnist"].image_shape == (28, 28, 1)
    assert DATASETS["cifar10"].image_shape == (32, 32, 3)
    for spec in DATASETS.values():
        assert spec.flat_dim == spec.image_height * spec.image_width * spec.channels
        assert spec.num_classes == 10
    with pytest.raises(ArgumentError):
        DatasetSpec.named("svhn")


def test_load_mnist_idx(mnist_files):
    img, lab, pixels, labels = mnist_files
    batch = load_mnist_idx(str(img), str(lab))
    assert batch.images.shape == (5, 28, 28, 1)
    assert batch.images.dtype == torch.float32
    assert batch.images[0, 0, 0, 0] == 1.0
    assert batch.images[0, 0, 1, 0] == 0.0
    assert batch.labels.tolist() == labels
    np.testing.assert_allclose(batch.images[..., 0].numpy(), pixels / 255.0, rtol=0, atol=1e-7)


def test_load_mnist_gzip(tmp_path, mnist_files):
    img, lab, _, _ = mnist_files
    (tmp_path / "gz.gz").write_bytes(gzip.compress(img.read_bytes()))
    a = load_mnist_idx(str(tmp_path / "gz.gz"), str(lab))
    b = load_mnist_idx(str(img), str(lab))
    assert torch.equal(a.images, b.images)


def test_mnist_header_dims(tmp_path):
    write_idx_images(tmp_path / "img", np.zeros((3, 28, 28)))
    raw = (tmp_path / "img").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3])
    write_idx_labels(tmp_path / "lab", [0, 0, 0])
    assert load_mnist_idx(str(tmp_path / "img"), str(tmp_path / "lab")).images.shape == (3, 28, 28, 1)


def test_mnist_wrong_magic(tmp_path, mnist_files):
    _, lab, pixels, _ = mnist_files
    write_idx_images(tmp_path / "bad", pixels, magic=0x00000802)
    with pytest.raises(FormatError):
        load_mnist_idx(str(tmp_path / "bad"), str(lab))


def test_mnist_truncated(tmp_path, mnist_files):
    img, lab, _, _ = mnist_files
    (tmp_path / "short").write_bytes(img.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_mnist_idx(str(tmp_path / "short"), str(lab))


def test_mnist_count_mismatch(tmp_path, mnist_files):
    img, _, _, _ = mnist_files
    write_idx_labels(tmp_path / "lab4", [0, 1, 2, 3])
    with pytest.raises(ConsistencyError):
        load_mnist_idx(str(img), str(tmp_path / "lab4"))


def cifar_records(labels, rng):
    recs = []
    for lab in labels:
        recs.append(bytes([lab]) + rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes())
    return b"".join(recs)


def test_load_cifar10_binary(tmp_path):
    rng = np.random.default_rng(1)
    raw = cifar_records([7, 0, 9], rng)
    (tmp_path / "b1.bin").write_bytes(raw)
    (tmp_path / "b2.bin").write_bytes(cifar_records([2], rng))
    batch = load_cifar10_binary([str(tmp_path / "b1.bin"), str(tmp_path / "b2.bin")])
    assert batch.images.shape == (4, 32, 32, 3)
    assert batch.labels.tolist() == [7, 0, 9, 2]
    rec0 = np.frombuffer(raw[1:CIFAR_RECORD_BYTES], dtype=np.uint8)
    # channel-planar: red plane first, row-major
    assert batch.images[0, 0, 0, 0] == rec0[0] / 255.0
    assert batch.images[0, 0, 1, 0] == rec0[1] / 255.0
    assert batch.images[0, 0, 0, 1] == rec0[1024] / 255.0
    assert batch.images[0, 1, 0, 2] == rec0[2048 + 32] / 255.0


def test_cifar_bad_length(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3074))
    with pytest.raises(FormatError):
        load_cifar10_binary([str(tmp_path / "b.bin")])


def test_cifar_bad_label(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(FormatError):
        load_cifar10_binary([str(tmp_path / "b.bin")])


def test_image_batch_invariants():
    with pytest.raises(ArgumentError):
        ImageBatch(torch.full((2, 4, 4, 1), 1.5), torch.zeros(2, dtype=torch.long))
    with pytest.raises(ArgumentError):
        ImageBatch(torch.zeros(2, 4, 4, 1), torch.zeros(3, dtype=torch.long))
    with pytest.raises(ArgumentError):
        ImageBatch(torch.zeros(0, 4, 4, 1), torch.zeros(0, dtype=torch.long))


def small_batch(count):
    images = torch.linspace(0, 1, count)[:, None, None, None].expand(count, 2, 2, 1).contiguous()
    return ImageBatch(images, torch.arange(count) % 10)


def test_make_batches_sizes():
    assert [len(b) for b in make_batches(small_batch(10), 4, shuffle=False)] == [4, 4, 2]


def test_make_batches_errors():
    with pytest.raises(ArgumentError):
        make_batches(small_batch(10), 0)
    with pytest.raises(ArgumentError):
        make_batches(small_batch(10), 11)


def test_make_batches_determinism():
    data = small_batch(50)
    a = make_batches(data, 8, seed=3)
    b = make_batches(data, 8, seed=3)
    c = make_batches(data, 8, seed=4)
    assert all(torch.equal(x.labels, y.labels) and torch.equal(x.images, y.images) for x, y in zip(a, b))
    assert not all(torch.equal(x.images, y.images) for x, y in zip(a, c))


def test_make_batches_order_preserved():
    data = small_batch(9)
    out = make_batches(data, 4, shuffle=False)
    assert torch.equal(torch.cat([b.images for b in out]), data.images)


@settings(max_examples=50, deadline=None)
@given(count=st.integers(1, 60), batch_size=st.integers(1, 60), seed=st.integers(0, 2**31 - 1))
def test_batches_partition_input(count, batch_size, seed):
    batch_size = min(batch_size, count)
    data = small_batch(count)
    plain = make_batches(data, batch_size, shuffle=False)
    assert torch.equal(torch.cat([b.images for b in plain]), data.images)
    assert torch.equal(torch.cat([b.labels for b in plain]), data.labels)
    shuffled = make_batches(data, batch_size, seed=seed)
    values = torch.cat([b.images[:, 0, 0, 0] for b in shuffled])
    assert torch.equal(values.sort().values, data.images[:, 0, 0, 0].sort().values)


def test_reload_bit_identical(mnist_files):
    img, lab, _, _ = mnist_files
    a, b = load_mnist_idx(str(img), str(lab)), load_mnist_idx(str(img), str(lab))
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
