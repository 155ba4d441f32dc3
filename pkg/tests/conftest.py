import numpy as np
import pytest

from gatedssl.datasets import (
    CIFAR10_RECORD,
    CIFAR100_RECORD,
    serialize_cifar10_record,
    serialize_cifar100_record,
)


@pytest.fixture
def distinct_image():
    """8x8 image whose pixel values are all distinct and lie in (0, 1)."""
    rng = np.random.default_rng(7)
    values = rng.permutation(3 * 8 * 8).astype(np.float64) + 1.0
    return (values / (values.size + 1)).reshape(3, 8, 8)


def write_mini_cifar10(root, per_class=12, seed=0):
    """Five train batches + test batch with `per_class` images per class."""
    rng = np.random.default_rng(seed)
    base = root / "cifar-10-batches-bin"
    base.mkdir()
    records = []
    for label in range(10):
        for _ in range(per_class):
            img = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
            records.append(serialize_cifar10_record(label, img / 255.0))
    rng.shuffle(records)
    chunk = max(1, len(records) // 5)
    for i in range(5):
        part = records[i * chunk : (i + 1) * chunk] if i < 4 else records[4 * chunk :]
        (base / f"data_batch_{i + 1}.bin").write_bytes(b"".join(part))
    test = [
        serialize_cifar10_record(label, rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8) / 255.0)
        for label in range(10)
        for _ in range(2)
    ]
    (base / "test_batch.bin").write_bytes(b"".join(test))
    return base


def write_mini_cifar100(root, per_class=3, num_classes=100, seed=0):
    rng = np.random.default_rng(seed)
    base = root / "cifar-100-binary"
    base.mkdir()
    train = []
    for fine in range(num_classes):
        for _ in range(per_class):
            img = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
            train.append(serialize_cifar100_record(fine % 20, fine, img / 255.0))
    (base / "train.bin").write_bytes(b"".join(train))
    test = [
        serialize_cifar100_record(fine % 20, fine, rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8) / 255.0)
        for fine in range(num_classes)
    ]
    (base / "test.bin").write_bytes(b"".join(test))
    return base
