"""Dataset loading and long-tailed subsampling.

Loaders return ``(train, test)`` pairs of dataset objects exposing
``__len__``, ``__getitem__ -> LabeledExample``, ``labels``, ``num_classes``
and ``subset``. CIFAR is parsed from the raw binary batch format;
Tiny-ImageNet reads the standard directory layout lazily; the synthetic
dataset exists so the whole pipeline can be exercised in seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

CIFAR10_RECORD = 3073  # 1 label byte + 3 x 1024 channel planes
CIFAR100_RECORD = 3074  # coarse byte + fine byte + 3072 pixel bytes


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    class_label: int


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class retained sample counts of a long-tailed subsample."""

    num_classes: int
    counts: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        if len(self.counts) != self.num_classes:
            raise ConfigError("counts length must equal num_classes")
        if any(c < 1 for c in self.counts):
            raise ConfigError(f"all class counts must be >= 1, got {self.counts}")
        if any(a < b for a, b in zip(self.counts, self.counts[1:])):
            raise ConfigError("counts must be non-increasing")


def exponential_profile(num_classes: int, n_max: int, ratio: float) -> ImbalanceProfile:
    """Counts ``n_j = floor(n_max * ratio**(j / (K - 1)))`` for j = 0..K-1.

    The head class keeps all ``n_max`` samples and the tail class ends at
    ``floor(n_max * ratio)``.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"imbalance ratio must be in (0, 1], got {ratio}")
    counts = tuple(
        math.floor(n_max * ratio ** (j / (num_classes - 1))) for j in range(num_classes)
    )
    if counts[-1] < 1:
        raise ConfigError(
            f"tail class would keep {counts[-1]} samples; raise n_max or ratio"
        )
    return ImbalanceProfile(num_classes, counts, ratio)


def subsample_indices(
    class_labels: np.ndarray, profile: ImbalanceProfile, seed: int
) -> np.ndarray:
    """Per class j keep the first ``counts[j]`` of a seeded shuffle, sorted.

    The shuffles for class 0, 1, ... consume one generator stream in order,
    so the result is a pure function of (labels, profile, seed).
    """
    labels = np.asarray(class_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    for j in range(profile.num_classes):
        pool = np.flatnonzero(labels == j)
        need = profile.counts[j]
        if pool.size < need:
            raise DataError(
                f"class {j} has only {pool.size} samples, profile needs {need}"
            )
        kept.append(rng.permutation(pool)[:need])
    return np.sort(np.concatenate(kept))


def write_index_file(path: str | Path, header: dict, indices: np.ndarray) -> None:
    """Persist a subsample: one JSON header line, then one index per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(str(int(i)) for i in indices)
    path.write_text("\n".join(lines) + "\n")


def read_index_file(path: str | Path) -> tuple[dict, np.ndarray]:
    text = Path(path).read_text().splitlines()
    header = json.loads(text[0])
    indices = np.array([int(line) for line in text[1:] if line], dtype=np.int64)
    return header, indices


class ArrayDataset:
    """In-memory dataset over a (N, 3, H, W) image array in [0, 1]."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int):
        if images.ndim != 4 or images.shape[1] != 3:
            raise FormatError(f"expected (N, 3, H, W) images, got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise FormatError("images and labels disagree on N")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]))

    def subset(self, indices: np.ndarray) -> "ArrayDataset":
        return ArrayDataset(self.images[indices], self.labels[indices], self.num_classes)


class ImageFolderDataset:
    """Lazy dataset over image files; decoding happens per access."""

    def __init__(self, paths: list[Path], labels: np.ndarray, num_classes: int):
        self.paths = paths
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> LabeledExample:
        from PIL import Image

        with Image.open(self.paths[i]) as im:
            rgb = im.convert("RGB")  # grayscale inputs get replicated to 3 channels
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
        return LabeledExample(arr.transpose(2, 0, 1), int(self.labels[i]))

    def subset(self, indices: np.ndarray) -> "ImageFolderDataset":
        return ImageFolderDataset(
            [self.paths[i] for i in indices], self.labels[indices], self.num_classes
        )


def parse_cifar10_record(buf: bytes, offset: int = 0) -> tuple[int, np.ndarray]:
    """One 3073-byte record -> (label, (3, 32, 32) float32 image in [0, 1])."""
    if len(buf) != CIFAR10_RECORD:
        raise FormatError(f"CIFAR-10 record must be {CIFAR10_RECORD} bytes, got {len(buf)}", offset)
    label = buf[0]
    if label > 9:
        raise FormatError(f"CIFAR-10 label byte {label} out of range 0-9", offset)
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=1).reshape(3, 32, 32)
    return int(label), pixels.astype(np.float32) / 255.0


def serialize_cifar10_record(label: int, image: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_record`, bit-exact round trip."""
    pixels = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    return bytes([label]) + pixels.tobytes()


def parse_cifar100_record(buf: bytes, offset: int = 0) -> tuple[int, int, np.ndarray]:
    """One 3074-byte record -> (coarse label, fine label, image)."""
    if len(buf) != CIFAR100_RECORD:
        raise FormatError(f"CIFAR-100 record must be {CIFAR100_RECORD} bytes, got {len(buf)}", offset)
    coarse, fine = buf[0], buf[1]
    if coarse > 19:
        raise FormatError(f"CIFAR-100 coarse label byte {coarse} out of range 0-19", offset)
    if fine > 99:
        raise FormatError(f"CIFAR-100 fine label byte {fine} out of range 0-99", offset + 1)
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=2).reshape(3, 32, 32)
    return int(coarse), int(fine), pixels.astype(np.float32) / 255.0


def serialize_cifar100_record(coarse: int, fine: int, image: np.ndarray) -> bytes:
    pixels = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    return bytes([coarse, fine]) + pixels.tobytes()


def _read_records(path: Path, record_size: int) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record_size != 0:
        raise FormatError(
            f"{path} holds {raw.size} bytes, not a multiple of the "
            f"{record_size}-byte record size",
            raw.size - raw.size % record_size,
        )
    return raw.reshape(-1, record_size)


def _check_labels(records: np.ndarray, column: int, limit: int, record_size: int, path: Path) -> None:
    bad = np.flatnonzero(records[:, column] > limit)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: label byte {int(records[i, column])} exceeds {limit}",
            i * record_size + column,
        )


def _cifar_dir(root: str | Path, subdir: str) -> Path:
    root = Path(root)
    if (root / subdir).is_dir():
        return root / subdir
    return root


def load_cifar10(root: str | Path) -> tuple[ArrayDataset, ArrayDataset]:
    """Parse the binary batch files under ``root`` (or root/cifar-10-batches-bin)."""
    base = _cifar_dir(root, "cifar-10-batches-bin")
    train_files = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_file = base / "test_batch.bin"
    missing = [str(p) for p in train_files + [test_file] if not p.is_file()]
    if missing:
        raise DataError(f"CIFAR-10 batch files not found: {missing}")

    def load(paths: list[Path]) -> ArrayDataset:
        parts = [_read_records(p, CIFAR10_RECORD) for p in paths]
        for p, rec in zip(paths, parts):
            _check_labels(rec, 0, 9, CIFAR10_RECORD, p)
        records = np.concatenate(parts)
        labels = records[:, 0].astype(np.int64)
        images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        return ArrayDataset(images, labels, 10)

    return load(train_files), load([test_file])


def load_cifar100(root: str | Path) -> tuple[ArrayDataset, ArrayDataset]:
    """Parse train.bin/test.bin under ``root`` (or root/cifar-100-binary)."""
    base = _cifar_dir(root, "cifar-100-binary")
    paths = {"train": base / "train.bin", "test": base / "test.bin"}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise DataError(f"CIFAR-100 files not found: {missing}")

    def load(path: Path) -> ArrayDataset:
        records = _read_records(path, CIFAR100_RECORD)
        _check_labels(records, 1, 99, CIFAR100_RECORD, path)
        labels = records[:, 1].astype(np.int64)  # fine label is the class
        images = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        return ArrayDataset(images, labels, 100)

    return load(paths["train"]), load(paths["test"])


def load_tiny_imagenet(root: str | Path) -> tuple[ImageFolderDataset, ImageFolderDataset]:
    """Standard Tiny-ImageNet layout: train/<wnid>/images, val/val_annotations.txt.

    Class ids are assigned by sorting the train wnids lexicographically.
    """
    root = Path(root)
    train_dir, val_dir = root / "train", root / "val"
    if not train_dir.is_dir() or not val_dir.is_dir():
        raise DataError(f"Tiny-ImageNet train/ and val/ not found under {root}")
    wnids = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if not wnids:
        raise DataError(f"no wnid directories under {train_dir}")
    class_of = {wnid: i for i, wnid in enumerate(wnids)}

    train_paths: list[Path] = []
    train_labels: list[int] = []
    for wnid in wnids:
        images = sorted((train_dir / wnid / "images").glob("*.JPEG"))
        train_paths.extend(images)
        train_labels.extend([class_of[wnid]] * len(images))

    annotations = val_dir / "val_annotations.txt"
    if not annotations.is_file():
        raise DataError(f"missing {annotations}")
    val_paths: list[Path] = []
    val_labels: list[int] = []
    for line in annotations.read_text().splitlines():
        if not line.strip():
            continue
        fields = line.split("\t")
        filename, wnid = fields[0], fields[1]
        if wnid not in class_of:
            raise DataError(f"val_annotations.txt names unknown wnid {wnid!r}")
        val_paths.append(val_dir / "images" / filename)
        val_labels.append(class_of[wnid])

    K = len(wnids)
    return (
        ImageFolderDataset(train_paths, np.array(train_labels), K),
        ImageFolderDataset(val_paths, np.array(val_labels), K),
    )


def synthetic_dataset(
    num_classes: int, per_class: int, image_size: int, seed: int
) -> tuple[ArrayDataset, ArrayDataset]:
    """Class-separable synthetic images for desk-scale training.

    Each class owns a distinct base colour on a hue wheel. Every image adds
    a fixed per-channel offset (R > G > B everywhere, so channel shuffles are
    decodable against the untouched quadrants), an asymmetric row/column
    brightness ramp whose per-image strength varies (so quadrant rotations
    and flips are decodable, and batch statistics stay informative), and
    per-pixel noise. The ramp is zero-mean per channel, so class centroids
    are untouched and a nearest-centroid classifier on raw pixels is exact;
    amplitudes leave [0, 1] unclipped, keeping all pixel values distinct
    with probability 1.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if image_size < 2 or image_size % 2 != 0:
        raise ConfigError(f"image_size must be even and >= 2, got {image_size}")
    rng = np.random.default_rng(seed)
    H = image_size
    rows = np.linspace(-0.5, 0.5, H)[None, :, None]
    cols = np.linspace(-0.5, 0.5, H)[None, None, :]
    ramp = 0.14 * rows + 0.28 * cols  # row/col slopes differ on purpose
    channel_offset = np.array([0.12, 0.0, -0.12])[:, None, None]

    def base_color(j: int) -> np.ndarray:
        phases = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
        return 0.5 + 0.06 * np.cos(2.0 * np.pi * (j / num_classes + phases))

    def make_split(n_per_class: int) -> ArrayDataset:
        images = np.empty((num_classes * n_per_class, 3, H, H), dtype=np.float64)
        labels = np.empty(num_classes * n_per_class, dtype=np.int64)
        i = 0
        for j in range(num_classes):
            color = base_color(j)[:, None, None]
            for _ in range(n_per_class):
                strength = rng.uniform(0.7, 1.3)
                noise = rng.uniform(-0.005, 0.005, size=(3, H, H))
                images[i] = color + channel_offset + strength * ramp + noise
                labels[i] = j
                i += 1
        return ArrayDataset(images, labels, num_classes)

    train = make_split(per_class)
    test = make_split(max(1, per_class // 4))
    return train, test


@dataclass
class DatasetSpec:
    """Which dataset to load and from where."""

    name: str  # cifar10 | cifar100 | tiny-imagenet | synthetic
    root: str | None = None
    # synthetic-only knobs
    num_classes: int = 4
    per_class: int = 64
    image_size: int = 8
    data_seed: int = 0

    def __post_init__(self):
        valid = {"cifar10", "cifar100", "tiny-imagenet", "synthetic"}
        if self.name not in valid:
            raise ConfigError(f"unknown dataset {self.name!r}; valid: {sorted(valid)}")
        if self.name != "synthetic" and not self.root:
            raise ConfigError(f"dataset {self.name!r} needs a data root")


def load_dataset(spec: DatasetSpec):
    """Dispatch on ``spec.name``; returns (train, eval) datasets."""
    if spec.name == "cifar10":
        return load_cifar10(spec.root)
    if spec.name == "cifar100":
        return load_cifar100(spec.root)
    if spec.name == "tiny-imagenet":
        return load_tiny_imagenet(spec.root)
    return synthetic_dataset(spec.num_classes, spec.per_class, spec.image_size, spec.data_seed)
