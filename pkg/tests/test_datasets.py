import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gatedssl.datasets import (
    ArrayDataset,
    DatasetSpec,
    ImbalanceProfile,
    exponential_profile,
    load_cifar10,
    load_cifar100,
    load_dataset,
    load_tiny_imagenet,
    parse_cifar10_record,
    parse_cifar100_record,
    read_index_file,
    serialize_cifar10_record,
    serialize_cifar100_record,
    subsample_indices,
    synthetic_dataset,
    write_index_file,
)
from gatedssl.errors import ConfigError, DataError, FormatError

from conftest import write_mini_cifar10, write_mini_cifar100


def profile_oracle(K, n_max, ratio):
    """High-precision reference for the exponential profile."""
    with mpmath.workdps(60):
        return [int(mpmath.floor(n_max * mpmath.mpf(ratio) ** (mpmath.mpf(j) / (K - 1)))) for j in range(K)]


class TestExponentialProfile:
    def test_balanced_limit(self):
        profile = exponential_profile(10, 5000, 1.0)
        assert profile.counts == (5000,) * 10

    @pytest.mark.parametrize("ratio,tail", [(0.01, 50), (0.02, 100), (0.05, 250)])
    def test_endpoints(self, ratio, tail):
        profile = exponential_profile(10, 5000, ratio)
        assert profile.counts[0] == 5000
        assert profile.counts[-1] == tail

    def test_full_vector_matches_high_precision_oracle(self):
        expected = profile_oracle(10, 5000, 0.01)
        profile = exponential_profile(10, 5000, 0.01)
        assert list(profile.counts) == expected
        # frozen from the oracle above
        assert expected == [5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]

    @given(st.integers(2, 40), st.integers(100, 20000), st.floats(0.01, 1.0))
    @settings(max_examples=60)
    def test_monotone_non_increasing(self, K, n_max, ratio):
        counts = exponential_profile(K, n_max, ratio).counts
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[-1] == math.floor(n_max * ratio)

    @pytest.mark.parametrize("ratio", [0.0, -0.5, 1.5])
    def test_ratio_domain(self, ratio):
        with pytest.raises(ConfigError):
            exponential_profile(10, 5000, ratio)

    def test_tail_below_one_rejected(self):
        with pytest.raises(ConfigError):
            exponential_profile(10, 10, 0.01)


class TestSubsampleIndices:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.labels = rng.integers(0, 4, size=400)

    def test_counts_by_construction(self):
        counts = tuple(int(np.sum(self.labels == j)) for j in range(4))
        profile = ImbalanceProfile(4, (counts[0], 40, 20, 10), 0.1)
        idx = subsample_indices(self.labels, profile, seed=3)
        kept = self.labels[idx]
        assert [int(np.sum(kept == j)) for j in range(4)] == list(profile.counts)

    def test_ratio_one_keeps_everything(self):
        balanced_labels = np.repeat(np.arange(4), 50)
        profile = exponential_profile(4, 50, 1.0)
        idx = subsample_indices(balanced_labels, profile, seed=1)
        assert np.array_equal(idx, np.arange(200))

    def test_deterministic_and_sorted(self):
        profile = ImbalanceProfile(4, (60, 40, 20, 10), 0.2)
        a = subsample_indices(self.labels, profile, seed=9)
        b = subsample_indices(self.labels, profile, seed=9)
        assert np.array_equal(a, b)
        assert np.all(np.diff(a) > 0)
        c = subsample_indices(self.labels, profile, seed=10)
        assert not np.array_equal(a, c)

    def test_labels_match_buckets(self):
        profile = ImbalanceProfile(4, (60, 40, 20, 10), 0.2)
        idx = subsample_indices(self.labels, profile, seed=9)
        assert set(self.labels[idx]) == {0, 1, 2, 3}

    def test_insufficient_class_named_in_error(self):
        profile = ImbalanceProfile(4, (1000, 40, 20, 10), 0.1)
        with pytest.raises(DataError, match="class 0"):
            subsample_indices(self.labels, profile, seed=0)


class TestIndexFile:
    def test_round_trip(self, tmp_path):
        header = {"dataset": "cifar10", "ratio": 0.1, "seed": 4, "counts": [5, 3]}
        indices = np.array([1, 5, 9], dtype=np.int64)
        path = tmp_path / "sub.idx"
        write_index_file(path, header, indices)
        got_header, got_indices = read_index_file(path)
        assert got_header == header
        assert np.array_equal(got_indices, indices)
        first_line = path.read_text().splitlines()[0]
        json.loads(first_line)


class TestCifarRecords:
    def test_cifar10_crafted_record(self):
        record = bytes([7]) + bytes([255]) * 3072
        label, img = parse_cifar10_record(record)
        assert label == 7
        assert img.shape == (3, 32, 32)
        assert np.all(img == 1.0)

    def test_pixel_scaling(self):
        record = bytes([0]) + bytes([128]) * 3072
        _, img = parse_cifar10_record(record)
        assert img[0, 0, 0] == pytest.approx(128 / 255, abs=1e-9)

    def test_cifar10_round_trip(self):
        rng = np.random.default_rng(1)
        record = bytes([3]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
        label, img = parse_cifar10_record(record)
        assert serialize_cifar10_record(label, img) == record

    def test_cifar10_bad_label(self):
        record = bytes([10]) + bytes(3072)
        with pytest.raises(FormatError):
            parse_cifar10_record(record)

    def test_cifar100_crafted_record(self):
        record = bytes([3, 42]) + bytes(3072)
        coarse, fine, img = parse_cifar100_record(record)
        assert (coarse, fine) == (3, 42)

    def test_cifar100_round_trip(self):
        rng = np.random.default_rng(2)
        record = bytes([19, 99]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
        coarse, fine, img = parse_cifar100_record(record)
        assert serialize_cifar100_record(coarse, fine, img) == record

    def test_wrong_size_rejected(self):
        with pytest.raises(FormatError):
            parse_cifar10_record(bytes(100))


class TestCifarLoaders:
    def test_cifar10_mini(self, tmp_path):
        write_mini_cifar10(tmp_path)
        train, test = load_cifar10(tmp_path)
        assert train.num_classes == 10
        assert len(train) == 120 and len(test) == 20
        assert train.images.dtype == np.float32
        assert 0.0 <= train.images.min() and train.images.max() <= 1.0
        example = train[0]
        assert example.image.shape == (3, 32, 32)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError):
            load_cifar10(tmp_path)

    def test_bad_label_reports_offset(self, tmp_path):
        base = write_mini_cifar10(tmp_path)
        path = base / "data_batch_1.bin"
        data = bytearray(path.read_bytes())
        bad_index = 5
        data[bad_index * 3073] = 11
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError) as err:
            load_cifar10(tmp_path)
        assert err.value.byte_offset == bad_index * 3073

    def test_truncated_file_rejected(self, tmp_path):
        base = write_mini_cifar10(tmp_path)
        path = base / "test_batch.bin"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_cifar10(tmp_path)

    def test_cifar100_mini(self, tmp_path):
        write_mini_cifar100(tmp_path)
        train, test = load_cifar100(tmp_path)
        assert train.num_classes == 100
        assert len(train) == 300
        assert set(train.labels) == set(range(100))


class TestTinyImagenet:
    def make_tree(self, root, wnids=("n002", "n001", "n003"), per_class=3):
        rng = np.random.default_rng(0)
        for wnid in wnids:
            img_dir = root / "train" / wnid / "images"
            img_dir.mkdir(parents=True)
            for i in range(per_class):
                arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
                Image.fromarray(arr).save(img_dir / f"{wnid}_{i}.JPEG")
        val_dir = root / "val" / "images"
        val_dir.mkdir(parents=True)
        lines = []
        for i, wnid in enumerate(wnids):
            arr = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)  # grayscale on purpose
            name = f"val_{i}.JPEG"
            Image.fromarray(arr, mode="L").save(val_dir / name)
            lines.append(f"{name}\t{wnid}\t0\t0\t63\t63")
        (root / "val" / "val_annotations.txt").write_text("\n".join(lines) + "\n")

    def test_sorted_wnid_mapping(self, tmp_path):
        self.make_tree(tmp_path)
        train, val = load_tiny_imagenet(tmp_path)
        assert train.num_classes == 3
        # wnids sorted lexicographically: n001 -> 0, n002 -> 1, n003 -> 2
        assert sorted(set(train.labels)) == [0, 1, 2]
        assert val.labels.tolist() == [1, 0, 2]

    def test_grayscale_replicated(self, tmp_path):
        self.make_tree(tmp_path)
        _, val = load_tiny_imagenet(tmp_path)
        example = val[0]
        assert example.image.shape == (3, 64, 64)
        assert np.array_equal(example.image[0], example.image[1])
        assert np.array_equal(example.image[1], example.image[2])

    def test_unknown_wnid_rejected(self, tmp_path):
        self.make_tree(tmp_path)
        annotations = tmp_path / "val" / "val_annotations.txt"
        annotations.write_text(annotations.read_text() + "oops.JPEG\tn999\t0\t0\t63\t63\n")
        with pytest.raises(DataError, match="n999"):
            load_tiny_imagenet(tmp_path)

    def test_missing_layout(self, tmp_path):
        with pytest.raises(DataError):
            load_tiny_imagenet(tmp_path)


class TestSynthetic:
    def test_sizes(self):
        train, test = synthetic_dataset(4, 64, 8, seed=0)
        assert len(train) == 256
        assert len(test) == 64
        assert train.num_classes == 4

    def test_deterministic(self):
        a, _ = synthetic_dataset(4, 8, 8, seed=5)
        b, _ = synthetic_dataset(4, 8, 8, seed=5)
        assert np.array_equal(a.images, b.images)

    def test_values_in_unit_interval_without_clipping(self):
        train, _ = synthetic_dataset(6, 16, 8, seed=1)
        assert train.images.min() > 0.0
        assert train.images.max() < 1.0

    def test_all_pixel_values_distinct(self):
        train, _ = synthetic_dataset(4, 4, 8, seed=2)
        values = train.images.ravel()
        assert len(np.unique(values)) == values.size

    def test_nearest_centroid_is_exact(self):
        train, test = synthetic_dataset(4, 64, 8, seed=0)
        centroids = np.stack(
            [train.images[train.labels == j].mean(axis=0).ravel() for j in range(4)]
        )
        flat = test.images.reshape(len(test), -1)
        distances = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        predictions = distances.argmin(axis=1)
        assert np.array_equal(predictions, test.labels)

    def test_odd_size_rejected(self):
        with pytest.raises(ConfigError):
            synthetic_dataset(4, 4, 7, seed=0)


class TestDatasetSpec:
    def test_synthetic_dispatch(self):
        train, test = load_dataset(DatasetSpec("synthetic", num_classes=3, per_class=5, image_size=8))
        assert train.num_classes == 3
        assert len(train) == 15

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            DatasetSpec("imagenet")

    def test_real_dataset_needs_root(self):
        with pytest.raises(ConfigError):
            DatasetSpec("cifar10")

    def test_subset_view(self):
        train, _ = synthetic_dataset(4, 8, 8, seed=0)
        sub = train.subset(np.array([0, 5, 9]))
        assert len(sub) == 3
        assert sub.labels.tolist() == [train.labels[0], train.labels[5], train.labels[9]]
