import struct

import numpy as np
import pytest

from feldsim import (
    DataSpec,
    Dataset,
    ModelSpec,
    TrainConfig,
    evaluate,
    gen_synthetic,
    init_model,
    load_cache,
    load_idx,
    local_train,
    partition,
    save_cache,
    stream,
)
from feldsim.data import IMAGES_MAGIC, LABELS_MAGIC, gen_glyph_images, write_idx


class TestGenSynthetic:
    def test_same_seed_identical(self):
        spec = DataSpec(source="synthetic_blobs", num_classes=3, dim=5, total_size=100)
        a = gen_synthetic(spec, 4)
        b = gen_synthetic(spec, 4)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_wide_separation_is_linearly_learnable(self):
        spec = DataSpec(source="synthetic_blobs", num_classes=2, dim=6, total_size=400,
                        separation=10.0)
        data = gen_synthetic(spec, 3)
        model_spec = ModelSpec("linear-softmax", 6, 2, seed=3)
        trained = local_train(
            init_model(model_spec), model_spec, data,
            TrainConfig(learning_rate=0.5, batch_size=64, local_epochs=40),
            None, stream(3, "s"),
        )
        assert evaluate(trained, model_spec, data) >= 0.99

    def test_binary_class_balance_within_three_sigma(self):
        n = 4000
        spec = DataSpec(source="synthetic_blobs", num_classes=2, dim=3, total_size=n)
        data = gen_synthetic(spec, 8)
        ones = int(data.labels.sum())
        # labels are fair coin flips: binomial mean n/2, sigma sqrt(n)/2
        assert abs(ones - n / 2) <= 3 * np.sqrt(n) / 2

    def test_logistic_labels_fit_by_convex_learner(self):
        spec = DataSpec(source="synthetic_logistic", num_classes=3, dim=4, total_size=500)
        data = gen_synthetic(spec, 5)
        model_spec = ModelSpec("linear-softmax", 4, 3, seed=5)
        trained = local_train(
            init_model(model_spec), model_spec, data,
            TrainConfig(learning_rate=0.5, batch_size=64, local_epochs=60),
            None, stream(5, "s"),
        )
        assert evaluate(trained, model_spec, data) > 0.7

    def test_features_unit_interval(self):
        for source in ("synthetic_blobs", "synthetic_logistic"):
            spec = DataSpec(source=source, num_classes=2, dim=4, total_size=200)
            data = gen_synthetic(spec, 1)
            assert data.features.min() >= 0.0
            assert data.features.max() <= 1.0


class TestLoadIdx:
    def write_pair(self, tmp_path, n=2, rows=28, cols=28, pixels=None, labels=None,
                   images_magic=IMAGES_MAGIC, labels_magic=LABELS_MAGIC, label_count=None):
        if pixels is None:
            pixels = np.arange(n * rows * cols, dtype=np.uint8)
        if labels is None:
            labels = np.arange(n, dtype=np.uint8)
        images = tmp_path / "images"
        lbls = tmp_path / "labels"
        images.write_bytes(struct.pack(">IIII", images_magic, n, rows, cols) + pixels.tobytes())
        lbls.write_bytes(
            struct.pack(">II", labels_magic, n if label_count is None else label_count)
            + labels.tobytes()
        )
        return images, lbls

    def test_parses_header_and_shape(self, tmp_path):
        images, labels = self.write_pair(tmp_path)
        data = load_idx(images, labels)
        assert data.size == 2
        assert data.dim == 28 * 28

    def test_normalization_endpoints(self, tmp_path):
        pixels = np.array([0, 255, 128, 51], dtype=np.uint8)
        images, labels = self.write_pair(tmp_path, n=1, rows=2, cols=2, pixels=pixels,
                                         labels=np.array([7], dtype=np.uint8))
        data = load_idx(images, labels)
        assert data.features[0, 0] == 0.0
        assert data.features[0, 1] == 1.0
        assert data.features[0, 3] == pytest.approx(51 / 255)
        assert data[0].label == 7

    def test_wrong_label_magic_rejected(self, tmp_path):
        images, labels = self.write_pair(tmp_path, labels_magic=IMAGES_MAGIC)
        with pytest.raises(ValueError, match="label magic"):
            load_idx(images, labels)

    def test_wrong_image_magic_rejected(self, tmp_path):
        images, labels = self.write_pair(tmp_path, images_magic=0x00000801)
        with pytest.raises(ValueError, match="image magic"):
            load_idx(images, labels)

    def test_truncated_image_payload_rejected(self, tmp_path):
        images, labels = self.write_pair(tmp_path)
        raw = images.read_bytes()
        images.write_bytes(raw[:-10])
        with pytest.raises(ValueError, match="header implies"):
            load_idx(images, labels)

    def test_count_mismatch_rejected(self, tmp_path):
        images, labels = self.write_pair(tmp_path, label_count=5)
        with pytest.raises(ValueError, match="does not match"):
            load_idx(images, labels)

    def test_write_read_roundtrip(self, tmp_path):
        data = gen_glyph_images(10, seed=3, side=28)
        write_idx(data, tmp_path / "im", tmp_path / "lb", 28, 28)
        back = load_idx(tmp_path / "im", tmp_path / "lb")
        assert back.size == 10
        assert np.array_equal(back.labels, data.labels)
        # pixels were quantized to bytes on write
        assert np.allclose(back.features, data.features, atol=1 / 255 / 2 + 1e-12)


class TestPartition:
    def make_data(self, n=250, dim=3, classes=5, seed=0):
        rng = stream(seed, "part-data")
        return Dataset(rng.uniform(0, 1, (n, dim)), rng.integers(0, classes, n))

    def test_single_node_gets_everything_but_test(self):
        data = self.make_data()
        shards, test = partition(data, 1, "iid", seed=1)
        assert shards[0].size + test.size == data.size

    def test_iid_shards_disjoint_and_balanced(self):
        data = self.make_data()
        shards, test = partition(data, 8, "iid", seed=2)
        sizes = [s.size for s in shards]
        assert max(sizes) - min(sizes) <= 1
        total = sum(sizes) + test.size
        assert total == data.size
        seen = set()
        for shard in shards + [test]:
            for row in shard.features:
                key = row.tobytes()
                assert key not in seen
                seen.add(key)

    def test_deterministic_per_seed(self):
        data = self.make_data()
        a_shards, a_test = partition(data, 4, "iid", seed=3)
        b_shards, b_test = partition(data, 4, "iid", seed=3)
        for a, b in zip(a_shards, b_shards):
            assert np.array_equal(a.features, b.features)
        assert np.array_equal(a_test.features, b_test.features)

    def test_label_skew_concentrates_classes(self):
        rng = stream(9, "skew-data")
        n = 2000
        data = Dataset(rng.uniform(0, 1, (n, 2)), rng.integers(0, 10, n))
        shards, _ = partition(data, 10, "label_skew", seed=11, skew_gamma=0.1)
        top_share = max(
            np.bincount(s.labels, minlength=10).max() / s.size for s in shards
        )
        assert top_share > 0.5

    def test_all_shards_nonempty_under_heavy_skew(self):
        data = self.make_data(n=120, classes=3)
        shards, _ = partition(data, 10, "label_skew", seed=13, skew_gamma=0.05)
        assert all(s.size >= 1 for s in shards)

    def test_insufficient_examples_rejected(self):
        data = self.make_data(n=10)
        with pytest.raises(ValueError):
            partition(data, 9, "iid", seed=0)


class TestCache:
    def test_roundtrip(self, tmp_path):
        data = gen_synthetic(DataSpec(num_classes=4, dim=6, total_size=50), 2)
        path = tmp_path / "cache.feld"
        save_cache(data, path)
        back = load_cache(path)
        assert back.size == data.size
        assert np.array_equal(back.labels, data.labels)
        # payload is float32, so compare after the same quantization
        assert np.array_equal(back.features, data.features.astype(np.float32).astype(np.float64))

    def test_header_layout(self, tmp_path):
        data = gen_synthetic(DataSpec(num_classes=2, dim=3, total_size=7), 1)
        path = tmp_path / "cache.feld"
        save_cache(data, path)
        raw = path.read_bytes()
        assert raw[:4] == b"FELD"
        assert raw[4] == 1
        count, dim = struct.unpack("<II", raw[5:13])
        assert (count, dim) == (7, 3)
        assert len(raw) == 13 + 7 * 3 * 4 + 7 * 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "cache.feld"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            load_cache(path)
