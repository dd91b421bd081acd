import struct

import numpy as np
import pytest
from scipy import stats

from fedunlearn.datasets import (
    ClientShards,
    LabeledDataset,
    TriggerSpec,
    generate_synthetic,
    inject_trigger,
    load_idx,
    partition_noniid,
    trigger_eval_set,
)


def write_idx_images(path, images):
    """Emit a big-endian IDX3 image file for fixtures (n, rows, cols uint8)."""
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels, magic=0x00000801):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", magic, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


class TestGenerateSynthetic:
    def test_zero_spread_collapses_to_means(self):
        data = generate_synthetic(classes=3, dim=4, samples_per_class=5, spread=0.0, seed=1)
        for c in range(3):
            block = data.features[data.labels == c]
            assert np.ptp(block, axis=0).max() == 0.0

    def test_same_seed_bit_identical(self):
        a = generate_synthetic(4, 6, 10, 0.7, seed=42)
        b = generate_synthetic(4, 6, 10, 0.7, seed=42)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seed_differs(self):
        a = generate_synthetic(4, 6, 10, 0.7, seed=42)
        b = generate_synthetic(4, 6, 10, 0.7, seed=43)
        assert a.features.tobytes() != b.features.tobytes()

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 4, 5, 1.0, seed=0)

    def test_separable_task_is_learnable(self):
        # Oracle: a softmax model trained on well-separated blobs generalizes.
        from fedunlearn.models import ModelSpec, gradient, init_params, test_error_rate

        pool = generate_synthetic(2, 8, 200, 0.25, seed=9)
        idx = np.random.default_rng(0).permutation(len(pool))
        cut = len(idx) // 2
        fit = LabeledDataset(pool.features[idx[:cut]], pool.labels[idx[:cut]], 2)
        held = LabeledDataset(pool.features[idx[cut:]], pool.labels[idx[cut:]], 2)

        spec = ModelSpec(kind="softmax_regression", dims=[8, 2], l2_lambda=0.01)
        w = init_params(spec, np.random.default_rng(1))
        for _ in range(300):
            w = w - 0.5 * gradient(spec, w, fit)
        assert test_error_rate(spec, w, held) <= 0.02


class TestLoadIdx:
    def test_known_bytes_roundtrip(self, tmp_path):
        images = np.array([[[0, 1], [2, 3]], [[255, 0], [10, 20]]], dtype=np.uint8)
        labels = [7, 3]
        ip, lp = tmp_path / "imgs", tmp_path / "labs"
        write_idx_images(ip, images)
        write_idx_labels(lp, labels)
        data = load_idx(str(ip), str(lp))
        assert data.features.shape == (2, 4)
        np.testing.assert_allclose(data.features[0], [0, 1 / 255, 2 / 255, 3 / 255])
        np.testing.assert_array_equal(data.labels, [7, 3])

    def test_bad_magic_on_labels(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        ip, lp = tmp_path / "imgs", tmp_path / "labs"
        write_idx_images(ip, images)
        write_idx_labels(lp, [0, 1], magic=0x00000803)
        with pytest.raises(ValueError, match="bad magic"):
            load_idx(str(ip), str(lp))

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        ip, lp = tmp_path / "imgs", tmp_path / "labs"
        write_idx_images(ip, images)
        write_idx_labels(lp, [0, 1])
        with pytest.raises(ValueError, match="count mismatch"):
            load_idx(str(ip), str(lp))

    def test_truncated_payload(self, tmp_path):
        ip, lp = tmp_path / "imgs", tmp_path / "labs"
        with open(ip, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 2, 2))
            f.write(b"\x00" * 3)  # needs 8 bytes
        write_idx_labels(lp, [0, 1])
        with pytest.raises(ValueError, match="truncated"):
            load_idx(str(ip), str(lp))


class TestPartitionNoniid:
    def test_conservation(self):
        data = generate_synthetic(5, 3, 40, 1.0, seed=2)
        shards = partition_noniid(data, n_clients=10, degree_q=0.5, seed=3)
        assert shards.total_samples() == len(data)
        stacked = np.vstack([s.features for s in shards.shards])
        key = np.lexsort(stacked.T)
        key_src = np.lexsort(data.features.T)
        np.testing.assert_array_equal(stacked[key], data.features[key_src])

    def test_fully_skewed(self):
        data = generate_synthetic(4, 3, 50, 1.0, seed=5)
        shards = partition_noniid(data, n_clients=8, degree_q=1.0, seed=6)
        # Two clients per group; group g holds only label g.
        for i, shard in enumerate(shards.shards):
            group = i // 2
            assert set(shard.labels.tolist()) <= {group}

    def test_uniform_degree_chi_square(self):
        # Statistical oracle: at q = 1/C the pooled per-client label histogram
        # is uniform; chi-square over 10 seeds must not reject at alpha=0.01.
        c, n = 4, 8
        counts = np.zeros((n, c))
        for seed in range(10):
            data = generate_synthetic(c, 2, 100, 1.0, seed=100 + seed)
            shards = partition_noniid(data, n, degree_q=1.0 / c, seed=200 + seed)
            for i, shard in enumerate(shards.shards):
                counts[i] += np.bincount(shard.labels, minlength=c)
        pooled = counts.sum(axis=0)  # per-label totals are fixed; test per client
        for i in range(n):
            if counts[i].sum() == 0:
                continue
            expected = counts[i].sum() / c
            _, p = stats.chisquare(counts[i], f_exp=np.full(c, expected))
            assert p > 0.01, f"client {i} label histogram not uniform: {counts[i]}"

    def test_rejects_bad_degree(self):
        data = generate_synthetic(4, 2, 10, 1.0, seed=1)
        with pytest.raises(ValueError):
            partition_noniid(data, 8, degree_q=0.1, seed=0)  # below 1/C

    def test_weights_sum_to_one(self):
        data = generate_synthetic(3, 2, 30, 1.0, seed=7)
        shards = partition_noniid(data, 6, degree_q=0.5, seed=8)
        assert sum(shards.weights()) == 1
        active = [0, 2, 5]
        assert sum(shards.weights(active)) == 1


class TestInjectTrigger:
    def _data(self, n=100, dim=6, classes=4, seed=11):
        return generate_synthetic(classes, dim, n // classes, 1.0, seed=seed)

    def test_full_poisoning(self):
        data = self._data()
        spec = TriggerSpec((3, 4), 2.5, target_label=0, poison_fraction=1.0)
        out = inject_trigger(data, spec, seed=1)
        assert np.all(out.labels == 0)
        assert np.all(out.features[:, 3] == 2.5)

    def test_empty_coordinates(self):
        data = self._data()
        spec = TriggerSpec((), 2.5, target_label=1, poison_fraction=0.5)
        out = inject_trigger(data, spec, seed=1)
        np.testing.assert_array_equal(out.features, data.features)
        assert (out.labels != data.labels).sum() <= 50

    def test_exact_fraction_count(self):
        data = self._data(n=100)
        spec = TriggerSpec((0,), 9.0, target_label=0, poison_fraction=0.5)
        out = inject_trigger(data, spec, seed=2)
        modified = (out.features[:, 0] == 9.0) & (data.features[:, 0] != 9.0)
        assert modified.sum() == 50

    def test_source_untouched(self):
        data = self._data()
        before = data.features.copy()
        inject_trigger(data, TriggerSpec((0,), 1.0, 0, 0.3), seed=3)
        np.testing.assert_array_equal(data.features, before)

    def test_eval_set_excludes_target_class(self):
        data = self._data()
        spec = TriggerSpec((1,), 3.0, target_label=2, poison_fraction=0.3)
        ev = trigger_eval_set(data, spec)
        assert np.all(ev.labels == 2)
        assert len(ev) == (data.labels != 2).sum()
        assert np.all(ev.features[:, 1] == 3.0)

    def test_out_of_range_coordinate(self):
        data = self._data(dim=4)
        with pytest.raises(ValueError):
            inject_trigger(data, TriggerSpec((9,), 1.0, 0, 0.5), seed=0)
