import struct

import numpy as np
import pytest

from mpcl.data import (
    DataError,
    LabeledDataset,
    _apply_pixel_permutation,
    load_idx,
    normalize,
    permute_tasks,
    split_tasks,
    synthetic_tasks,
    write_idx,
)
from mpcl.tensor import SeededRng

BLOBS_FAR = {
    "dim": 2,
    "tasks": [{"classes": [
        {"center": [-2.0, -2.0], "cov": 0.05, "n_train": 120, "n_test": 60},
        {"center": [2.0, 2.0], "cov": 0.05, "n_train": 120, "n_test": 60},
    ]}],
}


class TestLoadIdx:
    def test_hand_built_fixture(self, tmp_path):
        # 4 images of 2x3 pixels with hand-chosen bytes.
        pix = bytes([0, 51, 102, 153, 204, 255,
                     255, 0, 0, 0, 0, 0,
                     10, 20, 30, 40, 50, 60,
                     0, 0, 0, 0, 0, 255])
        img_path = tmp_path / "img.idx"
        lab_path = tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x803, 4, 2, 3) + pix)
        lab_path.write_bytes(struct.pack(">II", 0x801, 4) + bytes([0, 1, 2, 1]))
        ds = load_idx(img_path, lab_path)
        assert ds.images.shape == (4, 2, 3, 1)
        assert ds.images[0, 0, 1, 0] == 51 / 255
        assert ds.images[0, 1, 2, 0] == 1.0
        assert ds.images[1, 0, 0, 0] == 1.0
        assert ds.images[3, 1, 2, 0] == 1.0
        assert ds.images[2, 0, 0, 0] == 10 / 255
        assert np.array_equal(ds.labels, [0, 1, 2, 1])

    def test_wrong_magic_rejected(self, tmp_path):
        img_path = tmp_path / "img.idx"
        lab_path = tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00")
        # Labels file carrying the image magic.
        lab_path.write_bytes(struct.pack(">II", 0x803, 1) + b"\x00")
        with pytest.raises(DataError, match="magic"):
            load_idx(img_path, lab_path)

    def test_truncated_payload_rejected(self, tmp_path):
        img_path = tmp_path / "img.idx"
        lab_path = tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 7)
        lab_path.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
        with pytest.raises(DataError, match="truncated"):
            load_idx(img_path, lab_path)

    def test_count_mismatch_rejected(self, tmp_path):
        img_path = tmp_path / "img.idx"
        lab_path = tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00")
        lab_path.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
        with pytest.raises(DataError, match="count"):
            load_idx(img_path, lab_path)

    def test_write_then_load_round_trip(self, tmp_path):
        rng = SeededRng(70)
        imgs = rng.integers(0, 256, (5, 4, 4)).astype(np.uint8)
        labels = np.array([0, 1, 2, 3, 4], dtype=np.uint8)
        write_idx(imgs, labels, tmp_path / "i.idx", tmp_path / "l.idx")
        ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert np.array_equal(ds.images[..., 0] * 255, imgs.astype(float))
        assert np.array_equal(ds.labels, labels)


class TestNormalize:
    def make(self, seed=71):
        rng = SeededRng(seed)
        return LabeledDataset(rng.standard_normal((50, 3, 3, 1)) * 2 + 1,
                              rng.integers(0, 3, 50), 3)

    def test_stats_after_normalization(self):
        out, (mean, std) = normalize(self.make())
        assert abs(out.images.mean()) < 1e-9
        assert abs(out.images.std() - 1) < 1e-9
        assert mean != 0 and std != 1

    def test_idempotent_on_normalized_data(self):
        once, _ = normalize(self.make())
        twice, (m2, s2) = normalize(once)
        assert abs(m2) < 1e-12
        assert abs(s2 - 1) < 1e-12
        assert np.allclose(twice.images, once.images, atol=1e-12)

    def test_constant_dataset_rejected(self):
        ds = LabeledDataset(np.ones((4, 2, 2, 1)), np.zeros(4, dtype=int), 1)
        with pytest.raises(DataError, match="standard deviation"):
            normalize(ds)


def toy_ten_class(seed=72, n=400):
    # Unique per-sample pixel values so samples can be tracked through splits.
    rng = SeededRng(seed)
    marker = np.arange(n, dtype=float).reshape(n, 1, 1, 1)
    images = np.broadcast_to(marker, (n, 2, 2, 1)).copy()
    labels = rng.integers(0, 10, n)
    labels[:10] = np.arange(10)  # every class present
    return LabeledDataset(images, labels, 10)


class TestSplitTasks:
    def test_two_split_structure(self):
        train, test = toy_ten_class(72), toy_ten_class(73, 150)
        seq = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=1)
        assert len(seq) == 2
        for task in seq:
            assert task.n_classes == 5
            assert set(np.unique(task.train.labels)) <= set(range(5))

    def test_overlap_rejected(self):
        train, test = toy_ten_class(), toy_ten_class(73, 150)
        with pytest.raises(DataError, match="overlap"):
            split_tasks(train, test, [[0, 1], [1, 2]])

    def test_missing_class_rejected(self):
        train, test = toy_ten_class(), toy_ten_class(73, 150)
        with pytest.raises(DataError, match="absent"):
            split_tasks(train, test, [[0, 1], [2, 77]])

    def test_partition_property(self):
        # Every source sample lands in exactly one task split, exactly once.
        train, test = toy_ten_class(74), toy_ten_class(75, 150)
        seq = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=2)
        got_train = np.sort(np.concatenate(
            [t.train.images[:, 0, 0, 0] for t in seq]
            + [t.val.images[:, 0, 0, 0] for t in seq]))
        assert np.array_equal(got_train, np.sort(train.images[:, 0, 0, 0]))
        got_test = np.sort(np.concatenate([t.test.images[:, 0, 0, 0] for t in seq]))
        assert np.array_equal(got_test, np.sort(test.images[:, 0, 0, 0]))

    def test_no_leakage_between_train_and_test(self):
        train, test = toy_ten_class(74), toy_ten_class(75, 150)
        test = LabeledDataset(test.images + 10_000, test.labels, 10)
        seq = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=2)
        for t in seq:
            seen = set(t.train.images[:, 0, 0, 0]) | set(t.val.images[:, 0, 0, 0])
            assert not seen & set(t.test.images[:, 0, 0, 0])

    def test_val_fraction_within_one_sample(self):
        train, test = toy_ten_class(76, 997), toy_ten_class(77, 150)
        seq = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=3)
        for t in seq:
            pool = len(t.train) + len(t.val)
            assert abs(len(t.val) - 0.15 * pool) <= 1

    def test_stratified_val(self):
        train, test = toy_ten_class(78, 1200), toy_ten_class(79, 150)
        seq = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=4)
        for t in seq:
            for c in range(t.n_classes):
                n_c = int((t.train.labels == c).sum() + (t.val.labels == c).sum())
                v_c = int((t.val.labels == c).sum())
                assert abs(v_c - 0.15 * n_c) <= 1

    def test_label_remap_round_trip(self):
        train, test = toy_ten_class(80), toy_ten_class(81, 150)
        seq = split_tasks(train, test, [[5, 6, 7, 8, 9], [0, 1, 2, 3, 4]], seed=5)
        task = seq.tasks[0]
        inverse = {v: k for k, v in task.class_map.items()}
        for local in np.unique(task.train.labels):
            assert task.class_map[inverse[int(local)]] == int(local)

    def test_determinism(self):
        train, test = toy_ten_class(82), toy_ten_class(83, 150)
        a = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=6)
        b = split_tasks(train, test, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], seed=6)
        for ta, tb in zip(a, b):
            assert ta.train.fingerprint() == tb.train.fingerprint()
            assert ta.val.fingerprint() == tb.val.fingerprint()


class TestPermuteTasks:
    def test_single_task_is_identity(self):
        train, test = toy_ten_class(84), toy_ten_class(85, 150)
        seq = permute_tasks(train, test, 1, seed=7)
        joined = np.sort(np.concatenate([seq.tasks[0].train.images[:, 0, 0, 0],
                                         seq.tasks[0].val.images[:, 0, 0, 0]]))
        assert np.array_equal(joined, np.sort(train.images[:, 0, 0, 0]))

    def test_permutation_inverse_restores(self):
        rng = SeededRng(86)
        ds = LabeledDataset(rng.standard_normal((10, 3, 3, 1)),
                            rng.integers(0, 2, 10), 2)
        perm = SeededRng(87).permutation(9)
        inv = np.argsort(perm)
        once = _apply_pixel_permutation(ds, perm)
        back = _apply_pixel_permutation(once, inv)
        assert np.array_equal(back.images, ds.images)

    def test_pixel_multiset_preserved(self):
        rng = SeededRng(88)
        train = LabeledDataset(rng.standard_normal((20, 4, 4, 1)),
                               rng.integers(0, 3, 20), 3)
        test = LabeledDataset(rng.standard_normal((8, 4, 4, 1)),
                              rng.integers(0, 3, 8), 3)
        seq = permute_tasks(train, test, 3, seed=9)
        for task in seq.tasks[1:]:
            got = np.sort(task.test.images.reshape(8, -1), axis=1)
            want = np.sort(test.images.reshape(8, -1), axis=1)
            assert np.array_equal(got, want)

    def test_tasks_keep_all_classes(self):
        train, test = toy_ten_class(89, 600), toy_ten_class(90, 150)
        seq = permute_tasks(train, test, 2, seed=10)
        for task in seq:
            assert task.n_classes == 10


class TestSyntheticTasks:
    def test_linear_oracle_reaches_99(self):
        from sklearn.linear_model import LogisticRegression

        seq = synthetic_tasks(BLOBS_FAR, seed=11)
        task = seq.tasks[0]
        clf = LogisticRegression().fit(task.train.images, task.train.labels)
        assert clf.score(task.test.images, task.test.labels) >= 0.99

    def test_same_seed_identical(self):
        a = synthetic_tasks(BLOBS_FAR, seed=12)
        b = synthetic_tasks(BLOBS_FAR, seed=12)
        assert a.tasks[0].train.fingerprint() == b.tasks[0].train.fingerprint()
        assert a.tasks[0].test.fingerprint() == b.tasks[0].test.fingerprint()

    def test_class_counts_match_spec(self):
        seq = synthetic_tasks(BLOBS_FAR, seed=13)
        task = seq.tasks[0]
        for c in range(2):
            total = int((task.train.labels == c).sum() + (task.val.labels == c).sum())
            assert total == 120
            assert int((task.test.labels == c).sum()) == 60

    def test_degenerate_covariance_rejected(self):
        bad = {"dim": 2, "tasks": [{"classes": [
            {"center": [0, 0], "cov": [[1.0, 2.0], [2.0, 1.0]],
             "n_train": 10, "n_test": 5}]}]}
        with pytest.raises(DataError, match="covariance"):
            synthetic_tasks(bad, seed=14)
