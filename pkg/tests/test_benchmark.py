"""Closeness scores, bottom-i, and the synthetic-anomaly test set."""

import numpy as np
import pytest
import torch

from nearnd.benchmark import (
    ClosenessTable,
    RestClassifierConfig,
    bottom_i,
    build_fsde_testset,
    closeness_scores,
    nearest_class,
    train_aux_classifier,
    train_rest_classifier,
)
from nearnd.data import ImageBatch, LabeledDataset, STORAGE_RANGE


def _shade_dataset(k, per_class, split_tag, seed=0):
    """K classes separable by brightness band."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(k):
        lo = c / k
        base = rng.uniform(lo, lo + 1.0 / k, size=(per_class, 1, 8, 8)).astype(np.float32)
        xs.append(base)
        ys.extend([c] * per_class)
    return LabeledDataset(
        images=ImageBatch(torch.from_numpy(np.concatenate(xs)), STORAGE_RANGE),
        labels=np.asarray(ys),
        class_names=[f"shade{c}" for c in range(k)],
        split_tag=split_tag,
    )


class TestRestClassifier:
    def test_three_classes_give_binary_classifier(self):
        ds = _shade_dataset(3, 12, "train")
        clf = train_rest_classifier(ds, 0, RestClassifierConfig(epochs=1))
        assert clf.abnormal_class_ids == [1, 2]
        probs = clf.probs(ds.class_batch(1))
        assert probs.shape == (12, 2)

    def test_rejects_k_below_three(self):
        ds = _shade_dataset(2, 4, "train")
        with pytest.raises(ValueError, match="K >= 3"):
            train_rest_classifier(ds, 0)

    def test_better_than_chance_on_separable_heldout(self):
        train = _shade_dataset(4, 24, "train", seed=1)
        test = _shade_dataset(4, 16, "test", seed=2)
        clf = train_rest_classifier(train, 0, RestClassifierConfig(epochs=12, seed=0))
        correct = total = 0
        for c in clf.abnormal_class_ids:
            probs = clf.probs(test.class_batch(c))
            j = clf.abnormal_class_ids.index(c)
            correct += (probs.argmax(axis=1) == j).sum()
            total += probs.shape[0]
        assert correct / total > 1.0 / 3.0

    def test_prob_rows_sum_to_one(self):
        ds = _shade_dataset(3, 8, "train", seed=3)
        clf = train_rest_classifier(ds, 1, RestClassifierConfig(epochs=1))
        probs = clf.probs(ds.images)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_aux_classifier_covers_all_classes(self):
        ds = _shade_dataset(3, 6, "train", seed=4)
        clf = train_aux_classifier(ds, RestClassifierConfig(epochs=1))
        assert clf.abnormal_class_ids == [0, 1, 2]


class _FixedProbClassifier:
    """Stand-in classifier returning a fixed probability table."""

    def __init__(self, table, ids, names):
        self.table = np.asarray(table, dtype=np.float64)
        self.abnormal_class_ids = ids
        self.class_names = names

        class _Backbone:
            pretrained_tag = "fixed"

        class _Clf:
            backbone = _Backbone()

        self.clf = _Clf()

    def probs(self, images):
        return self.table


def _dummy_batch(n):
    return ImageBatch(torch.rand(n, 1, 8, 8), STORAGE_RANGE)


class TestClosenessScores:
    def test_uniform_probs(self):
        n, k_abn = 6, 3
        clf = _FixedProbClassifier(np.full((n, k_abn), 1.0 / k_abn), [1, 2, 3], ["a", "b", "c", "d"])
        table = closeness_scores(clf, _dummy_batch(n))
        assert np.allclose(table.scores, n / k_abn)

    def test_hand_built_two_class_table(self):
        clf = _FixedProbClassifier([[0.9, 0.1], [0.6, 0.4]], [1, 2], ["n", "a", "b"])
        table = closeness_scores(clf, _dummy_batch(2))
        assert np.allclose(table.scores, [1.5, 0.5])
        assert table.normal_class == 0

    def test_mass_conservation(self):
        rng = np.random.default_rng(5)
        raw = rng.random((40, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        clf = _FixedProbClassifier(probs, [0, 2, 3, 4], ["a", "b", "c", "d", "e"])
        table = closeness_scores(clf, _dummy_batch(40))
        assert table.scores.sum() == pytest.approx(40.0, abs=1e-4)

    def test_real_classifier_mass_conservation(self):
        ds = _shade_dataset(4, 10, "train", seed=6)
        clf = train_rest_classifier(ds, 2, RestClassifierConfig(epochs=2))
        table = closeness_scores(clf, ds.class_batch(2))
        assert table.scores.sum() == pytest.approx(10.0, abs=1e-4)


class TestNearestClass:
    def test_argmax(self):
        table = ClosenessTable(np.array([1.5, 0.5]), [1, 2], ["n", "a", "b"], 0)
        assert nearest_class(table) == 1

    def test_tie_breaks_to_lower_id(self):
        table = ClosenessTable(np.array([2.0, 2.0, 2.0]), [2, 5, 7], ["x"] * 8, 0)
        assert nearest_class(table) == 2

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            scores = rng.random(6)
            ids = sorted(rng.choice(20, size=6, replace=False).tolist())
            table = ClosenessTable(scores, ids, [f"c{i}" for i in range(20)], None)
            best = None
            for cid, s in zip(ids, scores):
                if best is None or s > best[1]:
                    best = (cid, s)
            assert nearest_class(table) == best[0]

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(8)
        scores = rng.random(5)
        ids = list(range(1, 6))
        a = ClosenessTable(scores, ids, [f"c{i}" for i in range(6)], 0)
        b = ClosenessTable(scores * 7.3, ids, [f"c{i}" for i in range(6)], 0)
        assert nearest_class(a) == nearest_class(b)


class TestBottomI:
    def test_minimum(self):
        assert bottom_i([0.9, 0.7, 0.8], 1) == pytest.approx(0.7)

    def test_full_length_is_mean(self):
        values = [0.9, 0.7, 0.8, 0.95]
        assert bottom_i(values, 4) == pytest.approx(np.mean(values))

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            values = rng.random(rng.integers(1, 20))
            i = int(rng.integers(1, len(values) + 1))
            expected = float(np.mean(sorted(values)[:i]))
            assert bottom_i(values, i) == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_i(self):
        rng = np.random.default_rng(10)
        values = rng.random(12)
        results = [bottom_i(values, i) for i in range(1, 13)]
        assert all(b >= a - 1e-12 for a, b in zip(results, results[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="i must lie"):
            bottom_i([0.5, 0.6], 3)
        with pytest.raises(ValueError, match="i must lie"):
            bottom_i([0.5], 0)


class TestFsdeTestset:
    def test_sizes_match(self):
        split = build_fsde_testset(_dummy_batch(100), _dummy_batch(500), rng_seed=0)
        assert len(split.normal_test) == 100
        assert len(split.anomalous_test) == 100
        assert split.normal_train is None

    def test_seeded_determinism(self):
        pool = _dummy_batch(50)
        a = build_fsde_testset(_dummy_batch(20), pool, rng_seed=3)
        b = build_fsde_testset(_dummy_batch(20), pool, rng_seed=3)
        assert torch.equal(a.anomalous_test.data, b.anomalous_test.data)
        assert a.provenance["fake_indices"] == b.provenance["fake_indices"]

    def test_indices_distinct(self):
        split = build_fsde_testset(_dummy_batch(30), _dummy_batch(40), rng_seed=1)
        idx = split.provenance["fake_indices"]
        assert len(set(idx)) == len(idx) == 30

    def test_insufficient_pool_rejected(self):
        with pytest.raises(ValueError, match="fake pool"):
            build_fsde_testset(_dummy_batch(10), _dummy_batch(9), rng_seed=0)
