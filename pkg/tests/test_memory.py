"""Memory bank construction, k-NN scoring, the decision rule, and the file format."""

import numpy as np
import pytest
import torch

from nearnd.data import ImageBatch, MODEL_RANGE
from nearnd.encoder import ConvBackbone, embed
from nearnd.memory import (
    MemoryBank,
    NoveltyScorer,
    build_memory,
    decide,
    load_memory,
    novelty_score,
    save_memory,
    score_batch,
    score_embeddings,
)


def brute_force_knn_score(x, memory_rows, k):
    # oracle: sort all squared distances, sum the k smallest
    d2 = sorted(((row - x) ** 2).sum() for row in memory_rows)
    return float(sum(d2[:k]))


@pytest.fixture
def small_backbone():
    return ConvBackbone(in_channels=1, num_blocks=4, width=8, seed=0)


class TestBuildMemory:
    def test_shape_and_determinism(self, small_backbone):
        batch = ImageBatch(torch.rand(10, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        bank = build_memory(small_backbone, batch)
        assert bank.size == 10 and bank.dim == small_backbone.embed_dim
        again = build_memory(small_backbone, batch)
        assert np.array_equal(bank.embeddings, again.embeddings)

    def test_rows_match_embed(self, small_backbone):
        batch = ImageBatch(torch.rand(6, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        bank = build_memory(small_backbone, batch)
        rows = embed(small_backbone, batch).data
        assert np.array_equal(bank.embeddings, rows)

    def test_metadata_records_fingerprint(self, small_backbone):
        batch = ImageBatch(torch.rand(4, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        bank = build_memory(small_backbone, batch, metadata={"class": "x"})
        assert "backbone_fingerprint" in bank.metadata
        assert bank.metadata["class"] == "x"


class TestNoveltyScore:
    def test_345_triangle(self):
        bank = MemoryBank(np.array([[0.0, 0.0]]))
        assert novelty_score(np.array([3.0, 4.0]), bank, k=1) == pytest.approx(25.0)

    def test_exact_matches_zero(self):
        x = np.array([1.0, 2.0, 3.0])
        bank = MemoryBank(np.tile(x, (4, 1)))
        assert novelty_score(x, bank, k=3) == pytest.approx(0.0, abs=1e-12)

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        memory = rng.standard_normal((200, 8))
        bank = MemoryBank(memory)
        mem64 = bank.embeddings.astype(np.float64)
        for k in (1, 2, 5):
            for _ in range(50):
                x = rng.standard_normal(8)
                got = novelty_score(x, bank, k)
                want = brute_force_knn_score(x, mem64, k)
                assert got == pytest.approx(want, rel=1e-9)

    def test_k_monotonicity(self):
        rng = np.random.default_rng(1)
        bank = MemoryBank(rng.standard_normal((30, 4)))
        x = rng.standard_normal(4)
        scores = [novelty_score(x, bank, k) for k in range(1, 31)]
        assert all(b >= a for a, b in zip(scores, scores[1:]))

    def test_memory_permutation_invariance(self):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((25, 6))
        x = rng.standard_normal(6)
        perm = rng.permutation(25)
        for k in (1, 3, 7):
            assert novelty_score(x, MemoryBank(rows), k) == pytest.approx(
                novelty_score(x, MemoryBank(rows[perm]), k), rel=1e-12
            )

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((20, 5))
        x = rng.standard_normal(5)
        shift = rng.standard_normal(5) * 10
        a = novelty_score(x, MemoryBank(rows), 2)
        b = novelty_score(x + shift, MemoryBank(rows + shift), 2)
        assert a == pytest.approx(b, abs=1e-9)

    def test_k_and_dim_validation(self):
        bank = MemoryBank(np.zeros((3, 2)))
        with pytest.raises(ValueError, match="k must lie"):
            novelty_score(np.zeros(2), bank, k=4)
        with pytest.raises(ValueError, match="dimension"):
            novelty_score(np.zeros(3), bank, k=1)


class TestScoreBatch:
    def test_memory_images_score_zero_at_k1(self, small_backbone):
        batch = ImageBatch(torch.rand(8, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        bank = build_memory(small_backbone, batch)
        scores = score_batch(batch, small_backbone, NoveltyScorer(bank, k=1))
        assert np.allclose(scores, 0.0, atol=1e-9)

    def test_permutation_equivariance(self, small_backbone):
        batch = ImageBatch(torch.rand(10, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        memory = build_memory(small_backbone, ImageBatch(torch.rand(12, 1, 8, 8) * 2 - 1, MODEL_RANGE))
        scorer = NoveltyScorer(memory, k=2)
        base = score_batch(batch, small_backbone, scorer)
        perm = np.random.default_rng(0).permutation(10)
        permuted = score_batch(batch.subset(perm), small_backbone, scorer)
        assert np.allclose(base[perm], permuted, atol=1e-9)

    def test_equals_per_image_loop(self, small_backbone):
        batch = ImageBatch(torch.rand(7, 1, 8, 8) * 2 - 1, MODEL_RANGE)
        memory = build_memory(small_backbone, ImageBatch(torch.rand(9, 1, 8, 8) * 2 - 1, MODEL_RANGE))
        scorer = NoveltyScorer(memory, k=3)
        batch_scores = score_batch(batch, small_backbone, scorer)
        emb = embed(small_backbone, batch).data
        loop_scores = [novelty_score(emb[i], memory, k=3) for i in range(7)]
        assert np.allclose(batch_scores, loop_scores, rtol=1e-9, atol=1e-12)

    def test_score_embeddings_matches_loop(self):
        rng = np.random.default_rng(4)
        bank = MemoryBank(rng.standard_normal((40, 8)))
        queries = rng.standard_normal((15, 8))
        scorer = NoveltyScorer(bank, k=5)
        vectorized = score_embeddings(queries, scorer)
        loop = [novelty_score(q, bank, 5) for q in queries]
        assert np.allclose(vectorized, loop, rtol=1e-9)


class TestNormalizeFlag:
    def test_off_by_default_and_changes_scores(self):
        rng = np.random.default_rng(7)
        rows = rng.standard_normal((10, 4)) * 3
        bank = MemoryBank(rows)
        x = rng.standard_normal(4) * 3
        raw = novelty_score(x, bank, k=2)
        normed = novelty_score(x, bank, k=2, normalize=True)
        assert raw != pytest.approx(normed)
        # normalized variant matches brute force on unit vectors
        unit_rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        unit_x = x / np.linalg.norm(x)
        assert normed == pytest.approx(brute_force_knn_score(unit_x, unit_rows, 2), rel=1e-9)

    def test_scorer_flag_threads_through_batch_path(self):
        rng = np.random.default_rng(8)
        bank = MemoryBank(rng.standard_normal((12, 5)))
        queries = rng.standard_normal((6, 5))
        plain = score_embeddings(queries, NoveltyScorer(bank, k=2))
        normed = score_embeddings(queries, NoveltyScorer(bank, k=2, normalize=True))
        assert not np.allclose(plain, normed)


class TestDecide:
    def test_below_threshold(self):
        assert decide(5.0, 10.0) == 0

    def test_boundary_is_normal(self):
        assert decide(10.0, 10.0) == 0

    def test_negative_threshold_always_anomalous(self):
        for score in (0.0, 0.5, 100.0):
            assert decide(score, -1.0) == 1


class TestScorerValidation:
    def test_k_bounds(self):
        bank = MemoryBank(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            NoveltyScorer(bank, k=0)
        with pytest.raises(ValueError):
            NoveltyScorer(bank, k=4)


class TestMemoryFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        bank = MemoryBank(rng.standard_normal((11, 6)).astype(np.float32), metadata={"class": "digit3"})
        path = tmp_path / "m.ndmb"
        save_memory(bank, path)
        loaded = load_memory(path)
        assert np.array_equal(loaded.embeddings, bank.embeddings)
        assert loaded.metadata == bank.metadata

    def test_magic_and_version_validated(self, tmp_path):
        path = tmp_path / "m.ndmb"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(ValueError, match="bad magic"):
            load_memory(path)

    def test_truncation_detected(self, tmp_path):
        rng = np.random.default_rng(6)
        bank = MemoryBank(rng.standard_normal((5, 4)).astype(np.float32))
        path = tmp_path / "m.ndmb"
        save_memory(bank, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_memory(path)

    def test_layout_is_little_endian_float32(self, tmp_path):
        bank = MemoryBank(np.array([[1.0, 2.0]], dtype=np.float32))
        path = tmp_path / "m.ndmb"
        save_memory(bank, path)
        blob = path.read_bytes()
        assert blob[:4] == b"NDMB"
        assert np.frombuffer(blob, dtype="<f4", count=2, offset=20).tolist() == [1.0, 2.0]
