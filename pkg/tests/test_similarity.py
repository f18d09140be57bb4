from __future__ import annotations

import math

import numpy as np
import pytest

from corpusforge.corpus import Category, EmbeddingRecord, ValidationError
from corpusforge.similarity import (
    SimilarityReport,
    cosine_sim,
    dedup,
    similarity_score,
    source_admission,
)


def brute_force_score(new, pool):
    """Independent O(N*M) oracle: plain double loop over raw vectors."""

    def clamped_cos(u, v):
        return max(0.0, float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))))

    best = []
    for r in new:
        products = [
            clamped_cos(r.image_vec, p.image_vec) * clamped_cos(r.text_vec, p.text_vec)
            for p in pool
        ]
        best.append(max(products))
    return sum(best) / len(best)


def random_records(prefix, n, dim, rng):
    return [
        EmbeddingRecord(
            sample_id=f"{prefix}{i}",
            image_vec=rng.normal(size=dim).astype(np.float32),
            text_vec=rng.normal(size=dim).astype(np.float32),
        )
        for i in range(n)
    ]


class TestCosine:
    def test_identity(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_opposite_clamped_to_zero(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0

    def test_scale_invariant_and_symmetric(self):
        u = np.array([3.0, 4.0])
        v = np.array([1.0, 2.0])
        assert cosine_sim(u, v) == pytest.approx(cosine_sim(v, u))
        assert cosine_sim(10 * u, v) == pytest.approx(cosine_sim(u, v))

    def test_zero_norm_errors(self):
        with pytest.raises(ValidationError, match="zero-norm"):
            cosine_sim(np.zeros(3), np.ones(3))


class TestSimilarityScore:
    def test_hand_computed_two_pool_case(self):
        # New sample: both unit x-axis vectors.  Pool A gives image cos
        # 0.8 and text cos 0.5 (product 0.40); pool B gives 0.6 and 0.9
        # (product 0.54).  Best match must be B with S = 0.54.
        new = [
            EmbeddingRecord("n0", np.array([1.0, 0.0], np.float32), np.array([1.0, 0.0], np.float32))
        ]
        pool = [
            EmbeddingRecord(
                "A",
                np.array([0.8, math.sqrt(1 - 0.64)], np.float32),
                np.array([0.5, math.sqrt(0.75)], np.float32),
            ),
            EmbeddingRecord(
                "B",
                np.array([0.6, 0.8], np.float32),
                np.array([0.9, math.sqrt(1 - 0.81)], np.float32),
            ),
        ]
        report = similarity_score(new, pool, Category.GENERAL_VQA)
        assert report.score == pytest.approx(0.54, abs=1e-6)
        assert report.per_sample[0].best_pool_id == "B"
        assert report.max_term == pytest.approx(0.54, abs=1e-6)

    def test_identical_subset_scores_one(self):
        rng = np.random.default_rng(0)
        pool = random_records("p", 6, 8, rng)
        new = [
            EmbeddingRecord("n0", pool[2].image_vec.copy(), pool[2].text_vec.copy()),
            EmbeddingRecord("n1", pool[4].image_vec.copy(), pool[4].text_vec.copy()),
        ]
        report = similarity_score(new, pool, Category.SCIENCE)
        assert report.score == pytest.approx(1.0, abs=1e-9)

    def test_matches_brute_force_on_random_instance(self):
        rng = np.random.default_rng(42)
        new = random_records("n", 50, 16, rng)
        pool = random_records("p", 80, 16, rng)
        report = similarity_score(new, pool, Category.CHART_TABLE, block_size=17)
        assert report.score == pytest.approx(brute_force_score(new, pool), abs=1e-6)

    def test_per_sample_invariants(self):
        rng = np.random.default_rng(3)
        new = random_records("n", 10, 8, rng)
        pool = random_records("p", 20, 8, rng)
        report = similarity_score(new, pool, Category.OCR_QA)
        products = [m.product for m in report.per_sample]
        assert report.score == pytest.approx(float(np.mean(products)))
        assert report.max_term == pytest.approx(max(products))
        assert all(0.0 <= p <= 1.0 for p in products)

    def test_pool_growth_never_decreases_score(self):
        rng = np.random.default_rng(7)
        new = random_records("n", 12, 8, rng)
        pool = random_records("p", 10, 8, rng)
        extra = random_records("x", 10, 8, rng)
        s_small = similarity_score(new, pool, Category.MATHEMATICS).score
        s_big = similarity_score(new, pool + extra, Category.MATHEMATICS).score
        assert s_big >= s_small - 1e-12

    def test_pool_permutation_leaves_score_alone(self):
        rng = np.random.default_rng(9)
        new = random_records("n", 8, 8, rng)
        pool = random_records("p", 15, 8, rng)
        base = similarity_score(new, pool, Category.SCIENCE)
        perm = list(reversed(pool))
        shuffled = similarity_score(new, perm, Category.SCIENCE)
        assert shuffled.score == base.score
        assert set(shuffled.duplicates) == set(base.duplicates)

    def test_argmax_tie_takes_lowest_pool_index(self):
        v = np.array([1.0, 0.0], np.float32)
        new = [EmbeddingRecord("n0", v, v)]
        pool = [EmbeddingRecord("first", v, v), EmbeddingRecord("second", v, v)]
        report = similarity_score(new, pool, Category.GENERAL_VQA, block_size=1)
        assert report.per_sample[0].best_pool_id == "first"

    def test_errors(self):
        rng = np.random.default_rng(0)
        pool = random_records("p", 3, 4, rng)
        with pytest.raises(ValidationError, match="empty new source"):
            similarity_score([], pool, Category.SCIENCE)
        with pytest.raises(ValidationError, match="empty pool"):
            similarity_score(pool, [], Category.SCIENCE)
        broken = [EmbeddingRecord("b0", image_vec=pool[0].image_vec, text_vec=None)]
        with pytest.raises(ValidationError, match="b0"):
            similarity_score(broken, pool, Category.SCIENCE)


class TestDedup:
    def test_threshold_splits_kept_and_removed(self):
        v = np.array([1.0, 0.0], np.float32)
        w = np.array([0.8, 0.6], np.float32)  # cos 0.8 -> product 0.64
        pool = [EmbeddingRecord("p0", v, v)]
        new = [EmbeddingRecord("near", v, v), EmbeddingRecord("far", w, w)]
        kept, removed, report = dedup(new, pool, Category.GENERAL_VQA, threshold=0.9)
        assert removed == ["near"]
        assert kept == ["far"]
        assert set(kept) | set(removed) == {"near", "far"}

    def test_threshold_one_keeps_non_exact(self):
        rng = np.random.default_rng(5)
        pool = random_records("p", 5, 8, rng)
        new = random_records("n", 5, 8, rng)
        kept, removed, _ = dedup(new, pool, Category.GENERAL_VQA, threshold=1.0)
        assert removed == []
        assert len(kept) == 5

    def test_exact_copy_all_removed(self):
        rng = np.random.default_rng(6)
        pool = random_records("p", 5, 8, rng)
        new = [
            EmbeddingRecord(f"n{i}", p.image_vec.copy(), p.text_vec.copy())
            for i, p in enumerate(pool)
        ]
        kept, removed, _ = dedup(new, pool, Category.GENERAL_VQA, threshold=0.9)
        assert kept == []
        assert len(removed) == 5

    def test_threshold_range_enforced(self):
        rng = np.random.default_rng(1)
        pool = random_records("p", 2, 4, rng)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValidationError, match="threshold"):
                dedup(pool, pool, Category.GENERAL_VQA, threshold=bad)


class TestSourceAdmission:
    def _report(self, score):
        return SimilarityReport(
            source_name="x", category=Category.OCR_QA, score=score, max_term=score
        )

    def test_high_score_goes_to_review(self):
        assert source_admission(self._report(0.45)) == "review"

    def test_low_score_is_distinct(self):
        assert source_admission(self._report(0.02)) == "distinct"

    def test_boundary_is_review(self):
        assert source_admission(self._report(0.3)) == "review"
