from __future__ import annotations

import math

import numpy as np
import pytest

from corpusforge.corpus import ValidationError
from corpusforge.pack import (
    PackPlan,
    SeparatorPolicy,
    TileGrid,
    balanced_knapsack,
    chunked_pack,
    estimate_image_tokens,
    estimate_sample_length,
    materialize_packs,
    naive_greedy_knapsack,
    pack_pool,
    pack_stats,
    select_tile_grid,
    spfhp,
)

from conftest import make_sample, make_text_sample


def reference_balanced_knapsack(samples: list[int], L: int, delta: int = 0) -> list[list[int]]:
    """Deliberately naive reference implementation of the balance-aware
    packing rule; the oracle the production path must match exactly."""
    samples = list(samples)
    samples.sort(reverse=True)
    total_length = sum(samples)
    min_knapsacks = (total_length + L - 1) // L + delta
    knapsacks = [[] for _ in range(min_knapsacks)]
    knapsack_lengths = [0] * min_knapsacks
    ks_index = 0
    sample_index = 0
    while sample_index < len(samples):
        length = samples[sample_index]
        if knapsack_lengths[ks_index] + length <= L:
            knapsacks[ks_index].append(length)
            knapsack_lengths[ks_index] += length
            sample_index += 1
        else:
            knapsacks.append([])
            knapsack_lengths.append(0)
        ks_index = min(range(len(knapsack_lengths)), key=knapsack_lengths.__getitem__)
    return knapsacks


def enumerate_best_grid(width: int, height: int, max_tiles: int = 12):
    """Exhaustive oracle for tile-grid choice: minimal |log aspect error|
    among all grids, then the documented tie rule."""
    target = math.log(width / height)
    grids = [
        (r, c)
        for r in range(1, max_tiles + 1)
        for c in range(1, max_tiles + 1)
        if r * c <= max_tiles
    ]
    grids.sort(key=lambda rc: (rc[0] * rc[1], rc[0]))
    best, best_err = None, math.inf
    for r, c in grids:
        err = abs(target - math.log(c / r))
        if err < best_err - 1e-12:
            best, best_err = (r, c), err
        elif abs(err - best_err) <= 1e-12 and r * c > best[0] * best[1]:
            if width * height > r * c * 448 * 448:
                best = (r, c)
    return best


class TestTileGrid:
    def test_wide_image_gets_one_by_two(self):
        grid = select_tile_grid(896, 448)
        assert (grid.rows, grid.cols) == (1, 2)

    def test_square_image_identity_grid(self):
        grid = select_tile_grid(448, 448)
        assert (grid.rows, grid.cols) == (1, 1)

    def test_tall_strip_twelve_by_one(self):
        grid = select_tile_grid(448, 5376)
        assert (grid.rows, grid.cols) == (12, 1)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = int(rng.integers(16, 6000))
            h = int(rng.integers(16, 6000))
            grid = select_tile_grid(w, h)
            assert (grid.rows, grid.cols) == enumerate_best_grid(w, h)

    def test_large_square_upgrades_on_tie(self):
        grid = select_tile_grid(1344, 1344)  # 9 tiles of pixels
        assert (grid.rows, grid.cols) == (2, 2)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValidationError):
            select_tile_grid(0, 448)


class TestImageTokens:
    @pytest.mark.parametrize(
        "rows,cols,expected", [(1, 1, 512), (2, 2, 1280), (1, 12, 3328), (3, 4, 3328)]
    )
    def test_formula_examples(self, rows, cols, expected):
        assert estimate_image_tokens(TileGrid(rows, cols)) == expected

    def test_exhaustive_grid_family(self):
        for rows in range(1, 13):
            for cols in range(1, 13):
                if rows * cols <= 12:
                    assert (
                        estimate_image_tokens(TileGrid(rows, cols))
                        == (rows * cols + 1) * 256
                    )


class TestEstimateLength:
    def test_stored_length_passthrough(self):
        s = make_text_sample("x", token_length=100)
        assert estimate_sample_length(s) == 100

    def test_text_plus_image(self):
        # 160 chars of total turn text -> 40 tokens; one 448x448 image
        # -> 512 tokens.
        s = make_sample("x", question="q" * 60, answer="a" * 100)
        assert estimate_sample_length(s) == 40 + 512

    def test_unknown_dims_fall_back_to_single_tile(self):
        s = make_sample("x", question="qqqq", answer="aaaa", image_dims=None)
        assert estimate_sample_length(s) == 2 + 512


class TestBalanced:
    def test_single_sample(self):
        plan = balanced_knapsack([5], 10)
        assert plan.lengths() == [[5]]

    def test_hand_simulated_example(self):
        plan = balanced_knapsack([7, 5, 4, 4], 10)
        assert plan.lengths() == [[7], [5, 4], [4]]

    def test_perfectly_balanced_example(self):
        plan = balanced_knapsack([6, 6, 2, 2], 8)
        assert plan.lengths() == [[6, 2], [6, 2]]

    def test_matches_reference_interpreter(self):
        rng = np.random.default_rng(1)
        for delta in (0, 20):
            for _ in range(50):
                n = int(rng.integers(1, 120))
                lengths = rng.integers(1, 2048, size=n).tolist()
                plan = balanced_knapsack(lengths, 2048, delta)
                ref = [k for k in reference_balanced_knapsack(lengths, 2048, delta) if k]
                assert plan.lengths() == ref

    def test_oversize_sample_names_index(self):
        with pytest.raises(ValidationError, match="sample 1"):
            balanced_knapsack([5, 11], 10)

    def test_empty_input_empty_plan(self):
        plan = balanced_knapsack([], 10, delta=20)
        assert plan.knapsacks == []

    def test_delta_overprovision_counted(self):
        plan = balanced_knapsack([3], 10, delta=20)
        assert plan.lengths() == [[3]]
        assert plan.unused_knapsacks == 20


class TestNaiveGreedy:
    def test_imbalance_pathology(self):
        plan = naive_greedy_knapsack([6, 6, 2, 2], 8)
        assert plan.lengths() == [[6], [6, 2], [2]]
        assert plan.totals() == [6, 8, 2]

    def test_single(self):
        assert naive_greedy_knapsack([5], 10).lengths() == [[5]]

    def test_three_fours(self):
        assert naive_greedy_knapsack([4, 4, 4], 8).lengths() == [[4, 4], [4]]


class TestSpfhp:
    def test_balanced_example(self):
        assert spfhp([6, 6, 2, 2], 8).lengths() == [[6, 2], [6, 2]]

    def test_single(self):
        assert spfhp([5], 10).lengths() == [[5]]

    def test_saturated_packs(self):
        assert spfhp([8, 8, 8], 8).lengths() == [[8], [8], [8]]

    def test_tie_goes_to_lowest_index(self):
        # Two packs at total 6; the next 2 must land in the first.
        plan = spfhp([6, 6, 2], 8)
        assert plan.lengths() == [[6, 2], [6]]


class TestPackStats:
    def test_equal_totals(self):
        plan = balanced_knapsack([6, 6, 2, 2], 8)
        stats = pack_stats(plan)
        assert stats.total_std == pytest.approx(0.0)
        assert stats.efficiency == pytest.approx(1.0)

    def test_imbalanced_totals_std(self):
        plan = naive_greedy_knapsack([6, 6, 2, 2], 8)
        stats = pack_stats(plan)
        assert stats.total_std == pytest.approx(2.494438, abs=1e-5)

    def test_single_knapsack_zero_std(self):
        stats = pack_stats(balanced_knapsack([4, 3], 10))
        assert stats.total_std == 0.0 and stats.max_length_std == 0.0

    def test_empty_plan_rejected(self):
        with pytest.raises(ValidationError, match="empty plan"):
            pack_stats(PackPlan("balanced", 8, 0, []))


class TestConservationAndCapacity:
    @pytest.mark.parametrize("method", ["balanced", "greedy", "spfhp"])
    def test_fuzzed(self, method):
        from corpusforge.pack import _METHODS

        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            capacity = int(rng.integers(64, 4096))
            lengths = rng.integers(1, capacity + 1, size=n).tolist()
            plan = _METHODS[method](lengths, capacity, 0, None)
            assert all(t <= capacity for t in plan.totals())
            flat = sorted(l for ks in plan.lengths() for l in ks)
            assert flat == sorted(lengths)
            # pigeonhole lower bound on knapsack count
            assert len(plan.knapsacks) >= -(-sum(lengths) // capacity)


class TestMaterialize:
    def test_pack_and_expand(self):
        pool = [
            make_text_sample("a", token_length=40),
            make_text_sample("b", token_length=30),
        ]
        plan = pack_pool(pool, capacity=100)
        packed = materialize_packs(pool, plan)
        assert len(packed) == 1
        record = packed[0]
        assert record["sample_ids"] == ["a", "b"]
        assert record["total_length"] == 70
        values = [c["value"] for c in record["conversations"] if c["from"] == "boundary"]
        assert values == [SeparatorPolicy().boundary]

    def test_unknown_id_rejected(self):
        pool = [make_text_sample("a", token_length=10)]
        plan = PackPlan("balanced", 100, 0, [[("ghost", 10)]])
        with pytest.raises(ValidationError, match="ghost"):
            materialize_packs(pool, plan)

    def test_empty_plan_empty_corpus(self):
        assert materialize_packs([], PackPlan("balanced", 8, 0, [])) == []

    def test_repeat_factor_expands(self):
        pool = [make_text_sample("a", token_length=10, repeat_factor=3)]
        plan = pack_pool(pool, capacity=100)
        flat = [sid for ks in plan.knapsacks for sid, _ in ks]
        assert flat.count("a") == 3


class TestChunked:
    def test_one_chunk_matches_unchunked(self):
        pool = [make_text_sample(f"s{i}", token_length=10 + i) for i in range(10)]
        chunked = chunked_pack(pool, capacity=64, chunk_size=4096)
        whole = pack_pool(pool, capacity=64)
        assert chunked.lengths() == whole.lengths()

    def test_two_chunks_concatenate(self):
        pool = [make_text_sample(f"s{i}", token_length=8) for i in range(8)]
        plan = chunked_pack(pool, capacity=16, chunk_size=4)
        # Each chunk of 4 samples packs independently into 2 knapsacks.
        assert len(plan.knapsacks) == 4
        first_ids = {sid for ks in plan.knapsacks[:2] for sid, _ in ks}
        assert first_ids == {"s0", "s1", "s2", "s3"}

    def test_chunk_one_isolates_samples(self):
        pool = [make_text_sample(f"s{i}", token_length=4) for i in range(3)]
        plan = chunked_pack(pool, capacity=16, chunk_size=1)
        assert plan.lengths() == [[4], [4], [4]]
