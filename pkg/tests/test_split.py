import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dumpy.exceptions import CannotSplitError
from dumpy.series import promote_rows, symbol_midpoints
from dumpy.split import (SplitPlan, binary_split_plan, child_size_distributions,
                         choose_split_plan, lambda_range, score_plan, segment_variances, splittable_segments)

from conftest import oracle_choice, projected, random_node


class TestLambdaRange:
    def test_reference_example(self):
        assert lambda_range(100000, 10000, 0.5, 3.0, 16) == (2, 4)
        for lam in (2, 3, 4):
            assert 0.5 <= 100000 / 2 ** lam / 10000 <= 3.0
        for lam in (1, 5):
            assert not 0.5 <= 100000 / 2 ** lam / 10000 <= 3.0

    def test_just_above_threshold(self):
        assert lambda_range(10001, 10000, 0.5, 3.0, 16)[0] == 1

    def test_clamped_to_w(self):
        assert lambda_range(0.5 * 100 * 2 ** 4 * 10, 100, 0.5, 3.0, 4)[1] == 4

    def test_never_empty(self):
        lo, hi = lambda_range(100, 10, 5.0, 5.0, 8)
        assert lo <= hi

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 10 ** 7), st.integers(1, 10 ** 5), st.integers(1, 32))
    def test_window_properties(self, extra, th, w):
        c_N = th + extra
        lo, hi = lambda_range(c_N, th, 0.5, 3.0, w)
        assert 1 <= lo <= hi
        assert lo <= w or lo == hi


class TestVariances:
    def test_identical_rows(self):
        rows = np.full((10, 4), 77, np.uint8)
        np.testing.assert_allclose(segment_variances(rows, [0] * 4, 256), 0, atol=1e-24)

    def test_two_points(self):
        rows = np.array([[0, 5], [255, 5]], np.uint8)
        m1, m2 = symbol_midpoints(np.array([0, 1]), np.array([1, 1]), 256)
        v = segment_variances(rows, [0, 0], 256)
        assert v[0] == pytest.approx(((m1 - m2) / 2) ** 2, rel=1e-12)
        assert v[1] == 0

    def test_full_depth_excluded(self):
        rows = np.array([[0, 5], [255, 9]], np.uint8)
        assert segment_variances(rows, [8, 0], 256)[0] == 0
        with pytest.raises(CannotSplitError):
            segment_variances(rows, [8, 8], 256)

    def test_decomposition_on_random_plans(self, rng):
        rows, depths = random_node(1, 1000)
        var = segment_variances(rows, depths, 256)
        for _ in range(20):
            lam = int(rng.integers(1, 7))
            plan = tuple(sorted(rng.choice(6, lam, replace=False)))
            X = projected(rows, depths, plan)
            direct = np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))
            assert sum(var[s] for s in plan) == pytest.approx(direct, rel=1e-9)


class TestChildSizes:
    def test_w5_all_plans_match_recount(self):
        rows, depths = random_node(5, 500, w=5)
        plans = [p for lam in range(1, 6) for p in combinations(range(5), lam)]
        assert len(plans) == 31
        got = child_size_distributions(rows, depths, plans, 256)
        for p in plans:
            expect = np.bincount(promote_rows(depths, rows, p, 8), minlength=1 << len(p))
            assert np.array_equal(got[p], expect), p

    def test_full_plan_is_base_histogram(self):
        rows, depths = random_node(6, 300, w=4)
        p = (0, 1, 2, 3)
        got = child_size_distributions(rows, depths, [p], 256)[p]
        assert got.sum() == 300 and len(got) == 16

    def test_single_segment(self):
        rows = np.array([[0], [200], [130], [10]], np.uint8)
        assert child_size_distributions(rows, [0], [(0,)], 256)[(0,)].tolist() == [2, 2]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
    def test_subset_of_plans(self, seed, lam):
        rows, depths = random_node(seed, 200, w=8)
        segs = splittable_segments(depths, 8)
        plans = list(combinations(segs, min(lam, len(segs))))[:10]
        got = child_size_distributions(rows, depths, plans, 256)
        for p in plans:
            assert np.array_equal(got[p], np.bincount(promote_rows(depths, rows, p, 8), minlength=1 << len(p)))


class TestScore:
    def test_even_split_second_term_is_alpha(self):
        plan = SplitPlan((0, 1), np.array([50, 50, 50, 50]), 100, variance_sum=0.0)
        assert score_plan(plan, 0.2) == pytest.approx(1 + 0.2)
        assert plan.overflow_ratio == 0 and plan.fillfactor_std == 0

    def test_all_rows_in_one_child(self):
        c_N, th = 150, 100
        plan = SplitPlan((3,), np.array([c_N, 0]), th, variance_sum=0.0)
        score_plan(plan, 0.2)
        assert plan.overflow_ratio == 0.5
        assert plan.fillfactor_std == pytest.approx(c_N / (2 * th))
        assert plan.score == pytest.approx(1 + 0.2 * math.exp(-1.5 * c_N / (2 * th)))

    def test_variance_monotone(self):
        a = SplitPlan((0, 1), np.array([5, 5, 5, 5]), 10, variance_sum=0.4)
        b = SplitPlan((0, 1), np.array([5, 5, 5, 5]), 10, variance_sum=0.8)
        assert score_plan(b, 0.2) > score_plan(a, 0.2)

    def test_empty_children_count(self):
        plan = SplitPlan((0, 1), np.array([100, 0, 0, 0]), 100, variance_sum=0.0)
        score_plan(plan, 0.2)
        assert plan.fillfactor_std == pytest.approx(np.std([1, 0, 0, 0]))


class TestChoose:
    def test_dominant_pair(self, rng):
        rows = np.full((4000, 4), 128, np.uint8)
        rows[:, 1] = rng.integers(0, 256, 4000)
        rows[:, 2] = rng.integers(0, 256, 4000)
        rows[:7, 0] = 3
        rows[:5, 3] = 9
        plan = choose_split_plan(rows, [0] * 4, 1000, F_l=1.0, F_r=1.0)
        assert plan.csl == (1, 2)

    def test_lambda_one(self):
        rows, depths = random_node(9, 101)
        plan = choose_split_plan(rows, depths, 100)
        assert len(plan.csl) == 1
        assert plan.csl == oracle_choice(rows, depths, 100, 1, 1)[1]

    @pytest.mark.parametrize("seed", range(50))
    def test_exhaustive_oracle(self, seed):
        r = np.random.default_rng(seed)
        m = int(r.integers(150, 1200))
        th = int(r.integers(20, 140))
        rows, depths = random_node(seed + 100, m)
        plan = choose_split_plan(rows, depths, th)
        lo, hi = lambda_range(m, th, 0.5, 3.0, len(depths))
        score, csl = oracle_choice(rows, depths, th, lo, hi)
        assert plan.csl == csl
        assert plan.score == pytest.approx(score, rel=1e-9)
        assert min(lo, 6) <= len(plan.csl) <= hi

    @pytest.mark.parametrize("seed", range(15))
    def test_window_agrees_when_argmax_inside(self, seed):
        rows, depths = random_node(seed + 500, 900)
        full = choose_split_plan(rows, depths, 100, exhaustive=True)
        lo, hi = lambda_range(900, 100, 0.5, 3.0, 6)
        if lo <= len(full.csl) <= hi:
            assert choose_split_plan(rows, depths, 100).csl == full.csl

    def test_deterministic(self):
        rows, depths = random_node(3, 700)
        assert choose_split_plan(rows, depths, 50).csl == choose_split_plan(rows.copy(), depths, 50).csl

    def test_cannot_split(self):
        with pytest.raises(CannotSplitError):
            choose_split_plan(np.zeros((5, 2), np.uint8), [8, 8], 2)

    def test_few_splittable_segments_lowers_lambda(self, rng):
        rows = rng.integers(0, 256, (5000, 4)).astype(np.uint8)
        plan = choose_split_plan(rows, [8, 8, 8, 0], 10)
        assert plan.csl == (3,)

    def test_binary_baseline_picks_max_variance(self, rng):
        rows = np.full((100, 3), 128, np.uint8)
        rows[:50, 2] = 0
        rows[:10, 0] = 0
        plan = binary_split_plan(rows, [0, 0, 0], 10)
        assert plan.csl == (2,) and plan.child_sizes.tolist() == [50, 50]
