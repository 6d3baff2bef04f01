import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import (
    brute_force_ranks,
    enumerate_permutation_p,
    pearson_extended,
    pearson_p_oracle,
    spearman_closed_form,
)
from scipy import stats as sps

from fedready.errors import DegenerateInputError, DomainError
from fedready.stats import CorrelationResult, pearson, rank_average_ties, spearman

EXAMPLE_X = (1, 2, 3, 4, 5)
EXAMPLE_Y = (2, 1, 4, 3, 7)

MONOTONE = {
    "exp": lambda v: np.exp(v / 10),
    "cube": lambda v: v ** 3,
    "arctan": lambda v: np.arctan(v / 10),
    "affine": lambda v: 3 * v - 7,
    "sinh": lambda v: np.sinh(v / 20),
}

grid_values = st.lists(st.integers(-500, 500).map(lambda k: k / 10), min_size=3, max_size=12)


class TestPearson:
    def test_perfect_line(self):
        x = np.arange(8.0)
        res = pearson(x, 2 * x + 1)
        assert (res.r, res.p_value, res.n, res.method) == (1.0, 0.0, 8, "pearson")

    def test_perfect_negative(self):
        res = pearson([1, 2, 3, 4], [-1, -2, -3, -4])
        assert res.r == -1.0 and res.p_value == 0.0

    def test_five_point_example_against_extended_precision(self):
        res = pearson(EXAMPLE_X, EXAMPLE_Y)
        r_oracle, p_oracle = pearson_p_oracle(EXAMPLE_X, EXAMPLE_Y)
        # sxy = 12, sxx = 10, syy = 21.2
        assert r_oracle == pytest.approx(12 / math.sqrt(212), abs=1e-15)
        assert abs(res.r - r_oracle) <= 1e-12
        assert abs(res.p_value - p_oracle) <= 1e-10

    def test_matches_scipy(self):
        g = np.random.default_rng(0)
        for _ in range(20):
            x, y = g.standard_normal(9), g.standard_normal(9)
            ref = sps.pearsonr(x, y)
            res = pearson(x, y)
            assert res.r == pytest.approx(ref[0], abs=1e-12)
            assert res.p_value == pytest.approx(ref[1], rel=1e-8)

    def test_constant_input(self):
        with pytest.raises(DegenerateInputError):
            pearson([1, 1, 1], [1, 2, 3])

    @pytest.mark.parametrize("x, y", [([1, 2], [1, 2]), ([1, 2, 3], [1, 2]), ([1, 2, np.nan], [1, 2, 3])])
    def test_domain(self, x, y):
        with pytest.raises(DomainError):
            pearson(x, y)

    @given(grid_values, st.integers(0, 2**31), st.floats(-5, 5).filter(lambda a: abs(a) > 0.1),
           st.floats(-5, 5).filter(lambda c: abs(c) > 0.1), st.floats(-10, 10), st.floats(-10, 10))
    def test_affine_invariance(self, x, seed, a, c, b, d):
        x = np.array(x)
        y = np.random.default_rng(seed).standard_normal(len(x))
        if np.ptp(x) == 0:
            return
        base = pearson(x, y).r
        moved = pearson(a * x + b, c * y + d).r
        assert moved == pytest.approx(math.copysign(1, a * c) * base, abs=1e-12)

    @given(st.integers(3, 15), st.integers(0, 2**31))
    def test_p_symmetry(self, n, seed):
        g = np.random.default_rng(seed)
        x, y = g.standard_normal(n), g.standard_normal(n)
        p = pearson(x, y).p_value
        assert pearson(y, x).p_value == pytest.approx(p, abs=1e-15)
        assert pearson(-x, -y).p_value == pytest.approx(p, abs=1e-12)
        assert 0 <= p <= 1

    def test_extended_precision_agrees_on_random_data(self):
        g = np.random.default_rng(1)
        for _ in range(10):
            x, y = g.standard_normal(8), g.standard_normal(8)
            assert pearson(x, y).r == pytest.approx(pearson_extended(x, y), abs=1e-13)


class TestRanks:
    @pytest.mark.parametrize("x, ranks", [
        ((10, 20, 30), [1, 2, 3]),
        ((5, 5), [1.5, 1.5]),
        ((3, 1, 3, 2), [3.5, 1, 3.5, 2]),
        ((7,), [1]),
        ((2, 2, 2, 1), [3, 3, 3, 1]),
    ])
    def test_examples(self, x, ranks):
        assert rank_average_ties(x).tolist() == ranks

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30))
    def test_matches_brute_force(self, x):
        assert rank_average_ties(x).tolist() == brute_force_ranks(x)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30))
    def test_rank_sum(self, x):
        n = len(x)
        assert rank_average_ties(x).sum() == n * (n + 1) / 2

    def test_empty(self):
        with pytest.raises(DomainError):
            rank_average_ties([])


class TestSpearman:
    def test_increasing(self):
        assert spearman([1, 2, 3, 4], [1, 8, 27, 100]).r == 1.0

    def test_decreasing(self):
        assert spearman([1, 2, 3, 4], [9, 5, 2, -1]).r == -1.0

    def test_one_swap(self):
        res = spearman([1, 2, 3, 4], [10, 30, 20, 40])
        assert abs(res.r - 0.8) <= 1e-12
        assert res.method == "spearman"

    def test_ties_match_pearson_on_brute_force_ranks(self):
        x, y = [3, 1, 3, 2, 5, 5], [1, 1, 2, 4, 4, 6]
        ref = pearson(brute_force_ranks(x), brute_force_ranks(y))
        res = spearman(x, y)
        assert abs(res.r - ref.r) <= 1e-12 and res.p_value == ref.p_value

    def test_ties_match_scipy(self):
        g = np.random.default_rng(3)
        for _ in range(20):
            x, y = g.integers(0, 4, 10), g.integers(0, 4, 10)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            ref = sps.spearmanr(x, y)
            res = spearman(x, y)
            assert res.r == pytest.approx(ref[0], abs=1e-12)
            assert res.p_value == pytest.approx(ref[1], rel=1e-8, abs=1e-14)

    @given(st.permutations(list(range(12))).flatmap(
        lambda p: st.tuples(st.just(p), st.permutations(list(range(len(p)))))))
    def test_closed_form_without_ties(self, pair):
        x, y = pair
        assert spearman(x, y).r == pytest.approx(spearman_closed_form(x, y), abs=1e-12)

    @settings(max_examples=1000)
    @given(grid_values, st.integers(0, 2**31), st.sampled_from(sorted(MONOTONE)), st.booleans())
    def test_monotone_transform_invariance(self, x, seed, name, on_x):
        x = np.array(x)
        y = np.random.default_rng(seed).integers(-20, 20, len(x)) / 2
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            return
        f = MONOTONE[name]
        base = spearman(x, y).r
        moved = spearman(f(x), y).r if on_x else spearman(x, f(y)).r
        assert abs(moved - base) <= 1e-12

    def test_constant_ranks(self):
        with pytest.raises(DegenerateInputError):
            spearman([1, 2, 3], [4, 4, 4])


class TestExactPermutation:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_enumeration(self, seed):
        g = np.random.default_rng(seed)
        n = int(g.integers(3, 7))
        x = g.integers(0, 4, n) if seed % 2 else g.permutation(n)
        y = g.integers(0, 4, n) if seed % 3 == 0 else g.permutation(n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            pytest.skip("degenerate draw")
        res = spearman(x, y, exact=True)
        ref = enumerate_permutation_p(rank_average_ties(x), rank_average_ties(y))
        assert res.p_value == pytest.approx(ref, abs=1e-12)

    def test_perfect_order(self):
        # only the identity and its reversal reach |rho| = 1 among 4! orderings
        assert spearman([1, 2, 3, 4], [1, 2, 3, 4], exact=True).p_value == pytest.approx(2 / 24, abs=1e-15)

    def test_large_n_rejected(self):
        with pytest.raises(DomainError):
            spearman(range(11), range(11), exact=True)


class TestResult:
    def test_cell_and_flag(self):
        res = CorrelationResult(0.91234, 0.0012, 8, "pearson")
        assert res.cell() == "0.912(0.001)" and res.significant
        assert not CorrelationResult(0.1, 0.05, 8, "pearson").significant
