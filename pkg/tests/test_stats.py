import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulcerforge.errors import DataError
from ulcerforge.stats import (pearson_r, regularized_incomplete_beta,
                              t_test_samples, t_test_summary, t_two_tailed_p)

finite_floats = st.floats(-100.0, 100.0)


class TestIncompleteBeta:
    def test_bounds(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0

    def test_symmetry_identity(self):
        # I_x(a, b) = 1 - I_{1-x}(b, a)
        for a, b, x in [(2.0, 5.0, 0.3), (0.5, 0.5, 0.7), (49.0, 0.5, 0.93)]:
            lhs = regularized_incomplete_beta(a, b, x)
            rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_uniform_case(self):
        # I_x(1, 1) = x
        for x in (0.1, 0.5, 0.9):
            assert regularized_incomplete_beta(1.0, 1.0, x) == pytest.approx(x, abs=1e-12)

    def test_against_closed_form_a2_b2(self):
        # I_x(2, 2) = x^2 (3 - 2x)
        for x in (0.2, 0.5, 0.8):
            assert regularized_incomplete_beta(2.0, 2.0, x) == \
                pytest.approx(x * x * (3 - 2 * x), abs=1e-12)


class TestTTestSamples:
    def test_identical_lists(self):
        r = t_test_samples([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.t == 0.0 and r.p == 1.0

    def test_textbook_example(self):
        # pooled-variance formula + t CDF oracle (frozen from scipy)
        r = t_test_samples([1, 2, 3], [2, 3, 4], "student")
        assert r.t == pytest.approx(-1.2247448, abs=1e-6)
        assert r.df == 4
        assert r.p == pytest.approx(0.2878641, abs=1e-6)

    def test_swap_negates_t_preserves_p(self):
        a, b = [1.0, 2.5, 3.0, 4.0], [2.0, 3.5, 5.0]
        r1 = t_test_samples(a, b)
        r2 = t_test_samples(b, a)
        assert r1.t == pytest.approx(-r2.t, abs=1e-12)
        assert r1.p == pytest.approx(r2.p, abs=1e-12)

    def test_zero_variance_equal_means(self):
        r = t_test_samples([2.0, 2.0], [2.0, 2.0])
        assert r.t == 0.0 and r.p == 1.0

    def test_zero_variance_unequal_means_rejected(self):
        with pytest.raises(DataError):
            t_test_samples([1.0, 1.0], [2.0, 2.0])

    def test_short_samples_rejected(self):
        with pytest.raises(DataError):
            t_test_samples([1.0], [2.0, 3.0])

    def test_welch_differs_under_unequal_variance(self):
        a = [0.1, 0.2, 0.15, 0.12, 0.18]
        b = [1.0, 5.0, -3.0, 4.0, 2.0]
        student = t_test_samples(a, b, "student")
        welch = t_test_samples(a, b, "welch")
        assert welch.df < student.df

    @given(st.lists(finite_floats, min_size=2, max_size=12),
           st.lists(finite_floats, min_size=2, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_samples_agree_with_summary(self, a, b):
        mean = lambda v: math.fsum(v) / len(v)
        sd = lambda v: math.sqrt(math.fsum((x - mean(v)) ** 2 for x in v) / (len(v) - 1))
        try:
            full = t_test_samples(a, b, "student")
        except DataError:
            return
        summary = t_test_summary(mean(a), sd(a), len(a), mean(b), sd(b), len(b), "student")
        assert summary.t == pytest.approx(full.t, abs=1e-9)
        assert summary.p == pytest.approx(full.p, abs=1e-9)


class TestTTestSummary:
    def test_published_group_stats_give_p_near_001(self):
        # (2.52, 0.70, 50) vs (2.10, 0.88, 50)
        r = t_test_summary(2.52, 0.70, 50, 2.10, 0.88, 50, "student")
        assert 0.005 <= r.p <= 0.015
        assert r.t == pytest.approx(2.641, abs=1e-3)
        assert r.df == 98

    def test_equal_means_give_t_zero(self):
        r = t_test_summary(1.5, 0.3, 10, 1.5, 0.9, 12)
        assert r.t == 0.0 and r.p == 1.0

    def test_negative_sd_rejected(self):
        with pytest.raises(DataError):
            t_test_summary(1.0, -0.1, 10, 1.0, 0.5, 10)

    def test_p_monotone_decreasing_in_t(self):
        for df in (4, 30, 98):
            ps = [t_two_tailed_p(t, df) for t in np.linspace(0.0, 8.0, 33)]
            assert all(x >= y - 1e-15 for x, y in zip(ps, ps[1:]))
            assert all(0.0 < p <= 1.0 for p in ps)


class TestPearson:
    def test_perfect_correlation(self):
        x = [1.0, 2.0, 5.0, 7.0]
        assert pearson_r(x, x) == pytest.approx(1.0, abs=1e-12)
        assert pearson_r(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_example(self):
        assert pearson_r([1, 2, 3], [2, 4, 7]) == pytest.approx(0.9934, abs=1e-4)

    def test_constant_series_rejected(self):
        with pytest.raises(DataError):
            pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            pearson_r([1.0, 2.0], [1.0, 2.0, 3.0])

    @given(st.lists(st.tuples(finite_floats, finite_floats), min_size=3, max_size=20),
           st.floats(0.01, 50.0), finite_floats)
    @settings(max_examples=60, deadline=None)
    def test_affine_invariance(self, pairs, scale, shift):
        x = [p[0] for p in pairs]
        y = [p[1] for p in pairs]
        # a sub-epsilon spread would collapse to a constant under the shift
        if max(x) - min(x) < 1e-3 or max(y) - min(y) < 1e-3:
            return
        base = pearson_r(x, y)
        mapped = pearson_r([scale * v + shift for v in x], y)
        assert mapped == pytest.approx(base, abs=1e-6)
