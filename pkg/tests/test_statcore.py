"""Frozen oracles and properties for the numerical substrate."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dssmooth.errors import DomainError, ShapeError
from dssmooth.statcore import (RandomStream, clamp_probability, entrywise_l1,
                               frobenius_norm, matmul, std_normal_cdf,
                               std_normal_inv_cdf, std_normal_pdf)

# Reference values computed once from the closed forms
#   cdf(x)  = erfc(-x / sqrt(2)) / 2
#   pdf(x)  = exp(-x^2 / 2) / sqrt(2 pi)
# and cross-checked against published normal tables.
CDF_ORACLE = [
    (0.0, 0.5),
    (0.6, 0.7257468822499270),
    (1.0, 0.8413447460685429),
    (-1.0, 0.15865525393145707),
    (1.959963984540054, 0.975),
    (-1.959963984540054, 0.025),
    (3.0, 0.9986501019683699),
]

QUANTILE_ORACLE = [
    (0.5, 0.0),
    (0.975, 1.959963984540054),
    (0.025, -1.959963984540054),
    (0.8413447460685429, 1.0),
    (0.9986501019683699, 3.0),
]


class TestNormalCdf:
    @pytest.mark.parametrize("x,expected", CDF_ORACLE)
    def test_matches_oracle(self, x, expected):
        assert std_normal_cdf(x) == pytest.approx(expected, abs=1e-12)

    def test_zero_is_exactly_half(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_rejects_non_finite(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(DomainError):
                std_normal_cdf(bad)

    @given(st.floats(min_value=-8.0, max_value=8.0))
    def test_monotone_and_symmetric(self, x):
        assert std_normal_cdf(x) <= std_normal_cdf(x + 1e-3)
        assert std_normal_cdf(-x) == pytest.approx(1.0 - std_normal_cdf(x),
                                                   abs=1e-14)


class TestNormalQuantile:
    @pytest.mark.parametrize("p,expected", QUANTILE_ORACLE)
    def test_matches_oracle(self, p, expected):
        assert std_normal_inv_cdf(p) == pytest.approx(expected, abs=1e-9)

    def test_upper_tail_value(self):
        # the half-width of the central 95% interval
        assert abs(std_normal_inv_cdf(0.975) - 1.959964) < 1e-6

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.3, math.nan])
    def test_rejects_outside_open_interval(self, p):
        with pytest.raises(DomainError):
            std_normal_inv_cdf(p)

    @given(st.floats(min_value=1e-9, max_value=1.0 - 1e-9))
    @settings(max_examples=200)
    def test_round_trip_from_probability(self, p):
        assert std_normal_cdf(std_normal_inv_cdf(p)) == pytest.approx(
            p, abs=1e-11)

    @given(st.floats(min_value=-5.5, max_value=5.5))
    def test_round_trip_from_value(self, x):
        assert std_normal_inv_cdf(std_normal_cdf(x)) == pytest.approx(
            x, abs=1e-8)


def test_pdf_peak_value():
    assert std_normal_pdf(0.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi),
                                                abs=1e-15)


class TestClampProbability:
    def test_clamps_boundaries(self):
        assert clamp_probability(0.0, 100) == 0.005
        assert clamp_probability(1.0, 100) == 0.995

    def test_interior_untouched(self):
        assert clamp_probability(0.4, 100) == 0.4

    def test_tiny_sample_count(self):
        assert clamp_probability(0.9, 1) == 0.5

    def test_rejects_zero_samples(self):
        with pytest.raises(DomainError):
            clamp_probability(0.5, 0)


class TestMatrixHelpers:
    def test_matmul_matches_numpy(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        assert np.array_equal(matmul(a, b), a @ b)

    def test_matmul_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 2)))

    def test_frobenius_oracle(self):
        assert frobenius_norm([[3.0, 4.0]]) == 5.0

    def test_l1_oracle(self):
        assert entrywise_l1([[1.0, -2.0], [3.0, -4.0]]) == 10.0


class TestRandomStream:
    def test_same_path_replays(self):
        a = RandomStream(7).child("x", 3).generator().normal(size=5)
        b = RandomStream(7).child("x", 3).generator().normal(size=5)
        assert np.array_equal(a, b)

    def test_distinct_labels_diverge(self):
        a = RandomStream(7).child("x").generator().normal(size=5)
        b = RandomStream(7).child("y").generator().normal(size=5)
        assert not np.array_equal(a, b)

    def test_distinct_seeds_diverge(self):
        a = RandomStream(7).generator().normal(size=5)
        b = RandomStream(8).generator().normal(size=5)
        assert not np.array_equal(a, b)

    def test_child_does_not_disturb_parent(self):
        parent = RandomStream(3)
        before = parent.generator().normal(size=4)
        parent.child("anything").generator().normal(size=100)
        after = parent.generator().normal(size=4)
        assert np.array_equal(before, after)

    def test_string_and_int_labels_distinct(self):
        a = RandomStream(1).child("2").generator().normal(size=3)
        b = RandomStream(1).child(2).generator().normal(size=3)
        assert not np.array_equal(a, b)

    def test_requires_label(self):
        with pytest.raises(DomainError):
            RandomStream(1).child()
