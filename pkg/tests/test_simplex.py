import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sqsd.errors import InvalidArgument
from sqsd.simplex import (SparseDistribution, TokenDistribution, apply_temperature, densify,
                          entropy_bits, sparsify_threshold, sparsify_top_k, threshold_support,
                          tv_distance)

from conftest import prob_vectors


def td(values):
    return TokenDistribution(np.array(values, dtype=float))


class TestTokenDistribution:
    def test_rejects_negative(self):
        with pytest.raises(InvalidArgument):
            td([1.2, -0.2])

    def test_rejects_bad_sum(self):
        with pytest.raises(InvalidArgument):
            td([0.5, 0.4])

    def test_accepts_within_tolerance(self):
        assert td([0.5, 0.5 + 5e-10]).vocab_size == 2

    def test_probs_are_read_only(self):
        d = td([0.25, 0.75])
        with pytest.raises(ValueError):
            d.probs[0] = 1.0


class TestTV:
    def test_half(self):
        assert tv_distance(td([0.5, 0.5]), td([1.0, 0.0])) == 0.5

    def test_three_way(self):
        assert tv_distance(td([0.7, 0.2, 0.1]), td([0.5, 0.3, 0.2])) == pytest.approx(0.2, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            tv_distance(td([1.0]), td([0.5, 0.5]))

    @given(prob_vectors(2, 12), st.data())
    def test_symmetric_and_bounded(self, a, data):
        b = data.draw(prob_vectors(a.size, a.size))
        x, y = TokenDistribution(a), TokenDistribution(b)
        assert tv_distance(x, y) == tv_distance(y, x)
        assert 0.0 <= tv_distance(x, y) <= 1.0 + 1e-12
        assert tv_distance(x, x) == 0.0


class TestTemperature:
    def test_uniform(self):
        assert np.allclose(apply_temperature([0.0, 0.0], 1.0).probs, [0.5, 0.5])

    def test_argmax_limit(self):
        assert apply_temperature([10.0, 0.0, 0.0], 0.0).probs.tolist() == [1.0, 0.0, 0.0]

    def test_argmax_tie_goes_to_first(self):
        assert apply_temperature([1.0, 3.0, 3.0], 0.0).probs.tolist() == [0.0, 1.0, 0.0]

    def test_closed_form(self):
        out = apply_temperature([math.log(3), 0.0], 1.0).probs
        assert out == pytest.approx([0.75, 0.25], abs=1e-15)

    def test_non_finite(self):
        with pytest.raises(InvalidArgument):
            apply_temperature([0.0, np.inf], 1.0)

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=20),
           st.floats(0.05, 5.0), st.floats(0.05, 5.0))
    def test_entropy_nondecreasing_in_temperature(self, logits, t1, t2):
        lo, hi = sorted((t1, t2))
        h_lo = entropy_bits(apply_temperature(logits, lo))
        h_hi = entropy_bits(apply_temperature(logits, hi))
        assert h_hi >= h_lo - 1e-9


class TestTopK:
    def test_example(self):
        s = sparsify_top_k(td([0.6, 0.3, 0.08, 0.02]), 2)
        assert s.support.tolist() == [0, 1]
        assert s.masses == pytest.approx([2 / 3, 1 / 3], abs=1e-15)
        assert s.dropped_mass == pytest.approx(0.1, abs=1e-15)

    def test_full_support(self):
        d = td([0.1, 0.2, 0.7])
        s = sparsify_top_k(d, 3)
        assert s.support.tolist() == [0, 1, 2]
        assert np.array_equal(s.masses, d.probs)
        assert s.dropped_mass == 0.0

    def test_tie_break(self):
        s = sparsify_top_k(td([0.25] * 4), 1)
        assert s.support.tolist() == [0]
        assert s.masses.tolist() == [1.0]
        assert s.dropped_mass == 0.75

    def test_support_is_sorted_even_when_order_is_not(self):
        assert sparsify_top_k(td([0.1, 0.2, 0.7]), 2).support.tolist() == [1, 2]

    @pytest.mark.parametrize("k", [0, 5])
    def test_out_of_range(self, k):
        with pytest.raises(InvalidArgument):
            sparsify_top_k(td([0.25] * 4), k)


class TestThreshold:
    def test_example(self):
        s = sparsify_threshold(td([0.6, 0.3, 0.08, 0.02]), 0.1)
        assert s.support.tolist() == [0, 1]
        assert s.dropped_mass == pytest.approx(0.1, abs=1e-15)

    def test_negative_beta_keeps_all(self):
        s = sparsify_threshold(td([0.5, 0.25, 0.25]), -0.5)
        assert s.k == 3 and s.dropped_mass == 0.0

    def test_fallback_to_argmax(self):
        s = sparsify_threshold(td([0.3, 0.4, 0.3]), 0.9)
        assert s.support.tolist() == [1]
        assert s.dropped_mass == pytest.approx(0.6)

    def test_raw_support_can_be_empty(self):
        assert threshold_support(td([0.5, 0.5]), 0.9).size == 0

    def test_boundary_is_inclusive(self):
        assert sparsify_threshold(td([0.5, 0.25, 0.25]), 0.25).k == 3


class TestDensify:
    def test_roundtrip(self):
        s = SparseDistribution([1, 3], [0.25, 0.75], 0.0)
        assert densify(s, 5).probs.tolist() == [0.0, 0.25, 0.0, 0.75, 0.0]

    def test_support_too_large(self):
        with pytest.raises(InvalidArgument):
            densify(SparseDistribution([0, 4], [0.5, 0.5], 0.0), 4)

    def test_rejects_unsorted_support(self):
        with pytest.raises(InvalidArgument):
            SparseDistribution([3, 1], [0.5, 0.5], 0.0)


@given(prob_vectors(1, 32), st.integers(1, 32), st.floats(-0.1, 1.1))
def test_dropped_mass_is_tv_to_source(p, k, beta):
    q = TokenDistribution(p)
    for s in (sparsify_top_k(q, min(k, q.vocab_size)), sparsify_threshold(q, beta)):
        assert tv_distance(q, densify(s, q.vocab_size)) == pytest.approx(s.dropped_mass, abs=1e-9)
