import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sqsd import conformal
from sqsd.conformal import ThresholdState
from sqsd.errors import ConsistencyError, InvalidArgument
from sqsd.simplex import TokenDistribution, threshold_support

ETA, ALPHA = 0.001, 0.0005


class TestUpdate:
    def test_example(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        assert conformal.update(s, 0.1) == pytest.approx(0.0099005, abs=1e-15)

    def test_on_target_is_fixed_point(self):
        s = ThresholdState(0.3, ETA, ALPHA)
        assert conformal.update(s, ALPHA) == 0.3

    def test_nothing_dropped_moves_up(self):
        s = ThresholdState(0.0, ETA, ALPHA)
        assert conformal.update(s, 0.0) == pytest.approx(5e-7, abs=1e-20)

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidArgument):
            conformal.update(ThresholdState(0.0), 1.5)

    @given(st.floats(-1, 2), st.floats(0, 1))
    def test_envelope(self, beta, dropped):
        s = ThresholdState(beta, ETA, ALPHA)
        delta = conformal.update(s, dropped) - beta
        assert -ETA * (1 - ALPHA) - 1e-15 <= delta <= ETA * ALPHA + 1e-15


def run_batch(state, dropped):
    for n, d in enumerate(dropped, start=1):
        conformal.checkpoint(state, n)
        conformal.update(state, d)


class TestBacktrack:
    def test_full_acceptance_carries_forward(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        run_batch(s, [0.1, 0.2, 0.3])
        live = s.beta
        conformal.backtrack_to_accepted(s, 3, [0.1, 0.2, 0.3], 0.05)
        assert s.beta == pytest.approx(live - ETA * (0.05 - ALPHA), abs=1e-18)
        assert s.accepted_count_total == 4

    def test_partial_acceptance(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        run_batch(s, [0.1, 0.2, 0.3])
        conformal.backtrack_to_accepted(s, 1, [0.1, 0.2, 0.3], 0.2)
        expected = conformal.step(conformal.step(0.01, 0.1, ETA, ALPHA), 0.2, ETA, ALPHA)
        assert s.beta == expected
        assert s.accepted_count_total == 2
        assert s.cumulative_dropped_mass == pytest.approx(0.3)

    def test_immediate_rejection(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        run_batch(s, [0.1, 0.2, 0.3])
        conformal.backtrack_to_accepted(s, 0, [0.1, 0.2, 0.3], 0.4)
        assert s.beta == conformal.step(0.01, 0.4, ETA, ALPHA)
        assert s.checkpoints == []

    def test_accepting_more_than_checkpointed(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        run_batch(s, [0.1])
        with pytest.raises(ConsistencyError):
            conformal.backtrack_to_accepted(s, 2, [0.1], 0.0)

    def test_checkpoint_order(self):
        s = ThresholdState(0.01)
        with pytest.raises(ConsistencyError):
            conformal.checkpoint(s, 2)

    @given(st.lists(st.tuples(st.lists(st.floats(0, 1), max_size=6), st.data()), max_size=20))
    def test_equivalent_to_sequential_replay(self, batches):
        s = ThresholdState(0.02, ETA, ALPHA)
        replay = 0.02
        for dropped, data in batches:
            accepted = data.draw(st.integers(0, len(dropped)))
            emitted = data.draw(st.floats(0, 1))
            run_batch(s, dropped)
            conformal.backtrack_to_accepted(s, accepted, dropped, emitted)
            for d in dropped[:accepted] + [emitted]:
                replay = conformal.step(replay, d, ETA, ALPHA)
            assert s.beta == replay


class TestThresholdGuarantee:
    def test_bound_example(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        assert conformal.theorem2_bound(s, 10_000, 0.01) == pytest.approx(0.10150005, abs=1e-12)

    def test_bound_tends_to_alpha(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        assert conformal.theorem2_bound(s, 10 ** 15, 0.01) == pytest.approx(ALPHA, abs=1e-9)

    def test_looser_form_is_asserted(self):
        s = ThresholdState(0.01, ETA, ALPHA)
        both = (conformal.theorem2_bound(s, 50, 0.01), conformal.theorem2_bound_proof_form(s, 50, 0.01))
        assert conformal.average_dropped_bound(s, 50, 0.01) == max(both)

    def test_needs_tokens(self):
        with pytest.raises(InvalidArgument):
            conformal.theorem2_bound(ThresholdState(0.0), 0, 0.0)

    def test_frozen_threshold_has_no_guarantee(self):
        s = ThresholdState(0.01, 0.0, ALPHA)
        assert conformal.theorem2_bound(s, 100, 0.01) == float("inf")


def test_universal_bound_without_fallback(rng):
    """With raw threshold supports (empty allowed) beta never leaves the interval."""
    for trial in range(20):
        eta = float(rng.choice([0.001, 0.05, 0.5]))
        s = ThresholdState(float(rng.uniform(-eta, 1.0)), eta, ALPHA)
        for _ in range(2000):
            conc = 10 ** rng.uniform(-3, 1)
            q = TokenDistribution(rng.dirichlet(np.full(16, conc)))
            kept = threshold_support(q, s.beta)
            dropped = max(0.0, 1.0 - float(q.probs[kept].sum()))
            conformal.update(s, min(dropped, 1.0))
            assert -eta * (1 - ALPHA) - 1e-12 <= s.beta <= 1 + eta * ALPHA + 1e-12


def test_telescoping_identity(rng):
    s = ThresholdState(0.02, ETA, ALPHA)
    for _ in range(300):
        dropped = rng.uniform(0, 0.2, size=int(rng.integers(0, 8)))
        run_batch(s, dropped)
        conformal.backtrack_to_accepted(s, int(rng.integers(0, dropped.size + 1)), list(dropped),
                                        float(rng.uniform(0, 0.2)))
    assert abs(conformal.telescoping_gap(s)) < 1e-9
