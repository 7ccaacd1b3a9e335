import math
import struct

import numpy as np
import pytest

from sqsd.errors import InvalidArgument, TraceFileMissing, TraceFormatError, UnknownContext
from sqsd.models import SyntheticModelSpec, read_trace, synthetic_pair, trace_pair, write_trace
from sqsd.simplex import apply_temperature, entropy_bits, tv_distance


def contexts(vocab, n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(vocab, size=int(rng.integers(0, 5))).tolist() for _ in range(n)]


class TestSynthetic:
    def test_zero_divergence_is_identical(self):
        m = synthetic_pair(SyntheticModelSpec(vocab_size=32, divergence=0.0, seed=3))
        for ctx in contexts(32, 50):
            assert tv_distance(m.draft_dist(ctx), m.target_dist(ctx)) == 0.0

    def test_deterministic_across_instances(self):
        spec = SyntheticModelSpec(vocab_size=16, seed=9)
        a, b = synthetic_pair(spec), synthetic_pair(spec)
        for ctx in contexts(16, 20):
            assert np.array_equal(a.draft_logits(ctx), b.draft_logits(ctx))
            assert np.array_equal(a.target_logits(ctx), b.target_logits(ctx))

    def test_seed_matters(self):
        a = synthetic_pair(SyntheticModelSpec(vocab_size=16, seed=0))
        b = synthetic_pair(SyntheticModelSpec(vocab_size=16, seed=1))
        assert not np.array_equal(a.target_logits([]), b.target_logits([]))

    def test_divergence_monotone(self):
        mean_tv = {}
        for eps in (0.1, 0.3):
            m = synthetic_pair(SyntheticModelSpec(vocab_size=64, divergence=eps))
            mean_tv[eps] = np.mean([tv_distance(m.draft_dist(c), m.target_dist(c))
                                    for c in contexts(64, 1000)])
        assert mean_tv[0.3] > mean_tv[0.1]

    def test_markov_state_only_depends_on_tail(self):
        m = synthetic_pair(SyntheticModelSpec(vocab_size=8, markov_order=2))
        assert np.array_equal(m.target_logits([5, 1, 2]), m.target_logits([7, 1, 2]))
        assert not np.array_equal(m.target_logits([1, 2]), m.target_logits([2]))

    def test_mass_concentrated_in_head(self):
        m = synthetic_pair(SyntheticModelSpec(vocab_size=512))
        head = math.ceil(0.05 * 512)
        fracs = [np.sort(m.target_dist([t]).probs)[::-1][:head].sum() for t in range(512)]
        assert np.mean(fracs) > 0.9

    def test_temperature_monotone_entropy(self):
        m = synthetic_pair(SyntheticModelSpec(vocab_size=64))
        for ctx in contexts(64, 30):
            ents = [entropy_bits(apply_temperature(m.draft_logits(ctx), t))
                    for t in (0.1, 0.3, 0.6, 1.0, 1.5)]
            assert all(b >= a - 1e-9 for a, b in zip(ents, ents[1:]))

    def test_with_temperature_shares_tables(self):
        m = synthetic_pair(SyntheticModelSpec(vocab_size=16), 1.0)
        cold = m.with_temperature(0.0)
        assert cold.target_dist([3]).probs.max() == 1.0
        assert m.target_dist([3]).probs.max() < 1.0

    def test_bad_spec(self):
        with pytest.raises(InvalidArgument):
            SyntheticModelSpec(divergence=1.5)
        with pytest.raises(InvalidArgument):
            SyntheticModelSpec(concentration=0.0)


class TestTrace:
    def test_root_entry(self, tmp_path):
        path = tmp_path / "t.sqst"
        write_trace(path, 2, [([], [0.0, 0.0], [0.0, 1.0])])
        m = trace_pair(path)
        assert m.draft_dist([]).probs.tolist() == [0.5, 0.5]

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        recs = [(rng.integers(5, size=n).tolist(), rng.normal(size=5), rng.normal(size=5))
                for n in range(4)]
        path = tmp_path / "t.sqst"
        write_trace(path, 5, recs)
        vocab, table = read_trace(path)
        assert vocab == 5
        for ctx, d, t in recs:
            got_d, got_t = table[tuple(ctx)]
            assert got_d.tobytes() == d.tobytes() and got_t.tobytes() == t.tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.sqst"
        write_trace(path, 3, [([1], [0.0] * 3, [1.0] * 3)])
        data = path.read_bytes()
        assert data[:4] == b"SQST"
        assert struct.unpack_from("<BIHI", data, 4) == (1, 3, 1, 1)
        assert len(data) == 9 + 2 + 4 + 2 * 3 * 8

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.sqst"
        path.write_bytes(b"")
        with pytest.raises(TraceFormatError):
            trace_pair(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TraceFileMissing):
            trace_pair(tmp_path / "nope.sqst")

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "t.sqst"
        write_trace(path, 4, [([], [0.0] * 4, [0.0] * 4)])
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TraceFormatError):
            read_trace(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.sqst"
        path.write_bytes(b"NOPE" + bytes(5))
        with pytest.raises(TraceFormatError):
            read_trace(path)

    def test_unknown_context(self, tmp_path):
        path = tmp_path / "t.sqst"
        write_trace(path, 2, [([], [0.0, 0.0], [0.0, 0.0])])
        with pytest.raises(UnknownContext):
            trace_pair(path).target_dist([1])
