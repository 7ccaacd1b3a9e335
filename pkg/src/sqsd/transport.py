"""Wire formats and carriers for the edge-cloud session.

Uplink draft packet (big-endian header, then an MSB-first bit payload)::

    batch_id u32 | scheme u8 | L u16 | L records | zero pad to a byte

Each record is ``[cardinality K-1] subset-rank lattice-rank token-index``
with field widths ``ceil(log2 V)`` (C-SQS only), ``ceil(log2 C(V, K))``,
``ceil(log2 C(ell + K - 1, K - 1))`` and ``ceil(log2 K)``.

Downlink verdict: ``batch_id u32 | accepted u16 | new_token u32``.

Every message travels in a frame with a 4-byte big-endian length prefix; an
empty frame closes the session. The handshake is the first frame in each
direction: ``"SQS1" | version u8 | scheme u8 | V u32 | ell u32 | alpha f64 |
eta f64 | K u32`` (K is 0 unless the scheme is K-SQS).
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

from .bitstream import BitReader, BitWriter
from .codec import (LatticeDistribution, Scheme, cardinality_wire_bits, comb, payload_wire_bits,
                    rank_composition, rank_subset, subset_wire_bits, token_index_bits,
                    unrank_composition, unrank_subset)
from .engine import BatchOutcome, CloudNode, DraftParams, DraftToken, EdgeNode, token_cost
from .errors import (DecodeError, HandshakeError, InvalidArgument, ProtocolViolation,
                     RankOutOfRange, TruncatedPacket, VerdictMismatch)

HANDSHAKE_MAGIC = b"SQS1"
PROTOCOL_VERSION = 1
_HANDSHAKE = struct.Struct(">4sBBIIddI")
_DRAFT_HEADER = struct.Struct(">IBH")
_VERDICT = struct.Struct(">IHI")
_FRAME = struct.Struct(">I")
_U32 = 1 << 32


@dataclass(frozen=True)
class DraftPacket:
    """``entries`` holds one ``(token_id, LatticeDistribution)`` pair per drafted token."""

    batch_id: int
    scheme: Scheme
    entries: tuple

    @property
    def token_count(self) -> int:
        return len(self.entries)

    @classmethod
    def from_batch(cls, batch_id: int, scheme: Scheme, drafts) -> "DraftPacket":
        return cls(batch_id, Scheme(scheme), tuple((d.token_id, d.quantized) for d in drafts))


@dataclass(frozen=True)
class VerdictPacket:
    batch_id: int
    accepted_count: int
    new_token: int


@dataclass(frozen=True)
class SessionConstants:
    scheme: Scheme
    vocab_size: int
    ell: int
    alpha: float
    eta: float
    k: int = 0
    version: int = PROTOCOL_VERSION

    @classmethod
    def from_params(cls, params: DraftParams, vocab_size: int) -> "SessionConstants":
        k = params.k if params.scheme is Scheme.K_SQS else 0
        return cls(params.scheme, vocab_size, params.ell, params.alpha, params.eta, k)


def _record_k(scheme: Scheme, vocab_size: int, k: Optional[int], decoded_k: Optional[int] = None):
    if scheme is Scheme.QS_DENSE:
        return vocab_size
    if scheme is Scheme.K_SQS:
        if k is None:
            raise InvalidArgument("K-SQS packets need the session K")
        return min(k, vocab_size)
    return decoded_k


def record_field_widths(scheme: Scheme, vocab_size: int, ell: int, k: int) -> tuple:
    """Bit widths ``(cardinality, subset, lattice, token index)`` of one record."""
    scheme = Scheme(scheme)
    card = cardinality_wire_bits(vocab_size) if scheme is Scheme.C_SQS else 0
    return card, subset_wire_bits(vocab_size, k), payload_wire_bits(k, ell), token_index_bits(k)


def encode_draft(packet: DraftPacket, vocab_size: int, ell: int, k: Optional[int] = None) -> bytes:
    scheme = Scheme(packet.scheme)
    if not 0 <= packet.batch_id < _U32:
        raise InvalidArgument("batch_id must fit in u32")
    if packet.token_count >= 1 << 16:
        raise InvalidArgument("too many tokens for a u16 count")
    if ell >= _U32:
        raise InvalidArgument("ell must fit in u32 on the wire")
    w = BitWriter()
    for token_id, quantized in packet.entries:
        kk = quantized.k
        expected = _record_k(scheme, vocab_size, k, kk)
        if kk != expected:
            raise InvalidArgument(f"record has K={kk}, session expects {expected}")
        if quantized.resolution != ell:
            raise InvalidArgument("record resolution differs from the session ell")
        card, sub, lat, idx = record_field_widths(scheme, vocab_size, ell, kk)
        if card:
            w.write(kk - 1, card)
        w.write(rank_subset(quantized.support, vocab_size), sub)
        w.write(rank_composition(quantized.counts), lat)
        w.write(quantized.support.index(token_id), idx)
    header = _DRAFT_HEADER.pack(packet.batch_id, int(scheme), packet.token_count)
    return header + w.getvalue()


def draft_payload_bits(packet: DraftPacket, vocab_size: int, ell: int, k: Optional[int] = None) -> int:
    """Pre-padding length of the bit payload (header excluded)."""
    total = 0
    for _, quantized in packet.entries:
        total += sum(record_field_widths(packet.scheme, vocab_size, ell, quantized.k))
    return total


def decode_draft(data: bytes, vocab_size: int, ell: int, scheme, k: Optional[int] = None) -> DraftPacket:
    scheme = Scheme.parse(scheme)
    if len(data) < _DRAFT_HEADER.size:
        raise TruncatedPacket(f"draft header needs {_DRAFT_HEADER.size} bytes, got {len(data)}")
    batch_id, tag, count = _DRAFT_HEADER.unpack_from(data)
    if tag != int(scheme):
        raise DecodeError(f"packet scheme tag {tag} != session scheme {int(scheme)}")
    r = BitReader(data[_DRAFT_HEADER.size:])
    entries = []
    for _ in range(count):
        if scheme is Scheme.C_SQS:
            kk = r.read(cardinality_wire_bits(vocab_size)) + 1
            if kk > vocab_size:
                raise RankOutOfRange(f"cardinality {kk} exceeds V={vocab_size}")
        else:
            kk = _record_k(scheme, vocab_size, k)
        _, sub, lat, idx = record_field_widths(scheme, vocab_size, ell, kk)
        subset_rank = r.read(sub)
        if subset_rank >= comb(vocab_size, kk):
            raise RankOutOfRange(f"subset rank {subset_rank} >= C({vocab_size},{kk})")
        lattice_rank = r.read(lat)
        if lattice_rank >= comb(ell + kk - 1, kk - 1):
            raise RankOutOfRange(f"lattice rank {lattice_rank} out of range")
        index = r.read(idx)
        if index >= kk:
            raise RankOutOfRange(f"token index {index} >= K={kk}")
        support = unrank_subset(subset_rank, vocab_size, kk)
        counts = unrank_composition(lattice_rank, kk, ell)
        entries.append((support[index], LatticeDistribution(counts, ell, support)))
    if r.remaining >= 8 or not r.rest_is_padding():
        raise DecodeError("trailing data after the last record")
    return DraftPacket(batch_id, scheme, tuple(entries))


def encode_verdict(v: VerdictPacket) -> bytes:
    return _VERDICT.pack(v.batch_id, v.accepted_count, v.new_token)


def decode_verdict(data: bytes, batch_id: Optional[int] = None,
                   drafted: Optional[int] = None) -> VerdictPacket:
    if len(data) != _VERDICT.size:
        raise TruncatedPacket(f"verdict must be {_VERDICT.size} bytes, got {len(data)}")
    v = VerdictPacket(*_VERDICT.unpack(data))
    if batch_id is not None and v.batch_id != batch_id:
        raise VerdictMismatch(f"verdict for batch {v.batch_id}, expected {batch_id}")
    if drafted is not None and v.accepted_count > drafted:
        raise VerdictMismatch(f"verdict accepts {v.accepted_count} of {drafted} drafts")
    return v


def encode_handshake(c: SessionConstants) -> bytes:
    return _HANDSHAKE.pack(HANDSHAKE_MAGIC, c.version, int(c.scheme), c.vocab_size, c.ell,
                           c.alpha, c.eta, c.k)


def decode_handshake(data: bytes) -> SessionConstants:
    if len(data) != _HANDSHAKE.size:
        raise HandshakeError(f"handshake must be {_HANDSHAKE.size} bytes, got {len(data)}")
    magic, version, scheme, vocab, ell, alpha, eta, k = _HANDSHAKE.unpack(data)
    if magic != HANDSHAKE_MAGIC:
        raise HandshakeError(f"bad handshake magic {magic!r}")
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise HandshakeError(f"unknown scheme tag {scheme}") from None
    return SessionConstants(scheme, vocab, ell, alpha, eta, k, version)


def check_handshake(local: SessionConstants, remote: SessionConstants) -> None:
    diffs = [f"{name}: local {getattr(local, name)!r} != remote {getattr(remote, name)!r}"
             for name in ("version", "scheme", "vocab_size", "ell", "alpha", "eta", "k")
             if getattr(local, name) != getattr(remote, name)]
    if diffs:
        raise HandshakeError("session constants disagree: " + "; ".join(diffs))


# ---------------------------------------------------------------------------
# carriers


class QueueChannel:
    """One end of an in-process duplex pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = 60.0):
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout

    def send(self, payload: bytes) -> None:
        self.outbox.put(bytes(payload))

    def recv(self) -> bytes:
        try:
            return self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolViolation("peer went silent") from None

    def close(self):
        pass


def queue_pair(timeout: float = 60.0) -> tuple:
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b, timeout), QueueChannel(b, a, timeout)


class SocketChannel:
    """Length-prefixed frames over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, payload: bytes) -> None:
        self.sock.sendall(_FRAME.pack(len(payload)) + payload)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise TruncatedPacket(f"connection closed after {len(buf)} of {n} bytes")
            buf += chunk
        return bytes(buf)

    def recv(self) -> bytes:
        (n,) = _FRAME.unpack(self._read_exact(_FRAME.size))
        return self._read_exact(n)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def parse_hostport(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidArgument(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# endpoints


@dataclass
class Transcript:
    """Every frame an endpoint sent (``up`` from the edge) or received, in order."""

    frames: list = field(default_factory=list)

    def add(self, direction: str, payload: bytes) -> None:
        self.frames.append((direction, bytes(payload)))

    def digest(self) -> str:
        h = hashlib.sha256()
        for direction, payload in self.frames:
            h.update(direction.encode() + _FRAME.pack(len(payload)) + payload)
        return h.hexdigest()


@dataclass
class SessionResult:
    transcript: Transcript
    outcomes: list


def run_edge(channel, edge: EdgeNode, max_batches: Optional[int] = None,
             max_tokens: Optional[int] = None) -> SessionResult:
    if max_batches is None and max_tokens is None:
        raise InvalidArgument("need a batch or token limit")
    params = edge.params
    vocab = edge.model.vocab_size
    local = SessionConstants.from_params(params, vocab)
    transcript = Transcript()
    hello = encode_handshake(local)
    channel.send(hello)
    transcript.add("up", hello)
    reply = channel.recv()
    transcript.add("down", reply)
    check_handshake(local, decode_handshake(reply))
    outcomes = []
    produced = 0
    batch_id = 0
    try:
        while (max_batches is None or len(outcomes) < max_batches) and (
                max_tokens is None or produced < max_tokens):
            batch = edge.draft()
            packet = DraftPacket.from_batch(batch_id, params.scheme, batch.tokens)
            up = encode_draft(packet, vocab, params.ell, local.k or None)
            channel.send(up)
            transcript.add("up", up)
            down = channel.recv()
            transcript.add("down", down)
            verdict = decode_verdict(down, batch_id, batch.length)
            edge.receive_verdict(verdict.accepted_count, verdict.new_token)
            emitted = tuple(d.token_id for d in batch.tokens[:verdict.accepted_count]) + (
                verdict.new_token,)
            outcomes.append(BatchOutcome(
                verdict.accepted_count, verdict.new_token,
                verdict.accepted_count < batch.length, emitted, batch.bits_used, batch.length))
            produced += len(emitted)
            batch_id += 1
    finally:
        channel.send(b"")
    return SessionResult(transcript, outcomes)


def run_cloud(channel, cloud: CloudNode, params: DraftParams) -> SessionResult:
    vocab = cloud.model.vocab_size
    local = SessionConstants.from_params(params, vocab)
    transcript = Transcript()
    hello = channel.recv()
    transcript.add("up", hello)
    reply = encode_handshake(local)
    channel.send(reply)
    transcript.add("down", reply)
    check_handshake(local, decode_handshake(hello))
    outcomes = []
    expected_id = 0
    while True:
        up = channel.recv()
        if not up:
            break
        transcript.add("up", up)
        packet = decode_draft(up, vocab, params.ell, params.scheme, local.k or None)
        if packet.batch_id != expected_id:
            raise ProtocolViolation(f"draft for batch {packet.batch_id}, expected {expected_id}")
        drafts = []
        for n, (token_id, quantized) in enumerate(packet.entries, start=1):
            bits, _ = token_cost(params, vocab, quantized.k)
            drafts.append(DraftToken(token_id, quantized, n, bits))
        outcome = cloud.verify(drafts)
        down = encode_verdict(VerdictPacket(packet.batch_id, outcome.accepted_count,
                                            outcome.resampled_token))
        channel.send(down)
        transcript.add("down", down)
        outcomes.append(outcome)
        expected_id += 1
    return SessionResult(transcript, outcomes)


def _run_with_cloud_thread(edge_fn, cloud_fn):
    errors = []
    result = {}

    def target():
        try:
            result["cloud"] = cloud_fn()
        except BaseException as exc:  # surfaced in the caller's thread
            errors.append(exc)

    t = threading.Thread(target=target, daemon=True)
    t.start()
    try:
        edge_result = edge_fn()
    except BaseException:
        t.join(timeout=5)
        if errors:
            raise errors[0]
        raise
    t.join(timeout=60)
    if errors:
        raise errors[0]
    return edge_result, result.get("cloud")


def session(carrier: str, edge: EdgeNode, cloud: CloudNode, params: Optional[DraftParams] = None,
            max_batches: Optional[int] = None, max_tokens: Optional[int] = None) -> SessionResult:
    """Run edge and cloud over ``carrier`` ("in-process" or "socket").

    ``params`` are the cloud's session constants and default to the edge's.
    Returns the edge-side result; the cloud's transcript must agree with it.
    """
    cloud_params = params or edge.params
    if carrier == "in-process":
        edge_end, cloud_end = queue_pair()
        edge_res, cloud_res = _run_with_cloud_thread(
            lambda: run_edge(edge_end, edge, max_batches, max_tokens),
            lambda: run_cloud(cloud_end, cloud, cloud_params))
    elif carrier == "socket":
        server = socket.create_server(("127.0.0.1", 0))
        port = server.getsockname()[1]

        def serve():
            conn, _ = server.accept()
            ch = SocketChannel(conn)
            try:
                return run_cloud(ch, cloud, cloud_params)
            finally:
                ch.close()
                server.close()

        def connect():
            ch = SocketChannel(socket.create_connection(("127.0.0.1", port)))
            try:
                return run_edge(ch, edge, max_batches, max_tokens)
            finally:
                ch.close()

        edge_res, cloud_res = _run_with_cloud_thread(connect, serve)
    else:
        raise InvalidArgument(f"unknown carrier {carrier!r}")
    if cloud_res is not None and cloud_res.transcript.frames != edge_res.transcript.frames:
        raise ProtocolViolation("edge and cloud transcripts diverged")
    return edge_res
