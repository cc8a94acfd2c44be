"""Classical post-processing channel between Alice and Bob.

Wire format (all integers big-endian)::

    length   u32   bytes that follow this field (9 + len(payload))
    type     u8    MessageType
    block_id u32
    seq      u32   per-direction, per-block counter starting at 0
    payload

Payloads:

* BASIS / INTENSITY: ``u32`` count followed by ``ceil(count / 8)`` bytes of
  MSB-first packed bits (basis Z=0, X=1; intensity mu1=0, mu2=1).
* ERROR_ESTIMATE: two float64 values, ``(rate, sample size)``.
* BLOCK_COMMIT: opaque bytes (the committed report).
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .finitekey import TallyCounts
from .session import (
    KeyRateReport,
    SessionConfig,
    block_tallies,
    report_from_tallies,
    sift,
)

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IBII")
PREFIX = struct.Struct(">I")
COUNT = struct.Struct(">I")
ESTIMATE = struct.Struct(">dd")
MAX_FRAME = 1 << 26
# order in which the four error estimates travel
ESTIMATE_ORDER = (("Z", 0), ("Z", 1), ("X", 0), ("X", 1))


class MessageType(IntEnum):
    BASIS = 1
    INTENSITY = 2
    ERROR_ESTIMATE = 3
    BLOCK_COMMIT = 4


class FrameError(ValueError):
    """Malformed frame."""


class ProtocolError(RuntimeError):
    """Well-formed frame that violates the exchange (wrong type, block or content)."""


class SequenceError(ProtocolError):
    pass


class ConnectionLost(ConnectionError):
    pass


@dataclass(frozen=True)
class ReconciliationMessage:
    type: MessageType
    block_id: int
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "type", MessageType(self.type))
        for name in ("block_id", "seq"):
            v = getattr(self, name)
            if not 0 <= v < 2**32:
                raise ValueError(f"{name} out of u32 range: {v}")


# -- payloads ------------------------------------------------------------------

def pack_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 1 or (bits.size and bits.max() > 1):
        raise ValueError("expected a 1-D array of 0/1 values")
    return COUNT.pack(bits.size) + np.packbits(bits, bitorder="big").tobytes()


def unpack_bits(payload: bytes) -> np.ndarray:
    if len(payload) < COUNT.size:
        raise FrameError("bit payload shorter than its count field")
    (count,) = COUNT.unpack_from(payload)
    body = payload[COUNT.size:]
    if len(body) != (count + 7) // 8:
        raise FrameError(f"bit payload holds {len(body)} bytes, expected {(count + 7) // 8} for {count} bits")
    return np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=count, bitorder="big").astype(np.int8)


def bit_payload_size(count: int) -> int:
    return COUNT.size + (count + 7) // 8


def pack_estimate(rate: float, sample_size: float) -> bytes:
    return ESTIMATE.pack(float(rate), float(sample_size))


def unpack_estimate(payload: bytes) -> tuple[float, float]:
    if len(payload) != ESTIMATE.size:
        raise FrameError(f"error estimate needs {ESTIMATE.size} bytes, got {len(payload)}")
    return ESTIMATE.unpack(payload)


def _check_payload(mtype: MessageType, payload: bytes):
    if mtype in (MessageType.BASIS, MessageType.INTENSITY):
        unpack_bits(payload)
    elif mtype is MessageType.ERROR_ESTIMATE:
        unpack_estimate(payload)


# -- framing -------------------------------------------------------------------

def encode_message(msg: ReconciliationMessage) -> bytes:
    _check_payload(msg.type, msg.payload)
    length = HEADER.size - PREFIX.size + len(msg.payload)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME}-byte limit")
    return HEADER.pack(length, int(msg.type), msg.block_id, msg.seq) + msg.payload


def decode_message(data: bytes) -> ReconciliationMessage:
    """Inverse of :func:`encode_message`; ``data`` must be exactly one frame."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise FrameError(f"truncated header: {len(data)} of {HEADER.size} bytes")
    length, mtype, block_id, seq = HEADER.unpack_from(data)
    if length < HEADER.size - PREFIX.size or length > MAX_FRAME:
        raise FrameError(f"invalid frame length {length}")
    if len(data) != PREFIX.size + length:
        raise FrameError(f"frame declares {length} bytes after the prefix but {len(data) - PREFIX.size} are present")
    try:
        mtype = MessageType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None
    payload = data[HEADER.size:]
    _check_payload(mtype, payload)
    return ReconciliationMessage(mtype, block_id, seq, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except (socket.timeout, OSError) as exc:
            raise ConnectionLost(f"receive failed: {exc}") from exc
        if not chunk:
            raise ConnectionLost("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    prefix = _recv_exact(sock, PREFIX.size)
    (length,) = PREFIX.unpack(prefix)
    if length < HEADER.size - PREFIX.size or length > MAX_FRAME:
        raise FrameError(f"invalid frame length {length}")
    return prefix + _recv_exact(sock, length)


class Channel:
    """One endpoint's view of the stream, enforcing block id and sequence order."""

    def __init__(self, sock: socket.socket, block_id: int):
        self.sock = sock
        self.block_id = block_id
        self.send_seq = 0
        self.recv_seq = 0

    def send(self, mtype: MessageType, payload: bytes = b""):
        frame = encode_message(ReconciliationMessage(mtype, self.block_id, self.send_seq, payload))
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ConnectionLost(f"send failed: {exc}") from exc
        self.send_seq += 1

    def recv(self, expected: MessageType) -> ReconciliationMessage:
        msg = decode_message(read_frame(self.sock))
        if msg.block_id != self.block_id:
            raise SequenceError(f"frame for block {msg.block_id} while processing block {self.block_id}")
        if msg.seq != self.recv_seq:
            raise SequenceError(f"expected sequence number {self.recv_seq}, got {msg.seq}")
        if msg.type is not expected:
            raise ProtocolError(f"expected {expected.name}, got {msg.type.name}")
        self.recv_seq += 1
        return msg


# -- the exchange --------------------------------------------------------------

@dataclass(frozen=True)
class SessionCheckpoint:
    """Enough to redo an aborted block: the config, the seed and the block id."""

    config: SessionConfig
    seed: int | None
    block_id: int
    stage: str
    reason: str


class SessionAborted(RuntimeError):
    def __init__(self, checkpoint: SessionCheckpoint):
        super().__init__(f"block {checkpoint.block_id} aborted at stage {checkpoint.stage!r}: {checkpoint.reason}")
        self.checkpoint = checkpoint


class _Party:
    def __init__(self, sock, config: SessionConfig, block_id: int, duration: float):
        self.chan = Channel(sock, block_id)
        self.config = config
        self.duration = duration
        self.stage = "start"
        self.report: KeyRateReport | None = None

    def _report(self, tallies: TallyCounts) -> KeyRateReport:
        method = "monte-carlo" if self.config.monte_carlo else "analytic"
        return report_from_tallies(self.config, tallies, self.duration, method)


class AliceEndpoint(_Party):
    """Holds the preparation record; receives Bob's estimates and commits the block."""

    def __init__(self, sock, config, block_id, duration, records: dict | None):
        super().__init__(sock, config, block_id, duration)
        self.records = records

    def run(self) -> KeyRateReport:
        expected_n = None
        if self.records is not None:
            self.stage = "basis"
            bob_basis = unpack_bits(self.chan.recv(MessageType.BASIS).payload)
            my_basis = np.asarray(self.records["basis"], dtype=np.int8)
            if bob_basis.size != my_basis.size:
                raise ProtocolError(f"Bob announced {bob_basis.size} detections, Alice holds {my_basis.size}")
            self.chan.send(MessageType.BASIS, pack_bits(my_basis))
            match = my_basis == bob_basis
            self.stage = "intensity"
            intensity = np.asarray(self.records["intensity"], dtype=np.int8)[match]
            self.chan.send(MessageType.INTENSITY, pack_bits(intensity))
            expected_n = np.zeros((2, 2), dtype=np.int64)
            np.add.at(expected_n, (my_basis[match].astype(np.int64), intensity.astype(np.int64)), 1)
        self.stage = "estimate"
        n = {"Z": [0, 0], "X": [0, 0]}
        m = {"Z": [0, 0], "X": [0, 0]}
        for basis, k in ESTIMATE_ORDER:
            rate, size = unpack_estimate(self.chan.recv(MessageType.ERROR_ESTIMATE).payload)
            size_i = int(size)
            if size_i != size or size_i < 0 or not 0.0 <= rate <= 1.0:
                raise ProtocolError(f"implausible error estimate ({rate}, {size})")
            if expected_n is not None and size_i != expected_n["ZX".index(basis), k]:
                raise ProtocolError(f"sample size for {basis}/{k} disagrees with the sifted record")
            n[basis][k] = size_i
            m[basis][k] = int(round(rate * size_i))
        self.stage = "commit"
        self.report = self._report(TallyCounts(n, m))
        self.chan.send(MessageType.BLOCK_COMMIT, self.report.to_bytes())
        ack = self.chan.recv(MessageType.BLOCK_COMMIT).payload
        if ack != self.report.to_bytes():
            raise ProtocolError("Bob committed a different report")
        self.stage = "done"
        return self.report


class BobEndpoint(_Party):
    """Holds the detection record. ``reveal`` stands in for error correction: it
    returns Alice's symbols at the given sifted indices."""

    def __init__(self, sock, config, block_id, duration, records: dict | None, reveal=None,
                 tallies: TallyCounts | None = None):
        super().__init__(sock, config, block_id, duration)
        self.records = records
        self.reveal = reveal
        self.tallies = tallies

    def run(self) -> KeyRateReport:
        tallies = self.tallies
        if self.records is not None:
            self.stage = "basis"
            my_basis = np.asarray(self.records["basis"], dtype=np.int8)
            self.chan.send(MessageType.BASIS, pack_bits(my_basis))
            alice_basis = unpack_bits(self.chan.recv(MessageType.BASIS).payload)
            if alice_basis.size != my_basis.size:
                raise ProtocolError("basis announcements differ in length")
            self.stage = "intensity"
            intensity = unpack_bits(self.chan.recv(MessageType.INTENSITY).payload)
            match = np.flatnonzero(alice_basis == my_basis)
            if intensity.size != match.size:
                raise ProtocolError("intensity announcement does not cover the matched detections")
            alice_view = {"basis": alice_basis, "intensity": np.zeros_like(alice_basis),
                          "symbol": np.zeros_like(alice_basis)}
            alice_view["intensity"][match] = intensity
            alice_view["symbol"][match] = self.reveal(match)
            tallies = sift(alice_view, self.records).tallies()
        self.stage = "estimate"
        for basis, k in ESTIMATE_ORDER:
            n_k, m_k = tallies.n[basis][k], tallies.m[basis][k]
            self.chan.send(MessageType.ERROR_ESTIMATE, pack_estimate(m_k / n_k if n_k else 0.0, n_k))
        self.stage = "commit"
        self.report = self._report(tallies)
        commit = self.chan.recv(MessageType.BLOCK_COMMIT).payload
        if commit != self.report.to_bytes():
            raise ProtocolError("Alice committed a different report")
        self.chan.send(MessageType.BLOCK_COMMIT, self.report.to_bytes())
        self.stage = "done"
        return self.report


def _views(block):
    """Index-aligned views of the conclusive detections (the shared timing record)."""
    rec = block.records
    rec = rec.take(rec.outcome >= 0)
    return rec.alice_view(), rec.bob_view()


def run_networked_session(alice_endpoint: socket.socket | None, bob_endpoint: socket.socket | None,
                          config: SessionConfig, seed=None, block_id: int = 0,
                          checkpoint: SessionCheckpoint | None = None, timeout: float = 60.0) -> KeyRateReport:
    """Run one block with the classical exchange carried over two connected sockets.

    Passing ``None`` for both endpoints uses a local socket pair. The quantum
    part is simulated once; each party sees only its own record. On a
    connection failure :class:`SessionAborted` carries a checkpoint that can be
    passed back in (with fresh endpoints) to redo the block.
    """
    if checkpoint is not None:
        config, seed, block_id = checkpoint.config, checkpoint.seed, checkpoint.block_id
    if (alice_endpoint is None) != (bob_endpoint is None):
        raise ValueError("pass both endpoints or neither")
    owned = alice_endpoint is None
    if owned:
        alice_endpoint, bob_endpoint = socket.socketpair()
    try:
        for s in (alice_endpoint, bob_endpoint):
            s.settimeout(timeout)
    except OSError as exc:
        raise SessionAborted(SessionCheckpoint(config, seed, block_id, "connect", str(exc))) from exc

    tallies, duration, block = block_tallies(config, seed, keep_records=True)
    if block is not None:
        a_view, b_view = _views(block)
        alice = AliceEndpoint(alice_endpoint, config, block_id, duration, a_view)
        bob = BobEndpoint(bob_endpoint, config, block_id, duration, b_view,
                          reveal=lambda idx: np.asarray(a_view["symbol"])[idx])
    else:
        alice = AliceEndpoint(alice_endpoint, config, block_id, duration, None)
        bob = BobEndpoint(bob_endpoint, config, block_id, duration, None, tallies=tallies)

    errors = {}

    def run_alice():
        try:
            alice.run()
        except BaseException as exc:  # surfaced in the caller's thread
            errors["alice"] = exc
            _shutdown(alice_endpoint)

    t = threading.Thread(target=run_alice, name=f"alice-block-{block_id}", daemon=True)
    t.start()
    try:
        bob.run()
    except BaseException as exc:
        errors["bob"] = exc
        _shutdown(bob_endpoint)
    t.join(timeout)
    if owned:
        for s in (alice_endpoint, bob_endpoint):
            s.close()

    if errors:
        # a peer's protocol error shows up on the other side as a lost connection
        primary = next((e for e in errors.values() if not isinstance(e, ConnectionLost)), None)
        if primary is not None:
            raise primary
        exc = next(iter(errors.values()))
        stage = alice.stage if "alice" in errors else bob.stage
        raise SessionAborted(SessionCheckpoint(config, seed, block_id, stage, str(exc))) from exc
    if alice.report is None or alice.report.to_bytes() != bob.report.to_bytes():
        raise ProtocolError("endpoints finished without agreeing on a report")
    return alice.report


def _shutdown(sock):
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
