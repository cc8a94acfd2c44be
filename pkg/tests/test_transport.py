import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timebinqkd.finitekey import SecurityParams
from timebinqkd.session import SessionConfig, run_session
from timebinqkd.transport import (
    Channel,
    ConnectionLost,
    FrameError,
    MAX_FRAME,
    MessageType,
    ProtocolError,
    ReconciliationMessage,
    SequenceError,
    SessionAborted,
    bit_payload_size,
    decode_message,
    encode_message,
    pack_bits,
    pack_estimate,
    run_networked_session,
    unpack_bits,
    unpack_estimate,
)


def small(protocol, loss, mc=True, block=20_000):
    return SessionConfig.for_point(protocol, loss).replace(security=SecurityParams(block_size=block), monte_carlo=mc)


# -- framing ---------------------------------------------------------------------

@pytest.mark.parametrize("mtype,payload", [
    (MessageType.BASIS, pack_bits([0, 1, 1, 0, 1])),
    (MessageType.INTENSITY, pack_bits([])),
    (MessageType.ERROR_ESTIMATE, pack_estimate(0.034, 123456)),
    (MessageType.BLOCK_COMMIT, b'{"k":1}'),
])
def test_round_trip_every_type(mtype, payload):
    msg = ReconciliationMessage(mtype, 7, 3, payload)
    frame = encode_message(msg)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert decode_message(frame) == msg


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=3000), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_bit_messages_round_trip(bits, block, seq):
    msg = ReconciliationMessage(MessageType.BASIS, block, seq, pack_bits(bits))
    out = decode_message(encode_message(msg))
    assert out == msg
    np.testing.assert_array_equal(unpack_bits(out.payload), bits)


def test_bit_payload_size_for_1e5_indices():
    bits = np.random.default_rng(0).integers(0, 2, 10**5)
    payload = pack_bits(bits)
    assert len(payload) == bit_payload_size(10**5) == 4 + 12_500
    assert len(encode_message(ReconciliationMessage(MessageType.BASIS, 0, 0, payload))) == 13 + 4 + 12_500


def test_estimate_payload():
    assert unpack_estimate(pack_estimate(0.25, 1000)) == (0.25, 1000.0)
    with pytest.raises(FrameError):
        unpack_estimate(b"\x00" * 15)


@pytest.mark.parametrize("cut", [0, 3, 12, 20])
def test_truncated_frames_rejected(cut):
    frame = encode_message(ReconciliationMessage(MessageType.BASIS, 1, 0, pack_bits([1] * 100)))
    with pytest.raises(FrameError):
        decode_message(frame[:cut])


def test_malformed_frames_rejected():
    good = encode_message(ReconciliationMessage(MessageType.ERROR_ESTIMATE, 1, 0, pack_estimate(0.1, 10)))
    with pytest.raises(FrameError):
        decode_message(good + b"\x00")  # trailing garbage
    with pytest.raises(FrameError):
        decode_message(good[:4] + b"\x09" + good[5:])  # unknown type
    with pytest.raises(FrameError):
        decode_message(struct.pack(">IBII", 3, 1, 0, 0))  # length below header size
    with pytest.raises(FrameError):
        # count says 100 bits but only 1 byte follows
        decode_message(struct.pack(">IBII", 9 + 5, 1, 0, 0) + struct.pack(">I", 100) + b"\xff")
    with pytest.raises(FrameError):
        encode_message(ReconciliationMessage(MessageType.BLOCK_COMMIT, 0, 0, b"\x00" * MAX_FRAME))
    with pytest.raises(ValueError):
        ReconciliationMessage(MessageType.BASIS, -1, 0)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_random_bytes_never_crash_the_decoder(data):
    try:
        decode_message(data)
    except FrameError:
        pass


# -- channel ordering -------------------------------------------------------------

def test_reordered_frames_rejected():
    a, b = socket.socketpair()
    try:
        first = encode_message(ReconciliationMessage(MessageType.ERROR_ESTIMATE, 0, 0, pack_estimate(0.1, 10)))
        second = encode_message(ReconciliationMessage(MessageType.ERROR_ESTIMATE, 0, 1, pack_estimate(0.2, 10)))
        a.sendall(second + first)
        with pytest.raises(SequenceError):
            Channel(b, 0).recv(MessageType.ERROR_ESTIMATE)
    finally:
        a.close(), b.close()


def test_wrong_block_and_type_rejected():
    a, b = socket.socketpair()
    try:
        Channel(a, 5).send(MessageType.ERROR_ESTIMATE, pack_estimate(0.1, 10))
        with pytest.raises(SequenceError):
            Channel(b, 4).recv(MessageType.ERROR_ESTIMATE)
        Channel(a, 4).send(MessageType.BLOCK_COMMIT, b"x")
        with pytest.raises(ProtocolError):
            Channel(b, 4).recv(MessageType.ERROR_ESTIMATE)
    finally:
        a.close(), b.close()


def test_closed_peer_raises_connection_lost():
    a, b = socket.socketpair()
    a.close()
    with pytest.raises(ConnectionLost):
        Channel(b, 0).recv(MessageType.BASIS)
    b.close()


# -- sessions over the wire --------------------------------------------------------

@pytest.mark.parametrize("protocol", ["2D", "4D"])
@pytest.mark.parametrize("mc", [True, False])
def test_networked_equals_in_process(protocol, mc):
    cfg = small(protocol, 14.0, mc)
    net = run_networked_session(None, None, cfg, seed=42)
    local = run_session(cfg, seed=42)
    assert net.to_bytes() == local.to_bytes()


def test_networked_over_explicit_sockets():
    a, b = socket.socketpair()
    cfg = small("4D", 23.0)
    try:
        rep = run_networked_session(a, b, cfg, seed=1, block_id=9)
    finally:
        a.close(), b.close()
    assert rep.to_bytes() == run_session(cfg, seed=1).to_bytes()


def test_connection_loss_checkpoint_and_resume():
    cfg = small("4D", 14.0)
    a, b = socket.socketpair()
    a.shutdown(socket.SHUT_RDWR)  # the link drops before the exchange
    with pytest.raises(SessionAborted) as info:
        run_networked_session(a, b, cfg, seed=8, block_id=3, timeout=5)
    a.close(), b.close()
    cp = info.value.checkpoint
    assert (cp.seed, cp.block_id, cp.config) == (8, 3, cfg)
    assert cp.stage == "basis"
    resumed = run_networked_session(None, None, cfg, checkpoint=cp)
    assert resumed.to_bytes() == run_session(cfg, seed=8).to_bytes()


def test_closed_socket_aborts_with_checkpoint():
    a, b = socket.socketpair()
    a.close()
    with pytest.raises(SessionAborted) as info:
        run_networked_session(a, b, small("4D", 14.0), seed=1)
    b.close()
    assert info.value.checkpoint.stage == "connect"


def test_endpoint_arguments_must_pair():
    a, b = socket.socketpair()
    try:
        with pytest.raises(ValueError):
            run_networked_session(a, None, small("4D", 14.0))
    finally:
        a.close(), b.close()
