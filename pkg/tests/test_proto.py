import json
import os
import random
import socket

import pytest
from hypothesis import given, settings, strategies as st

from boxer import proto
from boxer.proto import (FRAME_CAP, NEED_MORE, Accept, FrameBuffer, NameLookup, OversizeError, ProtocolError,
                         Uname, decode_frame, encode_frame, encode_raw)
from boxer.types import OverlayAddr, Status

from msggen import messages, rand_message

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures", "proto_golden.json")


def load_goldens():
    with open(FIXTURES) as fh:
        return json.load(fh)


def test_goldens_cover_every_registered_variant():
    names = {cls.__name__ for cls in proto.REGISTRY.values()}
    assert set(load_goldens()) == names
    assert {type(m).__name__ for m in proto.golden_instances()} == names


@pytest.mark.parametrize("msg", proto.golden_instances(), ids=lambda m: type(m).__name__)
def test_golden_bytes(msg):
    expected = bytes.fromhex(load_goldens()[type(msg).__name__])
    assert encode_frame(msg) == expected
    decoded, rest = decode_frame(expected)
    assert decoded == msg and rest == b""


def test_uname_frame_is_five_bytes():
    frame = encode_frame(Uname())
    assert frame == b"\x00\x00\x00\x01" + bytes([Uname.KIND])


def test_hand_built_frames():
    # independent of the codec: assembled field by field
    assert encode_frame(Accept(7, True)) == bytes.fromhex("0000000a04" "0000000000000007" "01")
    name = "nginx-thrift".encode()
    assert encode_frame(NameLookup("nginx-thrift")) == \
        (3 + len(name)).to_bytes(4, "big") + b"\x06" + len(name).to_bytes(2, "big") + name


def test_empty_input_needs_more():
    assert decode_frame(b"") is NEED_MORE


def test_two_concatenated_frames():
    a, b = Accept(7, True), NameLookup("zk-3")
    buf = encode_frame(a) + encode_frame(b)
    first, rest = decode_frame(buf)
    assert first == a and rest == encode_frame(b)
    second, rest = decode_frame(rest)
    assert second == b and rest == b""


def test_unknown_kind_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        decode_frame(encode_raw(0x3F, b""))


def test_length_beyond_cap_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        decode_frame((FRAME_CAP + 2).to_bytes(4, "big") + b"\x06")
    with pytest.raises(ProtocolError):
        decode_frame(b"\x00\x00\x00\x00\x06")


def test_frame_cap_boundary():
    assert len(encode_raw(0x06, bytes(FRAME_CAP))) == FRAME_CAP + 5
    with pytest.raises(OversizeError):
        encode_raw(0x06, bytes(FRAME_CAP + 1))


def test_truncated_and_padded_bodies_are_rejected():
    body = Accept(7, True).encode_body()
    with pytest.raises(ProtocolError):
        decode_frame(encode_raw(Accept.KIND, body[:-1]))
    with pytest.raises(ProtocolError):
        decode_frame(encode_raw(Accept.KIND, body + b"\x00"))


def test_bad_ip_rejected_on_encode():
    with pytest.raises(ValueError):
        OverlayAddr("10.0.0.256", 1)


def test_status_decodes_to_enum():
    msg, _ = decode_frame(encode_frame(proto.ConnectResp(Status.CONN_REFUSED)))
    assert msg.status is Status.CONN_REFUSED


def test_round_trip_and_prefix_safety_10k():
    for m in messages(10_000, seed=1234):
        frame = encode_frame(m)
        out, rest = decode_frame(frame)
        assert out == m and rest == b""
        assert int.from_bytes(frame[:4], "big") == len(frame) - 4
        # every strict prefix, sampled densely near the header and at random beyond
        cuts = set(range(min(len(frame), 8))) | {len(frame) - 1}
        cuts |= {random.Random(len(frame)).randrange(len(frame)) for _ in range(3)}
        for n in cuts:
            assert decode_frame(frame[:n]) is NEED_MORE


@settings(max_examples=300, deadline=None)
@given(st.randoms(use_true_random=False), st.data())
def test_round_trip_property(rng, data):
    msg = rand_message(rng)
    frame = encode_frame(msg)
    assert decode_frame(frame) == (msg, b"")
    cut = data.draw(st.integers(0, len(frame) - 1))
    assert decode_frame(frame[:cut]) is NEED_MORE


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_frame_buffer_reassembles_any_split(cuts, rng):
    msgs = [rand_message(rng) for _ in range(4)]
    stream = b"".join(encode_frame(m) for m in msgs)
    points = sorted({c % (len(stream) + 1) for c in cuts} | {0, len(stream)})
    fb, out = FrameBuffer(), []
    for lo, hi in zip(points, points[1:]):
        fb.feed(stream[lo:hi])
        while (m := fb.pop()) is not None:
            out.append(m)
    assert out == msgs and len(fb) == 0


def test_descriptor_rides_in_ancillary_data():
    a, b = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
    r, w = os.pipe()
    try:
        proto.send_msg(a, proto.AcceptResp(Status.OK, OverlayAddr("10.77.0.3", 4000)), fd=w)
        msg, fds = proto.recv_msg(b, with_fds=True)
        assert msg.status is Status.OK and len(fds) == 1
        os.write(fds[0], b"x")
        assert os.read(r, 1) == b"x"
        os.close(fds[0])
    finally:
        for fd in (r, w):
            os.close(fd)
        a.close()
        b.close()
