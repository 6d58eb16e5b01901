"""Frame and field codec."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdperim import wire


def test_field_round_trip():
    fields = [(wire.F.SUBJECT_ID, b"\xaa" * 16), (wire.F.PORT, wire.u16(4444)), (wire.F.HOST, b"gateway")]
    decoded = wire.Fields.decode(wire.encode_fields(fields))
    assert decoded.need(wire.F.SUBJECT_ID) == b"\xaa" * 16
    assert decoded.u16(wire.F.PORT) == 4444
    assert decoded.text(wire.F.HOST) == "gateway"


def test_repeated_fields_keep_order():
    fields = [(wire.F.ENTRY, b"one"), (wire.F.ENTRY, b"two"), (wire.F.ENTRY, b"three")]
    decoded = wire.Fields.decode(wire.encode_fields(fields))
    assert decoded.all(wire.F.ENTRY) == [b"one", b"two", b"three"]


def test_missing_field_raises():
    decoded = wire.Fields.decode(wire.encode_fields([]))
    assert decoded.get(wire.F.HOST) is None
    with pytest.raises(wire.WireError):
        decoded.need(wire.F.HOST)


def test_frame_round_trip():
    frame = wire.encode_frame(wire.Kind.LOGIN_REQUEST, [(wire.F.SUBJECT_ID, b"\x01" * 16)])
    kind, fields = wire.decode_frame(frame)
    assert kind == wire.Kind.LOGIN_REQUEST
    assert fields.need(wire.F.SUBJECT_ID) == b"\x01" * 16


@pytest.mark.parametrize(
    "blob",
    [b"", b"\x00\x00\x00", b"\x00\x00\x00\x05\x01", b"\xff\xff\xff\xff\x01\x02"],
)
def test_malformed_frames_rejected(blob):
    with pytest.raises(wire.WireError):
        wire.decode_frame(blob)


def test_truncated_fields_rejected():
    good = wire.encode_fields([(wire.F.DATA, b"abcdef")])
    with pytest.raises(wire.WireError):
        wire.decode_fields(good[:-2])
    with pytest.raises(wire.WireError):
        wire.decode_fields(good[:2])


def test_splitter_reassembles_chunks():
    frames = [
        wire.encode_frame(wire.Kind.SECURE, [(wire.F.DATA, bytes([i]) * (i + 1))]) for i in range(5)
    ]
    stream = b"".join(frames)
    splitter = wire.FrameSplitter()
    seen = []
    for i in range(0, len(stream), 3):
        seen.extend(splitter.feed(stream[i : i + 3]))
    assert seen == frames


@given(st.lists(st.tuples(st.integers(0, 255), st.binary(max_size=64)), max_size=8))
def test_field_codec_round_trips_any_payload(pairs):
    blob = wire.encode_fields(pairs)
    assert wire.decode_fields(blob) == [(fid, val) for fid, val in pairs]


def test_service_entry_round_trip():
    blob = wire.service_entry("echo-cloud", "gateway", 4444)
    assert wire.parse_service_entry(blob) == ("echo-cloud", "gateway", 4444)
