import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from convoy.wire import (
    HEADER_LEN,
    MAGIC,
    MalformedFrame,
    MsgType,
    Truncated,
    UnsupportedVersion,
    WireMessage,
    decode_matrix,
    decode_message,
    encode_matrix,
    encode_message,
    matrix_from_bytes,
    read_frame,
)


@pytest.mark.parametrize("kind", list(MsgType))
def test_round_trip_each_type(kind):
    msg = WireMessage(kind, bytes(range(kind * 7)))
    assert decode_message(encode_message(msg)) == msg


def test_header_layout():
    frame = encode_message(WireMessage(MsgType.COMPUTE_REQUEST, b"abc"))
    assert HEADER_LEN == 14
    assert frame[:4] == MAGIC and frame[4] == 1 and frame[5] == 3
    assert frame[6:14] == (3).to_bytes(8, "little")


def test_bad_magic():
    frame = bytearray(encode_message(WireMessage(MsgType.HELLO, b"x")))
    frame[0:4] = b"NOPE"
    with pytest.raises(MalformedFrame):
        decode_message(bytes(frame))


def test_bad_version():
    frame = bytearray(encode_message(WireMessage(MsgType.HELLO)))
    frame[4] = 2
    with pytest.raises(UnsupportedVersion):
        decode_message(bytes(frame))


def test_unknown_type_and_trailing_bytes():
    frame = bytearray(encode_message(WireMessage(MsgType.HELLO)))
    frame[5] = 99
    with pytest.raises(MalformedFrame):
        decode_message(bytes(frame))
    with pytest.raises(MalformedFrame):
        decode_message(encode_message(WireMessage(MsgType.HELLO, b"ab")) + b"z")


def test_truncated_frames():
    frame = encode_message(WireMessage(MsgType.COMPUTE_REPLY, b"0123456789"))
    for cut in (3, HEADER_LEN - 1, HEADER_LEN + 4):
        with pytest.raises(Truncated):
            decode_message(frame[:cut])


def test_scalar_matrix_bytes():
    want = bytes.fromhex("01000000" "01000000" "00" "0700000000000000")
    assert encode_matrix(np.array([[7]], dtype=np.int64)) == want
    np.testing.assert_array_equal(matrix_from_bytes(want), [[7]])


def test_matrix_errors():
    good = encode_matrix(np.ones((2, 3)))
    with pytest.raises(Truncated):
        matrix_from_bytes(good[:-1])
    with pytest.raises(Truncated):
        matrix_from_bytes(good[:5])
    with pytest.raises(MalformedFrame):
        matrix_from_bytes(good + b"\0")
    bad = bytearray(good)
    bad[8] = 9
    with pytest.raises(MalformedFrame):
        matrix_from_bytes(bytes(bad))
    with pytest.raises(MalformedFrame):
        matrix_from_bytes(bytes.fromhex("00000000" "01000000" "00"))


def test_decode_matrix_offset():
    a, b = np.arange(6).reshape(2, 3), np.eye(2)
    buf = b"pre" + encode_matrix(a) + encode_matrix(b)
    got_a, end = decode_matrix(buf, 3)
    got_b, end2 = decode_matrix(buf, end)
    np.testing.assert_array_equal(got_a, a)
    np.testing.assert_array_equal(got_b, b)
    assert end2 == len(buf) and got_a.dtype == np.int64 and got_b.dtype == np.float64


def _reader(data: bytes):
    pos = 0

    def read_exact(n):
        nonlocal pos
        chunk = data[pos:pos + n]
        pos += len(chunk)
        return chunk
    return read_exact


def test_read_frame_stream():
    f1 = encode_message(WireMessage(MsgType.HELLO, b"\x01\0\0\0"))
    f2 = encode_message(WireMessage(MsgType.MODEL_REQUEST))
    read = _reader(f1 + f2)
    assert read_frame(read) == f1
    assert read_frame(read) == f2
    with pytest.raises(EOFError):
        read_frame(read)
    with pytest.raises(Truncated):
        read_frame(_reader(f1[:-1]))
    with pytest.raises(MalformedFrame):
        read_frame(_reader(f1), max_payload=2)


finite_i64 = hnp.arrays(np.int64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6))
finite_f64 = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                        elements=st.floats(allow_nan=False, allow_infinity=True, width=64))


@given(st.one_of(finite_i64, finite_f64))
def test_matrix_round_trip_bit_exact(a):
    got = matrix_from_bytes(encode_matrix(a))
    assert got.dtype == a.dtype and got.tobytes() == a.tobytes()
