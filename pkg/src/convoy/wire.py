"""Length-prefixed binary framing.

Frame: ``b"CVY1" | version u8 | msg_type u8 | payload_len u64 LE | payload``.
Matrix: ``rows u32 LE | cols u32 LE | dtype u8 (0 = i64, 1 = f64) | data LE row-major``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import FLOAT, INT, as_matrix

MAGIC = b"CVY1"
VERSION = 1

_HEADER = struct.Struct("<4sBBQ")
HEADER_LEN = _HEADER.size
_MATRIX_HEADER = struct.Struct("<IIB")
MATRIX_HEADER_LEN = _MATRIX_HEADER.size

_DTYPE_CODES = {INT: 0, FLOAT: 1}
_CODE_DTYPES = {0: np.dtype("<i8"), 1: np.dtype("<f8")}


class ProtocolError(Exception):
    pass


class MalformedFrame(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class MsgType(enum.IntEnum):
    HELLO = 0
    MODEL_REQUEST = 1
    MODEL_REPLY = 2
    COMPUTE_REQUEST = 3
    COMPUTE_REPLY = 4
    ERROR = 5


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""


def encode_message(msg: WireMessage) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, int(msg.msg_type), len(msg.payload)) + bytes(msg.payload)


def decode_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) < HEADER_LEN:
        raise Truncated(f"frame header needs {HEADER_LEN} bytes, got {len(header)}")
    magic, version, msg_type, payload_len = _HEADER.unpack_from(header)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise MalformedFrame(f"unknown message type {msg_type}") from None
    return kind, payload_len


def decode_message(frame: bytes) -> WireMessage:
    """Decode exactly one frame; trailing bytes are rejected."""
    kind, payload_len = decode_header(frame)
    body = frame[HEADER_LEN:]
    if len(body) < payload_len:
        raise Truncated(f"payload declares {payload_len} bytes, only {len(body)} present")
    if len(body) > payload_len:
        raise MalformedFrame(f"{len(body) - payload_len} trailing bytes after payload")
    return WireMessage(kind, bytes(body))


def encode_matrix(a) -> bytes:
    a = as_matrix(a)
    rows, cols = a.shape
    code = _DTYPE_CODES[a.dtype]
    return _MATRIX_HEADER.pack(rows, cols, code) + a.astype(_CODE_DTYPES[code], copy=False).tobytes()


def decode_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one matrix starting at ``offset``; returns the matrix and the offset past it."""
    if len(buf) - offset < MATRIX_HEADER_LEN:
        raise Truncated("matrix header truncated")
    rows, cols, code = _MATRIX_HEADER.unpack_from(buf, offset)
    if code not in _CODE_DTYPES:
        raise MalformedFrame(f"unknown matrix dtype code {code}")
    if rows < 1 or cols < 1:
        raise MalformedFrame(f"empty matrix {rows}x{cols}")
    start = offset + MATRIX_HEADER_LEN
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise Truncated(f"matrix {rows}x{cols} needs {end - start} data bytes, got {len(buf) - start}")
    data = np.frombuffer(buf, dtype=_CODE_DTYPES[code], count=rows * cols, offset=start)
    native = INT if code == 0 else FLOAT
    return data.astype(native).reshape(rows, cols), end


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    a, end = decode_matrix(buf)
    if end != len(buf):
        raise MalformedFrame("trailing bytes after matrix")
    return a


MAX_PAYLOAD = 1 << 33


def read_frame(read_exact, max_payload: int = MAX_PAYLOAD) -> bytes:
    """Read one whole frame via ``read_exact(n) -> bytes`` (which returns fewer bytes only at EOF)."""
    header = read_exact(HEADER_LEN)
    if not header:
        raise EOFError("connection closed")
    if len(header) < HEADER_LEN:
        raise Truncated("connection closed inside a frame header")
    _, payload_len = decode_header(header)
    if payload_len > max_payload:
        raise MalformedFrame(f"payload of {payload_len} bytes exceeds the {max_payload} byte limit")
    payload = read_exact(payload_len) if payload_len else b""
    if len(payload) < payload_len:
        raise Truncated("connection closed inside a frame payload")
    return header + payload
