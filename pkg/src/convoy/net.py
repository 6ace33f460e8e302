"""Client and server sessions over the framed wire protocol.

One session carries one convolution layer:

    C -> S  HELLO            u32 layer index
    S -> C  HELLO            sha256(W̄) | u32 k | u32 c_in | u32 c_out | u8 dtype
    C -> S  MODEL_REQUEST    (empty; skipped when the client holds W̄ with that hash)
    S -> C  MODEL_REPLY      sha256(W̄) | matrix W̄
    C -> S  COMPUTE_REQUEST  matrix X̄'
    S -> C  COMPUTE_REPLY    u64 server compute ns | u64 multiply count | matrix Ȳ'

Anything out of order is answered with an ERROR frame (UTF-8 text) and the
session is closed. Only W̄, X̄' and Ȳ' ever cross the wire.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import keymask
from .keymask import MaskSet, SecretKey, SecurityParams
from .server import ServerBehavior, adversary_compute
from .tensor import DTYPES, FLOAT, INT, ConvShape, OpCounter, as_matrix, flatten_kernels, im2col, reshape_output
from .verify import make_verification_tag, verify
from .wire import (
    MsgType,
    ProtocolError,
    WireMessage,
    decode_matrix,
    decode_message,
    encode_matrix,
    encode_message,
    matrix_from_bytes,
    read_frame,
)

log = logging.getLogger("convoy")
if "CONVOY_LOG" in os.environ:
    logging.basicConfig(level=os.environ["CONVOY_LOG"].upper())

_HELLO_REQ = struct.Struct("<I")
_HELLO_REPLY = struct.Struct("<32sIIIB")
_REPLY_STATS = struct.Struct("<QQ")
_DTYPE_CODE = {INT: 0, FLOAT: 1}
_CODE_MODE = {0: "int", 1: "float"}


class ConnectFailed(ConnectionError):
    pass


class ShapeMismatch(ValueError):
    pass


class RemoteError(ProtocolError):
    """The peer answered with an ERROR frame."""


class VerificationFailed(Exception):
    """The returned product failed the check; the result was discarded."""

    def __init__(self, state: SessionState):
        super().__init__(f"verification failed for {state.shape}")
        self.state = state


def error_message(text: str) -> WireMessage:
    return WireMessage(MsgType.ERROR, text.encode("utf-8"))


# --------------------------------------------------------------------------
# server


class ConvServer:
    """Hosts one or more layers of kernels and answers sessions about them."""

    def __init__(self, kernels, behavior: ServerBehavior | None = None, mode: str = "int", seed=None):
        if isinstance(kernels, np.ndarray) and kernels.ndim == 4:
            kernels = [kernels]
        dtype = DTYPES[mode]
        self.mode = mode
        self.layers = [as_matrix(flatten_kernels(w), dtype) for w in kernels]
        self.kernel_sizes = [int(np.asarray(w).shape[2]) for w in kernels]
        self.hashes = [keymask.model_hash(wbar) for wbar in self.layers]
        self.behavior = behavior or ServerBehavior()
        self._seeds = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._lock = threading.Lock()
        self.counter = OpCounter()
        self.sessions = 0

    def session(self) -> ServerSession:
        with self._lock:
            self.sessions += 1
            (child,) = self._seeds.spawn(1)
        return ServerSession(self, np.random.default_rng(child))

    def _tally(self, counter: OpCounter):
        with self._lock:
            self.counter += counter


class ServerSession:
    """Sans-IO state machine for one connection: feed a frame, get the reply frame."""

    def __init__(self, server: ConvServer, rng: np.random.Generator):
        self.server = server
        self.rng = rng
        self.phase = "idle"
        self.layer = None
        self.closed = False

    def handle(self, frame: bytes) -> bytes:
        try:
            msg = decode_message(frame)
            reply = self._dispatch(msg)
        except (ProtocolError, ValueError, TypeError, OverflowError) as exc:
            log.info("session error: %s", exc)
            self.closed = True
            return encode_message(error_message(str(exc)))
        return encode_message(reply)

    def _dispatch(self, msg: WireMessage) -> WireMessage:
        if self.closed:
            raise ProtocolError("session already closed")
        kind = msg.msg_type
        if kind == MsgType.HELLO and self.phase == "idle":
            if len(msg.payload) != _HELLO_REQ.size:
                raise ProtocolError("HELLO payload must be a u32 layer index")
            (layer,) = _HELLO_REQ.unpack(msg.payload)
            if layer >= len(self.server.layers):
                raise ProtocolError(f"no layer {layer}; server hosts {len(self.server.layers)}")
            self.layer = layer
            self.phase = "ready"
            wbar = self.server.layers[layer]
            k = self.server.kernel_sizes[layer]
            payload = _HELLO_REPLY.pack(self.server.hashes[layer], k, wbar.shape[1] // (k * k),
                                        wbar.shape[0], _DTYPE_CODE[wbar.dtype])
            return WireMessage(MsgType.HELLO, payload)
        if kind == MsgType.MODEL_REQUEST and self.phase == "ready":
            if msg.payload:
                raise ProtocolError("MODEL_REQUEST takes no payload")
            self.phase = "model-sent"
            wbar = self.server.layers[self.layer]
            return WireMessage(MsgType.MODEL_REPLY, self.server.hashes[self.layer] + encode_matrix(wbar))
        if kind == MsgType.COMPUTE_REQUEST and self.phase in ("ready", "model-sent"):
            wbar = self.server.layers[self.layer]
            xbar_prime = matrix_from_bytes(msg.payload)
            if xbar_prime.dtype != wbar.dtype:
                raise ProtocolError("blinded input dtype differs from the model's")
            if xbar_prime.shape[0] != wbar.shape[1]:
                raise ProtocolError(f"blinded input has {xbar_prime.shape[0]} rows, model needs {wbar.shape[1]}")
            counter = OpCounter()
            t0 = time.perf_counter_ns()
            ybar_prime = adversary_compute(wbar, xbar_prime, self.server.behavior, self.rng, counter)
            elapsed = time.perf_counter_ns() - t0
            self.server._tally(counter)
            self.phase = "done"
            self.closed = True
            return WireMessage(MsgType.COMPUTE_REPLY,
                               _REPLY_STATS.pack(elapsed, counter.sm) + encode_matrix(ybar_prime))
        raise ProtocolError(f"unexpected {kind.name} in phase {self.phase}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        session = self.server.conv.session()
        reader = sock.makefile("rb")
        try:
            while not session.closed:
                try:
                    frame = read_frame(reader.read)
                except EOFError:
                    return
                except ProtocolError as exc:
                    sock.sendall(encode_message(error_message(str(exc))))
                    return
                sock.sendall(session.handle(frame))
        except OSError as exc:
            log.info("connection dropped: %s", exc)
        finally:
            reader.close()


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    if not host or not port:
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class RunningServer:
    """A TCP server on a background thread; ``address`` is the bound (host, port)."""

    def __init__(self, conv: ConvServer, endpoint=("127.0.0.1", 0)):
        self.conv = conv
        self._tcp = _TCPServer(parse_endpoint(endpoint), _Handler)
        self._tcp.conv = conv
        self.address = self._tcp.server_address[:2]
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def close(self):
        self._tcp.shutdown()
        self._tcp.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(endpoint, kernels, behavior: ServerBehavior | None = None, mode: str = "int", seed=None):
    """Serve until interrupted."""
    conv = ConvServer(kernels, behavior, mode, seed)
    with _TCPServer(parse_endpoint(endpoint), _Handler) as tcp:
        tcp.conv = conv
        log.info("serving %d layer(s) on %s:%d as %s", len(conv.layers), *tcp.server_address[:2], conv.behavior)
        tcp.serve_forever()


# --------------------------------------------------------------------------
# transports


class SocketTransport:
    def __init__(self, endpoint, timeout: float | None = 30.0):
        try:
            self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        except OSError as exc:
            raise ConnectFailed(f"cannot reach {endpoint}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = self.sock.makefile("rb")

    def send(self, frame: bytes):
        self.sock.sendall(frame)

    def recv(self) -> bytes:
        try:
            return read_frame(self._reader.read)
        except EOFError:
            raise ProtocolError("server closed the connection") from None

    def close(self):
        self._reader.close()
        self.sock.close()


class LoopbackTransport:
    """In-process transport: frames go straight into a server session."""

    def __init__(self, server: ConvServer):
        self.session = server.session()
        self._pending: list[bytes] = []

    def send(self, frame: bytes):
        if self.session.closed:
            raise ProtocolError("server closed the connection")
        self._pending.append(self.session.handle(frame))

    def recv(self) -> bytes:
        if not self._pending:
            raise ProtocolError("no reply pending")
        return self._pending.pop(0)

    def close(self):
        pass


class RecordingTransport:
    """Wraps another transport and keeps every frame in ``transcript`` as (direction, bytes)."""

    def __init__(self, inner, transcript: list | None = None):
        self.inner = inner
        self.transcript = [] if transcript is None else transcript

    def send(self, frame: bytes):
        self.transcript.append(("out", bytes(frame)))
        self.inner.send(frame)

    def recv(self) -> bytes:
        frame = self.inner.recv()
        self.transcript.append(("in", bytes(frame)))
        return frame

    def close(self):
        self.inner.close()


def connect(endpoint):
    """Open a transport: ``"host:port"``/tuple for TCP, a :class:`ConvServer` for loopback,
    or any zero-argument callable returning a transport."""
    if isinstance(endpoint, ConvServer):
        return LoopbackTransport(endpoint)
    if isinstance(endpoint, RunningServer):
        return SocketTransport(endpoint.address)
    if callable(endpoint):
        return endpoint()
    return SocketTransport(endpoint)


# --------------------------------------------------------------------------
# client

_PHASES = ("idle", "model-fetched", "awaiting-reply", "done")


@dataclass
class SessionState:
    shape: ConvShape | None = None
    phase: str = "idle"
    sk: SecretKey | None = field(default=None, repr=False)
    timings: dict[str, float] = field(default_factory=dict)
    counters: dict[str, OpCounter] = field(default_factory=dict)
    server_compute_ms: float = 0.0
    server_sm: int = 0

    def advance(self, phase: str):
        if _PHASES.index(phase) != _PHASES.index(self.phase) + 1:
            raise ProtocolError(f"illegal session transition {self.phase} -> {phase}")
        self.phase = phase

    @property
    def index_size(self) -> int:
        return len(self.sk.index_set) if self.sk is not None else 0


class _Timer:
    def __init__(self, timings: dict, name: str):
        self.timings = timings
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + (time.perf_counter() - self.t0) * 1e3


def _expect(transport, kind: MsgType) -> WireMessage:
    msg = decode_message(transport.recv())
    if msg.msg_type == MsgType.ERROR:
        raise RemoteError(msg.payload.decode("utf-8", "replace"))
    if msg.msg_type != kind:
        raise ProtocolError(f"expected {kind.name}, got {msg.msg_type.name}")
    return msg


class Client:
    """Client side of the protocol; caches W̄ per layer and one mask pool per (model, input size)."""

    def __init__(self, endpoint, params: SecurityParams | None = None, rng=None, masks: MaskSet | None = None):
        self.endpoint = endpoint
        self.params = params or SecurityParams()
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._models: dict[int, tuple[bytes, np.ndarray, int]] = {}
        self._masks: dict[tuple[bytes, int, int], MaskSet] = {}
        if masks is not None:
            self._masks[(masks.wbar_hash, masks.shape.m, masks.shape.n)] = masks

    def model(self, layer: int = 0) -> np.ndarray | None:
        entry = self._models.get(layer)
        return None if entry is None else entry[1]

    def masks_for(self, layer: int, m: int, n: int) -> MaskSet | None:
        entry = self._models.get(layer)
        return None if entry is None else self._masks.get((entry[0], m, n))

    def infer(self, x, layer: int = 0) -> tuple[np.ndarray, SessionState]:
        """Convolve ``x`` (c_in, m, n) with the server's layer, verified and unblinded."""
        params = self.params
        x = np.asarray(x)
        if x.ndim != 3:
            raise ShapeMismatch(f"input must be (c_in, m, n), got {x.shape}")
        x = x.astype(params.dtype) if x.dtype != params.dtype else x
        if params.mode == "int" and x.size and int(np.max(np.abs(x))) > params.input_bound:
            raise ValueError(f"input magnitude exceeds the declared bound {params.input_bound}")
        state = SessionState()
        t = state.timings
        transport = connect(self.endpoint)
        try:
            with _Timer(t, "handshake_ms"):
                transport.send(encode_message(WireMessage(MsgType.HELLO, _HELLO_REQ.pack(layer))))
                hello = _expect(transport, MsgType.HELLO)
                if len(hello.payload) != _HELLO_REPLY.size:
                    raise ProtocolError("malformed HELLO reply")
                digest, k, c_in, c_out, code = _HELLO_REPLY.unpack(hello.payload)
                if _CODE_MODE.get(code) != params.mode:
                    raise ShapeMismatch(f"server model is {_CODE_MODE.get(code)} mode, client is {params.mode}")
                if x.shape[0] != c_in or k > min(x.shape[1], x.shape[2]):
                    raise ShapeMismatch(f"input {x.shape} does not fit a {c_out}x{c_in}x{k}x{k} layer")
                shape = ConvShape(m=x.shape[1], n=x.shape[2], k=k, c_in=c_in, c_out=c_out)
                state.shape = shape
                cached = self._models.get(layer)
                if cached is None or cached[0] != digest:
                    transport.send(encode_message(WireMessage(MsgType.MODEL_REQUEST)))
                    reply = _expect(transport, MsgType.MODEL_REPLY)
                    wbar = matrix_from_bytes(reply.payload[32:])
                    if reply.payload[:32] != digest or keymask.model_hash(wbar) != digest:
                        raise ProtocolError("model hash mismatch")
                    if wbar.shape != shape.kernel_dims:
                        raise ProtocolError(f"model matrix {wbar.shape} disagrees with HELLO {shape.kernel_dims}")
                    self._models[layer] = (digest, wbar, k)
                wbar = self._models[layer][1]
            state.advance("model-fetched")

            masks = self._masks.get((digest, shape.m, shape.n))
            if masks is None:
                with _Timer(t, "precompute_ms"):
                    masks = keymask.precompute_masks(wbar, shape, params, self.rng)
                self._masks[(digest, shape.m, shape.n)] = masks
            elif masks.shape != shape or masks.dtype != params.dtype:
                raise ShapeMismatch("supplied mask pool does not match this layer")

            with _Timer(t, "im2col_ms"):
                xbar = im2col(x, k)
            with _Timer(t, "keygen_ms"):
                sk = keymask.keygen(params, shape, self.rng)
            state.sk = sk
            blind_ops = OpCounter()
            with _Timer(t, "blind_ms"):
                xbar_prime = keymask.blind(xbar, sk, masks, blind_ops)
                tag = make_verification_tag(sk.r, wbar, blind_ops)
            state.counters["blind"] = blind_ops

            with _Timer(t, "roundtrip_ms"):
                transport.send(encode_message(WireMessage(MsgType.COMPUTE_REQUEST, encode_matrix(xbar_prime))))
                state.advance("awaiting-reply")
                reply = _expect(transport, MsgType.COMPUTE_REPLY)
                if len(reply.payload) < _REPLY_STATS.size:
                    raise ProtocolError("COMPUTE_REPLY truncated")
                ns, server_sm = _REPLY_STATS.unpack_from(reply.payload)
                ybar_prime, end = decode_matrix(reply.payload, _REPLY_STATS.size)
                if end != len(reply.payload):
                    raise ProtocolError("trailing bytes in COMPUTE_REPLY")
            state.server_compute_ms = ns / 1e6
            state.server_sm = server_sm
            if ybar_prime.shape != shape.result_dims or ybar_prime.dtype != params.dtype:
                raise ProtocolError(f"server returned {ybar_prime.shape} {ybar_prime.dtype}")

            verify_ops = OpCounter()
            with _Timer(t, "verify_ms"):
                ok = verify(ybar_prime, xbar_prime, sk.r, tag, params.tolerance, verify_ops)
            state.counters["verify"] = verify_ops
            if not ok:
                raise VerificationFailed(state)

            recover_ops = OpCounter()
            with _Timer(t, "recover_ms"):
                ybar = keymask.recover(ybar_prime, sk, masks, recover_ops)
            state.counters["recover"] = recover_ops
            with _Timer(t, "reshape_ms"):
                y = reshape_output(ybar, shape)
            state.advance("done")
            return y, state
        finally:
            transport.close()


def client_infer(endpoint, x, params: SecurityParams | None = None, masks: MaskSet | None = None,
                 layer: int = 0, rng=None) -> tuple[np.ndarray, SessionState]:
    """One-shot inference; pass ``masks`` to reuse a pool, otherwise one is built on first use."""
    return Client(endpoint, params, rng, masks).infer(x, layer)
