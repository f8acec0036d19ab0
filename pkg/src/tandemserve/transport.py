"""Wire protocol between device and cloud, with two carriers.

Frame layout (big endian):

    u32  length of everything after this field
    u8   protocol version (currently 1)
    u8   message type
    u64  session id
    u64  sequence number (strictly increasing per session per direction)
    ...  type-specific body

Bodies:

    HELLO        u32 vocab, u16 gamma, u8 mode kind, u32 k, f64 p,
                 u64 seed, u8 compression flag
    PREFILL_REQ  u32 count, count x u32 prompt tokens
    VERIFY_REQ   u32 cached_len, u32 n, n x u32 uncached tokens,
                 u32 start_pos, u8 mode kind, u32 k, f64 p,
                 f64 chunk_confidence, f64 chunk_importance,
                 u16 pending count, then per token:
                     u32 token, f64 confidence, f64 importance,
                     u8 dist tag (0 full, 1 compressed),
                     full:       u32 V, V x f64
                     compressed: u32 count, count x (u32 token, f64 prob)
    VERIFY_RESP  u16 accepted_count, u8 flags (1 correction, 2 bonus),
                 u32 correction
    RESYNC_RESP  u32 cached_len
    BYE          empty

Probabilities travel as 8-byte IEEE-754 doubles so both ends of the
wire reason about bit-identical numbers. ``decode(encode(m)) == m``
holds for every message, and every decodable frame re-encodes to the
same bytes.

The simulated carrier charges each frame ``bits / bandwidth`` of
transmission time plus a propagation delay, serializes frames per
direction (no overtaking, later frames queue behind in-flight bytes),
and hands delivery timing to the discrete-event loop. The socket
carrier speaks the same frames over a TCP stream.
"""

from __future__ import annotations

import math
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from queue import Empty, Queue
from typing import Callable, Optional, Union

import numpy as np

from .core import (
    DraftChunk,
    DraftToken,
    SamplingMode,
    TandemError,
    TokenDistribution,
    VerificationRequest,
    VerificationResult,
)
from .sim import EventLoop, SimGate, ThreadGate
from .specdec import CompressedDistribution

PROTOCOL_VERSION = 1

MSG_HELLO = 1
MSG_PREFILL_REQ = 2
MSG_VERIFY_REQ = 3
MSG_VERIFY_RESP = 4
MSG_RESYNC_RESP = 5
MSG_BYE = 6

_KNOWN_TYPES = frozenset(
    {MSG_HELLO, MSG_PREFILL_REQ, MSG_VERIFY_REQ, MSG_VERIFY_RESP, MSG_RESYNC_RESP, MSG_BYE}
)

_HEADER = struct.Struct(">BBQQ")
_LEN = struct.Struct(">I")

_MODE_KINDS = {"top1": 0, "topk": 1, "topp": 2}
_MODE_NAMES = {v: k for k, v in _MODE_KINDS.items()}


class ProtocolError(TandemError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnknownVersion(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class ChannelClosed(TandemError):
    pass


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hello:
    vocab_size: int
    gamma: int
    sampling: SamplingMode
    seed: int
    compression_on: bool


@dataclass(frozen=True)
class PrefillPayload:
    prompt: tuple[int, ...]


@dataclass(frozen=True)
class ResyncPayload:
    cached_len: int


Payload = Union[Hello, PrefillPayload, VerificationRequest, VerificationResult, ResyncPayload, None]


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    session: int
    seq: int
    payload: Payload


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


def encode(msg: WireMessage) -> bytes:
    body = _encode_body(msg)
    inner = _HEADER.pack(PROTOCOL_VERSION, msg.msg_type, msg.session, msg.seq) + body
    return _LEN.pack(len(inner)) + inner


def _encode_body(msg: WireMessage) -> bytes:
    t, p = msg.msg_type, msg.payload
    if t == MSG_HELLO:
        assert isinstance(p, Hello)
        return struct.pack(
            ">IHBIdQB",
            p.vocab_size,
            p.gamma,
            _MODE_KINDS[p.sampling.kind],
            p.sampling.k,
            p.sampling.p,
            p.seed,
            1 if p.compression_on else 0,
        )
    if t == MSG_PREFILL_REQ:
        assert isinstance(p, PrefillPayload)
        return struct.pack(f">I{len(p.prompt)}I", len(p.prompt), *p.prompt)
    if t == MSG_VERIFY_REQ:
        assert isinstance(p, VerificationRequest)
        return _encode_verify_req(p)
    if t == MSG_VERIFY_RESP:
        assert isinstance(p, VerificationResult)
        flags = (1 if p.correction is not None else 0) | (2 if p.bonus else 0)
        return struct.pack(
            ">HBI", p.accepted_count, flags, p.correction if p.correction is not None else 0
        )
    if t == MSG_RESYNC_RESP:
        assert isinstance(p, ResyncPayload)
        return struct.pack(">I", p.cached_len)
    if t == MSG_BYE:
        return b""
    raise UnknownType(f"cannot encode message type {t}")


def _encode_verify_req(req: VerificationRequest) -> bytes:
    chunk = req.pending
    mode = _chunk_mode(chunk)
    parts = [
        struct.pack(
            f">II{len(req.uncached_accepted)}I",
            req.cached_len,
            len(req.uncached_accepted),
            *req.uncached_accepted,
        ),
        struct.pack(
            ">IBIdddH",
            chunk.start_pos,
            _MODE_KINDS[mode.kind],
            mode.k,
            mode.p,
            chunk.chunk_confidence,
            chunk.chunk_importance,
            len(chunk.tokens),
        ),
    ]
    for tok in chunk.tokens:
        parts.append(struct.pack(">Idd", tok.token, tok.confidence, tok.importance))
        parts.append(_encode_dist(tok.dist))
    return b"".join(parts)


def _chunk_mode(chunk: DraftChunk) -> SamplingMode:
    for tok in chunk.tokens:
        if isinstance(tok.dist, CompressedDistribution):
            return tok.dist.mode
    return SamplingMode.topp(1.0)


def _encode_dist(dist: Union[TokenDistribution, CompressedDistribution]) -> bytes:
    if isinstance(dist, TokenDistribution):
        probs = dist.probs
        return struct.pack(">BI", 0, probs.shape[0]) + struct.pack(
            f">{probs.shape[0]}d", *probs
        )
    parts = [struct.pack(">BI", 1, len(dist.entries))]
    for token, prob in dist.entries:
        parts.append(struct.pack(">Id", token, prob))
    return b"".join(parts)


class _Reader:
    """Sequential struct reader with truncation checks."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._data):
            raise TruncatedFrame("frame body ends mid-field")
        out = struct.unpack_from(fmt, self._data, self._pos)
        self._pos += size
        return out

    def done(self) -> bool:
        return self._pos == len(self._data)


def decode(data: bytes) -> WireMessage:
    """Decode one complete frame. Raises on anything malformed."""
    if len(data) < _LEN.size:
        raise TruncatedFrame("frame shorter than its length prefix")
    (length,) = _LEN.unpack_from(data, 0)
    if len(data) - _LEN.size < length:
        raise TruncatedFrame(f"frame declares {length} bytes, has {len(data) - _LEN.size}")
    if len(data) - _LEN.size > length:
        raise ProtocolError("trailing bytes after frame")
    version, msg_type, session, seq = _HEADER.unpack_from(data, _LEN.size)
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"version {version}")
    if msg_type not in _KNOWN_TYPES:
        raise UnknownType(f"message type {msg_type}")
    reader = _Reader(data[_LEN.size + _HEADER.size:])
    payload = _decode_body(msg_type, session, reader)
    if not reader.done():
        raise ProtocolError("trailing bytes after body")
    return WireMessage(msg_type=msg_type, session=session, seq=seq, payload=payload)


def _decode_body(msg_type: int, session: int, r: _Reader) -> Payload:
    if msg_type == MSG_HELLO:
        vocab, gamma, kind, k, p, seed, comp = r.take(">IHBIdQB")
        return Hello(
            vocab_size=vocab,
            gamma=gamma,
            sampling=_mode_from_wire(kind, k, p),
            seed=seed,
            compression_on=bool(comp),
        )
    if msg_type == MSG_PREFILL_REQ:
        (count,) = r.take(">I")
        return PrefillPayload(prompt=tuple(r.take(f">{count}I")) if count else ())
    if msg_type == MSG_VERIFY_REQ:
        return _decode_verify_req(session, r)
    if msg_type == MSG_VERIFY_RESP:
        accepted, flags, correction = r.take(">HBI")
        return VerificationResult(
            session=session,
            accepted_count=accepted,
            correction=correction if flags & 1 else None,
            bonus=bool(flags & 2),
        )
    if msg_type == MSG_RESYNC_RESP:
        (cached_len,) = r.take(">I")
        return ResyncPayload(cached_len=cached_len)
    return None  # BYE


def _mode_from_wire(kind: int, k: int, p: float) -> SamplingMode:
    name = _MODE_NAMES.get(kind)
    if name is None:
        raise ProtocolError(f"unknown sampling kind {kind}")
    return SamplingMode(name, k=k, p=p)


def _decode_verify_req(session: int, r: _Reader) -> VerificationRequest:
    cached_len, n_uncached = r.take(">II")
    uncached = tuple(r.take(f">{n_uncached}I")) if n_uncached else ()
    start_pos, kind, k, p, chunk_conf, chunk_imp, n_pending = r.take(">IBIdddH")
    mode = _mode_from_wire(kind, k, p)
    tokens = []
    for _ in range(n_pending):
        token, confidence, importance = r.take(">Idd")
        tokens.append(
            DraftToken(
                token=token,
                confidence=confidence,
                importance=importance,
                dist=_decode_dist(r, mode),
            )
        )
    chunk = DraftChunk(
        session=session,
        start_pos=start_pos,
        tokens=tuple(tokens),
        chunk_confidence=chunk_conf,
        chunk_importance=chunk_imp,
    )
    return VerificationRequest(
        session=session, cached_len=cached_len, uncached_accepted=uncached, pending=chunk
    )


def _decode_dist(r: _Reader, mode: SamplingMode) -> Union[TokenDistribution, CompressedDistribution]:
    tag, count = r.take(">BI")
    if tag == 0:
        return TokenDistribution(np.array(r.take(f">{count}d")))
    if tag == 1:
        entries = tuple((t, pr) for t, pr in (r.take(">Id") for _ in range(count)))
        probs = np.array([pr for _, pr in entries]) if entries else np.zeros(0)
        return CompressedDistribution(
            mode=mode, entries=entries, residual_mass=1.0 - float(probs.sum())
        )
    raise ProtocolError(f"unknown distribution tag {tag}")


# ---------------------------------------------------------------------------
# Simulated carrier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelModel:
    """One direction of a link: serialization rate plus propagation.

    ``bandwidth_bps`` may be ``math.inf`` for an ideal link. The loss
    and reorder knobs exist for robustness tests and default to off;
    the protocol itself assumes a reliable ordered transport, so a
    reordered delivery surfaces as a sequence-number protocol error
    rather than being tolerated.
    """

    bandwidth_bps: float = 1e6
    propagation_delay_ms: float = 10.0
    loss_prob: float = 0.0
    reorder_jitter_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth_bps > 0.0:
            raise ValueError("bandwidth_bps must be positive")
        if self.propagation_delay_ms < 0.0:
            raise ValueError("propagation delay must be non-negative")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must lie in [0, 1)")
        if self.reorder_jitter_ms < 0.0:
            raise ValueError("reorder jitter must be non-negative")

    def transmission_seconds(self, n_bytes: int) -> float:
        if math.isinf(self.bandwidth_bps):
            return 0.0
        return n_bytes * 8.0 / self.bandwidth_bps

    @property
    def propagation_seconds(self) -> float:
        return self.propagation_delay_ms / 1000.0


class SimulatedEndpoint:
    """One end of a full-duplex simulated link.

    Outbound frames serialize FIFO behind in-flight bytes; inbound
    frames are decoded on delivery (the codec runs in every simulation)
    and either buffered for ``poll`` or handed to an ``on_deliver``
    callback. A loss generator, when armed, drops frames before they
    ever enter the channel.
    """

    def __init__(
        self,
        loop: EventLoop,
        channel: ChannelModel,
        name: str = "",
        loss_rng: Optional[np.random.Generator] = None,
    ):
        self._loop = loop
        self._channel = channel
        self.name = name
        self.peer: Optional["SimulatedEndpoint"] = None
        self.gate = SimGate(loop)
        self.closed = False
        self.on_deliver: Optional[Callable[[WireMessage], None]] = None
        self._inbox: deque[WireMessage] = deque()
        self._busy_until = 0.0
        self._next_seq = 0
        self._last_seen_seq: dict[int, int] = {}
        self._loss_rng = loss_rng

    def send(self, msg_type: int, session: int, payload: Payload) -> WireMessage:
        if self.closed or self.peer is None or self.peer.closed:
            raise ChannelClosed(f"endpoint {self.name} is closed")
        msg = WireMessage(msg_type=msg_type, session=session, seq=self._next_seq, payload=payload)
        self._next_seq += 1
        frame = encode(msg)
        if self._loss_rng is not None and self._channel.loss_prob > 0.0:
            if self._loss_rng.random() < self._channel.loss_prob:
                return msg  # dropped on the floor, like a lossy link would
        start = max(self._loop.now(), self._busy_until)
        self._busy_until = start + self._channel.transmission_seconds(len(frame))
        deliver_at = self._busy_until + self._channel.propagation_seconds
        if self._loss_rng is not None and self._channel.reorder_jitter_ms > 0.0:
            deliver_at += self._loss_rng.random() * self._channel.reorder_jitter_ms / 1000.0
        peer = self.peer
        self._loop.call_at(deliver_at, lambda: peer._deliver(frame))
        return msg

    def _deliver(self, frame: bytes) -> None:
        if self.closed:
            return
        msg = decode(frame)
        last = self._last_seen_seq.get(msg.session, -1)
        if msg.seq <= last:
            raise ProtocolError(
                f"sequence regression on session {msg.session}: {msg.seq} after {last}"
            )
        self._last_seen_seq[msg.session] = msg.seq
        if self.on_deliver is not None:
            self.on_deliver(msg)
        else:
            self._inbox.append(msg)
        self.gate.notify()

    def poll(self) -> Optional[WireMessage]:
        return self._inbox.popleft() if self._inbox else None

    def has_inbound(self) -> bool:
        return bool(self._inbox)

    def close(self) -> None:
        self.closed = True
        self.gate.notify()
        if self.peer is not None and not self.peer.closed:
            self.peer.gate.notify()


def simulated_pair(
    loop: EventLoop,
    uplink: ChannelModel,
    downlink: Optional[ChannelModel] = None,
    name: str = "",
    loss_rng: Optional[np.random.Generator] = None,
) -> tuple[SimulatedEndpoint, SimulatedEndpoint]:
    """Create a connected (device side, cloud side) endpoint pair."""
    a = SimulatedEndpoint(loop, uplink, name=f"{name}:device", loss_rng=loss_rng)
    b = SimulatedEndpoint(loop, downlink or uplink, name=f"{name}:cloud", loss_rng=loss_rng)
    a.peer, b.peer = b, a
    return a, b


# ---------------------------------------------------------------------------
# Socket carrier
# ---------------------------------------------------------------------------


def write_frame(sock: socket.socket, msg: WireMessage) -> None:
    sock.sendall(encode(msg))


def read_frame(sock: socket.socket) -> Optional[WireMessage]:
    """Read one frame; returns None on clean EOF at a frame boundary."""
    header = _read_exact(sock, _LEN.size, allow_eof=True)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    body = _read_exact(sock, length, allow_eof=False)
    return decode(header + body)


def _read_exact(sock: socket.socket, n: int, allow_eof: bool) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise TruncatedFrame(f"connection closed after {len(buf)}/{n} bytes")
        buf += chunk
    return buf


class SocketEndpoint:
    """Device-side endpoint over a TCP connection.

    A reader thread pushes decoded frames into an inbound queue and
    notifies the gate, giving this carrier the same poll/gate surface as
    the simulated one.
    """

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self.gate = ThreadGate()
        self.closed = False
        self._inbox: Queue[WireMessage] = Queue()
        self._next_seq = 0
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                msg = read_frame(self._sock)
                if msg is None:
                    break
                self._inbox.put(msg)
                self.gate.notify()
        except (OSError, TandemError):
            pass
        finally:
            self.closed = True
            self.gate.notify()

    def send(self, msg_type: int, session: int, payload: Payload) -> WireMessage:
        if self.closed:
            raise ChannelClosed("socket endpoint is closed")
        with self._send_lock:
            msg = WireMessage(msg_type=msg_type, session=session, seq=self._next_seq, payload=payload)
            self._next_seq += 1
            try:
                write_frame(self._sock, msg)
            except OSError as exc:
                self.closed = True
                raise ChannelClosed(str(exc)) from exc
        return msg

    def poll(self) -> Optional[WireMessage]:
        try:
            return self._inbox.get_nowait()
        except Empty:
            return None

    def has_inbound(self) -> bool:
        return not self._inbox.empty()

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self.gate.notify()
