"""Cloud runtime: verification-aware scheduling and partial prefill.

The scheduler runs iteration by iteration over a request pool holding
two kinds of work: new-session prefills and verification requests. Each
iteration drains every queued prefill into one batch; only when no
prefill is waiting does it drain the verification queue instead, so
prefill strictly preempts verification and the two kinds never share an
iteration. A verification request is executed as a partial prefill: the
device-accepted-but-uncached tokens plus the pending tokens are pushed
through the target model on top of the session's cached prefix. The
flattened tokens of a verification batch are segmented into fixed-size
chunks (32 by default) purely for accounting against the compute cost
model, mirroring how a batched engine would tile the work.

Responses are emitted after the iteration's modeled compute time has
elapsed. A request whose cached-length claim disagrees with the
registry is answered with a resync verdict carrying the registry's
view instead of being verified.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .core import (
    EmptyChunk,
    PositionMismatch,
    TandemError,
    TokenDistribution,
    TokenId,
    VerificationRequest,
    VerificationResult,
    validate_request,
)
from .models import LanguageModelBackend
from .sim import Delay, Gate, ThreadGate, WaitGate, run_blocking
from .specdec import CompressedDistribution, verify_chunk, verify_with_compressed
from .transport import (
    Hello,
    MSG_BYE,
    MSG_HELLO,
    MSG_PREFILL_REQ,
    MSG_RESYNC_RESP,
    MSG_VERIFY_REQ,
    MSG_VERIFY_RESP,
    ResyncPayload,
    WireMessage,
    read_frame,
    write_frame,
)

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 32

ReplyFn = Callable[[int, int, object], None]


class CacheDesync(TandemError):
    """The request's cached-length claim disagrees with the registry."""


@dataclass
class ComputeCostModel:
    """Simulated engine cost: a fixed per-iteration overhead plus a
    per-token forward cost. Defaults make a four-token verification at
    batch size one cost 0.4 seconds."""

    per_token_forward_cost: float = 0.09
    fixed_iteration_overhead: float = 0.04

    def __post_init__(self) -> None:
        if self.per_token_forward_cost < 0.0 or self.fixed_iteration_overhead < 0.0:
            raise ValueError("cost model parameters must be non-negative")

    def iteration_cost(self, total_tokens: int) -> float:
        return self.fixed_iteration_overhead + self.per_token_forward_cost * total_tokens


@dataclass
class SessionCache:
    """Tokens the cloud holds for a session; grows monotonically."""

    session: int
    tokens: list[TokenId] = field(default_factory=list)

    @property
    def cached_len(self) -> int:
        return len(self.tokens)

    def extend(self, new_tokens) -> None:
        self.tokens.extend(new_tokens)


@dataclass
class SessionState:
    """Per-session bookkeeping established by the Hello handshake."""

    session: int
    hello: Hello
    reply: ReplyFn
    cache: SessionCache


@dataclass
class PrefillEntry:
    session: int
    prompt: tuple[TokenId, ...]
    arrival: float


@dataclass
class VerifyEntry:
    session: int
    request: VerificationRequest
    arrival: float


class IterationKind(Enum):
    PREFILL = "prefill"
    VERIFY = "verify"
    IDLE = "idle"


@dataclass
class ScheduleIteration:
    """One scheduling decision: what runs in the next engine pass."""

    kind: IterationKind
    members: list = field(default_factory=list)
    chunks: tuple[int, ...] = ()

    @property
    def total_tokens(self) -> int:
        if self.kind is IterationKind.PREFILL:
            return sum(len(m.prompt) for m in self.members)
        if self.kind is IterationKind.VERIFY:
            return sum(m.request.total_new_tokens() for m in self.members)
        return 0


class RequestPool:
    """FIFO queues feeding the scheduler. A session sits in at most one
    queue at a time because the device keeps a single request in flight."""

    def __init__(self) -> None:
        self.prefill_queue: deque[PrefillEntry] = deque()
        self.verify_queue: deque[VerifyEntry] = deque()
        self.active: set[int] = set()

    def enqueue_prefill(self, entry: PrefillEntry) -> None:
        self.prefill_queue.append(entry)
        self.active.add(entry.session)

    def enqueue_verify(self, entry: VerifyEntry) -> None:
        self.verify_queue.append(entry)
        self.active.add(entry.session)

    def empty(self) -> bool:
        return not self.prefill_queue and not self.verify_queue


def chunk_sizes(total_tokens: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> tuple[int, ...]:
    """Fixed-size segmentation; every chunk is full except maybe the last."""
    if total_tokens <= 0:
        return ()
    full, rem = divmod(total_tokens, chunk_size)
    return (chunk_size,) * full + ((rem,) if rem else ())


def schedule_next(pool: RequestPool, chunk_size: int = DEFAULT_CHUNK_SIZE) -> ScheduleIteration:
    """Next iteration: all queued prefills, else all queued verifies, else idle."""
    if pool.prefill_queue:
        members = list(pool.prefill_queue)
        pool.prefill_queue.clear()
        return ScheduleIteration(kind=IterationKind.PREFILL, members=members)
    if pool.verify_queue:
        members = list(pool.verify_queue)
        pool.verify_queue.clear()
        total = sum(m.request.total_new_tokens() for m in members)
        return ScheduleIteration(
            kind=IterationKind.VERIFY,
            members=members,
            chunks=chunk_sizes(total, chunk_size),
        )
    return ScheduleIteration(kind=IterationKind.IDLE)


def execute_partial_prefill(
    request: VerificationRequest,
    cache: SessionCache,
    engine: LanguageModelBackend,
) -> list[TokenDistribution]:
    """Forward the uncached and pending tokens on top of the cached prefix.

    Extends the cache with the uncached accepted tokens (they are
    committed on the device already) and returns one target distribution
    per pending position plus one for the bonus position. A request
    whose cached-length claim does not match the registry raises
    CacheDesync; the serve loop turns that into a resync verdict.
    """
    if request.cached_len != cache.cached_len:
        raise CacheDesync(
            f"request claims {request.cached_len} cached tokens, registry holds {cache.cached_len}"
        )
    prefix = list(cache.tokens) + list(request.uncached_accepted)
    pending_ids = list(request.pending.token_ids)
    dists = [
        engine.distribution(prefix + pending_ids[:j]) for j in range(len(pending_ids) + 1)
    ]
    cache.extend(request.uncached_accepted)
    return dists


def verify_and_respond(
    request: VerificationRequest,
    target_dists: list[TokenDistribution],
    cache: SessionCache,
    rng: np.random.Generator,
) -> VerificationResult:
    """Run the acceptance test and commit the verdict into the cache."""
    compressed = isinstance(request.pending.tokens[0].dist, CompressedDistribution)
    verify = verify_with_compressed if compressed else verify_chunk
    result = verify(request.pending, target_dists, rng)
    accepted = request.pending.token_ids[: result.accepted_count]
    cache.extend(accepted)
    if result.correction is not None:
        cache.extend([result.correction])
    return result


class CloudRuntime:
    """Owns the pool, the session registry, and the serve loop.

    ``ingest`` is the thread-safe ingress boundary: carriers call it
    from any thread with a decoded message and a reply function; the
    serve loop drains staged messages into the pool at the top of each
    iteration.
    """

    def __init__(
        self,
        engine: LanguageModelBackend,
        cost_model: Optional[ComputeCostModel] = None,
        clock: Callable[[], float] = time.monotonic,
        gate: Optional[Gate] = None,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
    ):
        self.engine = engine
        self.cost_model = cost_model or ComputeCostModel()
        self.clock = clock
        self.gate = gate if gate is not None else ThreadGate()
        self.chunk_size = chunk_size
        self.pool = RequestPool()
        self.sessions: dict[int, SessionState] = {}
        self._staged: deque[tuple[WireMessage, ReplyFn]] = deque()
        self._stage_lock = threading.Lock()
        self._shutdown = False
        # operational counters
        self.iterations = 0
        self.prefills_served = 0
        self.verifies_served = 0
        self.resyncs_sent = 0
        self.batch_sizes: list[int] = []
        self.chunk_fills: list[float] = []
        self.verify_latencies: list[float] = []
        self.verify_waits: list[float] = []

    # -- ingress ------------------------------------------------------------

    def ingest(self, msg: WireMessage, reply: ReplyFn) -> None:
        with self._stage_lock:
            self._staged.append((msg, reply))
        self.gate.notify()

    def stop(self) -> None:
        self._shutdown = True
        self.gate.notify()

    def _drain_staged(self) -> None:
        with self._stage_lock:
            staged, self._staged = self._staged, deque()
        for msg, reply in staged:
            self._route(msg, reply)

    def _route(self, msg: WireMessage, reply: ReplyFn) -> None:
        if msg.msg_type == MSG_HELLO:
            hello = msg.payload
            if hello.vocab_size != self.engine.vocab_size:
                logger.error(
                    "session %d vocabulary %d does not match engine %d; ignoring",
                    msg.session, hello.vocab_size, self.engine.vocab_size,
                )
                return
            self.sessions[msg.session] = SessionState(
                session=msg.session,
                hello=hello,
                reply=reply,
                cache=SessionCache(session=msg.session),
            )
        elif msg.msg_type == MSG_PREFILL_REQ:
            state = self.sessions.get(msg.session)
            if state is None:
                logger.error("prefill for unknown session %d dropped", msg.session)
                return
            self.pool.enqueue_prefill(
                PrefillEntry(session=msg.session, prompt=msg.payload.prompt, arrival=self.clock())
            )
        elif msg.msg_type == MSG_VERIFY_REQ:
            state = self.sessions.get(msg.session)
            if state is None:
                logger.error("verify for unknown session %d dropped", msg.session)
                return
            if not self._modes_consistent(state, msg.payload):
                logger.error(
                    "session %d sent a chunk compressed under a different mode "
                    "than its handshake negotiated; dropped", msg.session,
                )
                return
            self.pool.enqueue_verify(
                VerifyEntry(session=msg.session, request=msg.payload, arrival=self.clock())
            )
        elif msg.msg_type == MSG_BYE:
            self.pool.active.discard(msg.session)
        else:
            logger.error("unroutable message type %d dropped", msg.msg_type)

    # -- serve loop ----------------------------------------------------------

    def serve_steps(self):
        """Command generator implementing the scheduling loop.

        Drive with a SimProcess for virtual time or ``run_blocking`` for
        wall time; both see identical scheduling behavior.
        """
        while not self._shutdown:
            self._drain_staged()
            iteration = schedule_next(self.pool, self.chunk_size)
            if iteration.kind is IterationKind.IDLE:
                if self._shutdown:
                    break
                yield WaitGate(self.gate)
                continue
            self.iterations += 1
            self.batch_sizes.append(len(iteration.members))
            started = self.clock()
            if iteration.kind is IterationKind.VERIFY:
                for entry in iteration.members:
                    self.verify_waits.append(started - entry.arrival)
                for size in iteration.chunks:
                    self.chunk_fills.append(size / self.chunk_size)
            yield Delay(self.cost_model.iteration_cost(iteration.total_tokens))
            if iteration.kind is IterationKind.PREFILL:
                self._execute_prefill(iteration)
            else:
                self._execute_verify(iteration)

    def _execute_prefill(self, iteration: ScheduleIteration) -> None:
        for entry in iteration.members:
            state = self.sessions[entry.session]
            if state.cache.cached_len:
                logger.warning("duplicate prefill for session %d ignored", entry.session)
                continue
            state.cache.extend(entry.prompt)
            self.prefills_served += 1

    def _execute_verify(self, iteration: ScheduleIteration) -> None:
        now = self.clock()
        for entry in iteration.members:
            state = self.sessions[entry.session]
            request = entry.request
            try:
                validate_request(request)
            except EmptyChunk:
                logger.error("empty chunk from session %d dropped", entry.session)
                continue
            except PositionMismatch:
                self._resync(state)
                continue
            try:
                dists = execute_partial_prefill(request, state.cache, self.engine)
            except CacheDesync:
                self._resync(state)
                continue
            try:
                result = verify_and_respond(
                    request,
                    dists,
                    state.cache,
                    rngs.substream(state.hello.seed, rngs.VERIFY, request.pending.start_pos),
                )
            except TandemError as exc:
                # one malformed request must not take the loop down with it
                logger.error("verification for session %d failed: %s", entry.session, exc)
                continue
            self.verifies_served += 1
            self.verify_latencies.append(now - entry.arrival)
            state.reply(MSG_VERIFY_RESP, entry.session, result)

    @staticmethod
    def _modes_consistent(state: SessionState, request: VerificationRequest) -> bool:
        """Compressed chunks must match the sampling mode the handshake
        negotiated, otherwise a drafted token may be missing from its own
        transmitted entries."""
        for tok in request.pending.tokens:
            if isinstance(tok.dist, CompressedDistribution):
                return tok.dist.mode == state.hello.sampling
        return True

    def _resync(self, state: SessionState) -> None:
        self.resyncs_sent += 1
        state.reply(MSG_RESYNC_RESP, state.session, ResyncPayload(cached_len=state.cache.cached_len))

    # -- introspection ---------------------------------------------------------

    def status(self) -> dict:
        lat = sorted(self.verify_latencies)

        def pct(q: float) -> float:
            if not lat:
                return 0.0
            return lat[min(len(lat) - 1, int(q * len(lat)))]

        return {
            "iterations": self.iterations,
            "prefills_served": self.prefills_served,
            "verifies_served": self.verifies_served,
            "resyncs_sent": self.resyncs_sent,
            "mean_batch_size": float(np.mean(self.batch_sizes)) if self.batch_sizes else 0.0,
            "mean_chunk_fill": float(np.mean(self.chunk_fills)) if self.chunk_fills else 0.0,
            "p50_verify_latency": pct(0.50),
            "p99_verify_latency": pct(0.99),
            "max_verify_wait": max(self.verify_waits) if self.verify_waits else 0.0,
        }


class CloudServer:
    """Socket front end for a CloudRuntime.

    One accept thread; one reader thread per connection funneling frames
    into ``runtime.ingest``; one serve thread driving the scheduling
    loop in wall time. Replies are written back on the connection the
    session arrived on.
    """

    def __init__(self, runtime: CloudRuntime, host: str = "127.0.0.1", port: int = 0):
        self.runtime = runtime
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._threads: list[threading.Thread] = []
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._stopping = False

    def start(self) -> None:
        accept = threading.Thread(target=self._accept_loop, daemon=True, name="cloud-accept")
        serve = threading.Thread(target=self._serve_loop, daemon=True, name="cloud-serve")
        accept.start()
        serve.start()
        self._threads.extend([accept, serve])

    def _serve_loop(self) -> None:
        run_blocking(self.runtime.serve_steps())

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._conns.append(conn)
            reader = threading.Thread(
                target=self._conn_loop, args=(conn,), daemon=True, name="cloud-conn"
            )
            reader.start()
            self._threads.append(reader)

    def _conn_loop(self, conn: socket.socket) -> None:
        write_lock = threading.Lock()
        seq_counter = {"next": 0}

        def reply(msg_type: int, session: int, payload) -> None:
            with write_lock:
                msg = WireMessage(msg_type=msg_type, session=session, seq=seq_counter["next"], payload=payload)
                seq_counter["next"] += 1
                try:
                    write_frame(conn, msg)
                except OSError:
                    logger.warning("reply to session %d failed; connection gone", session)

        try:
            while True:
                msg = read_frame(conn)
                if msg is None:
                    return
                self.runtime.ingest(msg, reply)
        except Exception as exc:  # per-connection isolation; the server survives
            if not self._stopping:
                logger.warning("connection loop ended: %s", exc)
        finally:
            conn.close()

    def stop(self) -> None:
        self._stopping = True
        self.runtime.stop()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._conns:
                try:
                    conn.close()
                except OSError:
                    pass
        for t in self._threads:
            t.join(timeout=2.0)
