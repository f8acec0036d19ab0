"""Device-side generation loop.

One session drafts tokens chunk by chunk with the local model, decides
per chunk whether to offload for verification, and keeps exactly one
request in flight. While a verification is in flight the device does
not idle: it predicts where the verifier will reject the chunk, swaps
in an alternative token at that position, and speculatively continues
drafting from the repaired prefix for up to ``delta`` tokens. When the
verdict lands the branch is adopted only if the verifier rejected at
the predicted position and corrected to the very token the branch
chose; otherwise the branch is discarded and generation resumes from
the verifier's corrected prefix.

Every stochastic choice (drafting, offload gating, rejection
prediction, alternative sampling) draws from a stream keyed by the
session seed and the absolute position it concerns, so a token drafted
speculatively during a stall is the same token the device would draft
after the merge, and reruns over a different carrier reproduce the same
sequence.

The loop is written as a command generator (see ``sim``): it can be
driven in virtual time against a simulated link or on a thread against
a socket, and all timestamps come from the injected clock either way.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngs
from .core import (
    DraftChunk,
    DraftToken,
    SamplingMode,
    SessionConfig,
    TandemError,
    TokenDistribution,
    TokenId,
    VerificationRequest,
    VerificationResult,
)
from .models import ImportanceProvider, LayeredBackend, LayerSignal
from .policy import OffloadDecision, OffloadPolicyState, decide_offload, layer_exit, p_conf, p_imp, seq_exit
from .sim import Delay, WaitGate
from .specdec import compress, sample
from .transport import (
    ChannelClosed,
    Hello,
    MSG_BYE,
    MSG_HELLO,
    MSG_PREFILL_REQ,
    MSG_RESYNC_RESP,
    MSG_VERIFY_REQ,
    MSG_VERIFY_RESP,
    PrefillPayload,
)

logger = logging.getLogger(__name__)

SOURCE_LOCAL = "local"
SOURCE_CLOUD_ACCEPTED = "cloud-accepted"
SOURCE_CLOUD_CORRECTED = "cloud-corrected"
SOURCE_PI_ADOPTED = "pi-adopted"


class DegenerateDistribution(TandemError):
    """Every adjusted rejection mass is zero (all confidences are 1)."""


class SessionMismatch(TandemError):
    pass


@dataclass(frozen=True)
class RejectionPrediction:
    """A sampled rejection position and the distribution it came from."""

    r_star: int
    distribution: np.ndarray

    def __post_init__(self) -> None:
        total = float(self.distribution.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"prediction distribution sums to {total!r}")


def rejection_distribution(chunk: DraftChunk, alpha: float) -> np.ndarray:
    """Confidence-adjusted capped-geometric law over rejection positions.

    The base mass at position t is (1 - alpha) * alpha**t, except the
    final position which takes the capped tail alpha**m for a chunk of
    m tokens. Each mass is then scaled by (1 - confidence) of its token
    and the whole vector renormalized. Raises DegenerateDistribution
    when every token has confidence 1 and nothing is left to normalize.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    m = len(chunk.tokens)
    base = np.array(
        [(1.0 - alpha) * alpha**t if t < m - 1 else alpha**m for t in range(m)]
    )
    adjusted = base * np.array([1.0 - tok.confidence for tok in chunk.tokens])
    total = adjusted.sum()
    if total <= 0.0:
        raise DegenerateDistribution("all draft confidences are 1; nothing to predict")
    return adjusted / total


def predict_rejection(
    chunk: DraftChunk, alpha: float, rng: np.random.Generator
) -> RejectionPrediction:
    """Sample a likely rejection position for a chunk in flight."""
    dist = rejection_distribution(chunk, alpha)
    r_star = int(np.searchsorted(np.cumsum(dist), rng.random(), side="right"))
    return RejectionPrediction(r_star=min(r_star, len(dist) - 1), distribution=dist)


def sample_alternative(
    dist: TokenDistribution, drafted: TokenId, rng: np.random.Generator
) -> Optional[TokenId]:
    """Pick a replacement token from the top-3 candidates, excluding the
    one that was drafted. Returns None when no alternative has mass."""
    top = min(3, dist.vocab_size)
    candidates = [
        (t, p) for t, p in compress(dist, SamplingMode.topk(top)).entries if t != drafted
    ]
    if not candidates:
        return None
    probs = np.array([p for _, p in candidates])
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    idx = min(int(np.searchsorted(cum, u, side="right")), len(candidates) - 1)
    return candidates[idx][0]


@dataclass
class DeviceCostModel:
    """Drafting compute cost, scaled by how deep the forward pass ran."""

    draft_seconds_per_token: float = 0.02

    def token_cost(self, exit_layer: int, layer_count: int) -> float:
        return self.draft_seconds_per_token * (exit_layer + 1) / layer_count


@dataclass
class VariantFlags:
    """Ablation switches mirroring the runtime's optional mechanisms."""

    pi_on: bool = True
    early_exit_on: bool = True
    compression_on: bool = True
    conf_only: bool = False
    imp_only: bool = False
    force_offload: bool = False


@dataclass
class SpeculativeBranch:
    prediction: RejectionPrediction
    alternative: TokenId
    continuation: list[TokenId] = field(default_factory=list)
    busy_seconds: float = 0.0


@dataclass
class OffloadRecord:
    """Timing of one offload, for stall accounting."""

    start_pos: int
    send_ts: float
    resp_ts: float = 0.0
    pi_busy: float = 0.0
    adopted: int = 0
    hit: bool = False
    accepted: int = 0
    chunk_len: int = 0


@dataclass
class DeviceSession:
    """All mutable state of one generation session."""

    session_id: int
    config: SessionConfig
    policy: OffloadPolicyState
    prompt: list[TokenId]
    draft_model: LayeredBackend
    importance: ImportanceProvider
    cost_model: DeviceCostModel = field(default_factory=DeviceCostModel)
    flags: VariantFlags = field(default_factory=VariantFlags)
    alpha: float = 0.5
    on_merge: Optional[Callable[["DeviceSession"], None]] = None

    committed: list[TokenId] = field(init=False)
    sources: list[str] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)
    cloud_cached_len: int = 0
    pending_request: Optional[VerificationRequest] = None
    speculative_branch: Optional[SpeculativeBranch] = None
    offline: bool = False
    eos_seen: bool = False

    offload_chunks: int = 0
    retained_chunks: int = 0
    drafted_offloaded: int = 0
    accepted_tokens: int = 0
    predictions: int = 0
    hits: int = 0
    misses: int = 0
    resyncs: int = 0
    drafted_tokens: int = 0
    layers_computed: int = 0
    offload_records: list[OffloadRecord] = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float = 0.0

    def __post_init__(self) -> None:
        self.committed = list(self.prompt)

    @property
    def generated_count(self) -> int:
        return len(self.committed) - len(self.prompt)

    @property
    def generated(self) -> list[TokenId]:
        return self.committed[len(self.prompt):]

    def output(self) -> list[TokenId]:
        """Generated tokens up to the first EOS or the length cap."""
        out = self.generated[: self.config.max_len]
        eos = self.config.eos_token
        if eos is not None and eos in out:
            out = out[: out.index(eos) + 1]
        return out

    def summary(self) -> dict:
        total_chunks = self.offload_chunks + self.retained_chunks
        n = len(self.output())
        wall = self.finished_at - self.started_at
        return {
            "session": self.session_id,
            "generated": n,
            "wall_time": wall,
            "mean_tbt": wall / n if n else 0.0,
            "offload_chunks": self.offload_chunks,
            "retained_chunks": self.retained_chunks,
            "offload_chunk_fraction": self.offload_chunks / total_chunks if total_chunks else 0.0,
            "acceptance_rate": (
                self.accepted_tokens / self.drafted_offloaded if self.drafted_offloaded else 0.0
            ),
            "predictions": self.predictions,
            "prediction_hits": self.hits,
            "prediction_misses": self.misses,
            "prediction_hit_rate": self.hits / self.predictions if self.predictions else 0.0,
            "fallback": self.offline,
            "resyncs": self.resyncs,
            "mean_layers_per_token": (
                self.layers_computed / self.drafted_tokens if self.drafted_tokens else 0.0
            ),
            "source_counts": {
                s: self.sources.count(s)
                for s in (SOURCE_LOCAL, SOURCE_CLOUD_ACCEPTED, SOURCE_CLOUD_CORRECTED, SOURCE_PI_ADOPTED)
            },
        }


def merge(
    session: DeviceSession, result: VerificationResult, now: float
) -> int:
    """Fold a verdict into the committed sequence.

    Returns the number of tokens committed. Extends by the accepted
    prefix plus the correction (or bonus) token; when the verdict lands
    on the predicted rejection position and corrects to the branch's
    alternative token, the speculative continuation is adopted as well.
    The committed prefix is append-only and the cloud's view advances to
    cover everything it verified or was told about.
    """
    req = session.pending_request
    if req is None or result.session != session.session_id:
        raise SessionMismatch("verdict does not match the in-flight request")
    chunk = req.pending
    a = result.accepted_count
    new_tokens: list[TokenId] = list(chunk.token_ids[:a])
    new_sources = [SOURCE_CLOUD_ACCEPTED] * a
    if result.correction is not None:
        new_tokens.append(result.correction)
        new_sources.append(SOURCE_CLOUD_CORRECTED)
    branch = session.speculative_branch
    adopted = 0
    hit = False
    if branch is not None:
        if (
            a < len(chunk)
            and a == branch.prediction.r_star
            and result.correction == branch.alternative
        ):
            hit = True
            adopted = len(branch.continuation)
            new_tokens.extend(branch.continuation)
            new_sources.extend([SOURCE_PI_ADOPTED] * adopted)
            session.hits += 1
        else:
            session.misses += 1
    session.accepted_tokens += a
    session.drafted_offloaded += len(chunk)
    session.cloud_cached_len = req.cached_len + len(req.uncached_accepted) + a + (
        1 if result.correction is not None else 0
    )
    _commit(session, new_tokens, new_sources, now)
    record = session.offload_records[-1]
    record.resp_ts = now
    record.adopted = adopted
    record.hit = hit
    record.accepted = a
    record.chunk_len = len(chunk)
    session.pending_request = None
    session.speculative_branch = None
    if session.on_merge is not None:
        session.on_merge(session)
    return len(new_tokens)


def _commit(session: DeviceSession, tokens: Sequence[TokenId], sources: Sequence[str], now: float) -> None:
    session.committed.extend(tokens)
    session.sources.extend(sources)
    session.timestamps.extend([now] * len(tokens))
    eos = session.config.eos_token
    if eos is not None and eos in tokens:
        session.eos_seen = True


def device_steps(session: DeviceSession, endpoint, clock: Callable[[], float]):
    """Command generator running one session to completion.

    ``endpoint`` may be None for purely local generation. Yields Delay
    for drafting compute and WaitGate while blocked on a verdict;
    returns the session (with all metrics filled in) when done.
    """
    cfg = session.config
    session.started_at = clock()
    connected = endpoint is not None and _connect(session, endpoint)

    while session.generated_count < cfg.max_len and not session.eos_seen:
        chunk_start = len(session.committed)
        tokens: list[DraftToken] = []
        ctx = list(session.committed)
        for _ in range(cfg.gamma):
            tok, cost = _draft_one(session, ctx)
            yield Delay(cost)
            tokens.append(tok)
            ctx.append(tok.token)
            if cfg.eos_token is not None and tok.token == cfg.eos_token:
                break
        chunk = DraftChunk.from_tokens(session.session_id, chunk_start, tokens)

        if connected and not session.offline and _wants_offload(session, chunk):
            connected = yield from _offload_chunk(session, endpoint, chunk, clock)
        else:
            session.retained_chunks += 1
            _commit(session, chunk.token_ids, [SOURCE_LOCAL] * len(chunk), clock())

    session.finished_at = clock()
    if connected and not session.offline:
        try:
            endpoint.send(MSG_BYE, session.session_id, None)
        except ChannelClosed:
            pass
    return session


def _connect(session: DeviceSession, endpoint) -> bool:
    """Handshake and prompt prefill. Skipped entirely when the policy can
    never offload, so a budget of zero costs the cloud nothing."""
    if math.isinf(session.policy.i_th) and not session.flags.force_offload:
        return False
    try:
        endpoint.send(
            MSG_HELLO,
            session.session_id,
            Hello(
                vocab_size=session.draft_model.vocab_size,
                gamma=session.config.gamma,
                sampling=session.config.sampling,
                seed=session.config.seed,
                compression_on=session.flags.compression_on,
            ),
        )
        endpoint.send(
            MSG_PREFILL_REQ, session.session_id, PrefillPayload(prompt=tuple(session.prompt))
        )
        session.cloud_cached_len = len(session.prompt)
        return True
    except ChannelClosed:
        session.offline = True
        return False


def _draft_one(session: DeviceSession, ctx: list[TokenId]) -> tuple[DraftToken, float]:
    pos = len(ctx)
    model = session.draft_model
    if session.flags.early_exit_on and model.layer_count > 1:
        sig = layer_exit(model.layer_signals(ctx), session.policy)
    else:
        dist = model.distribution(ctx)
        sig = LayerSignal(
            layer_index=model.layer_count - 1,
            top1=dist.top1(),
            top2=0.0,
            margin=0.0,
            provisional_dist=dist,
        )
    dist = sig.provisional_dist
    token = sample(dist, session.config.sampling, rngs.substream(session.config.seed, rngs.DRAFT, pos))
    draft = DraftToken(
        token=token,
        confidence=dist.top1(),
        importance=session.importance.score(ctx, pos, dist),
        dist=dist,
    )
    session.drafted_tokens += 1
    session.layers_computed += sig.layer_index + 1
    return draft, session.cost_model.token_cost(sig.layer_index, model.layer_count)


def _wants_offload(session: DeviceSession, chunk: DraftChunk) -> bool:
    if session.flags.force_offload:
        return True
    if seq_exit(session.generated_count, session.config):
        return False
    rng = rngs.substream(session.config.seed, rngs.OFFLOAD, chunk.start_pos)
    if session.flags.conf_only:
        u = rng.random()
        rng.random()
        return u < p_conf(chunk.chunk_confidence, session.policy)
    if session.flags.imp_only:
        rng.random()
        return rng.random() < p_imp(chunk.chunk_importance, session.policy)
    return decide_offload(chunk, session.policy, rng) is OffloadDecision.OFFLOAD


def _offload_chunk(session: DeviceSession, endpoint, chunk: DraftChunk, clock):
    """Send a chunk for verification, run parallel inference while the
    request is in flight, then merge the verdict. Yields like the main
    loop; returns False when the transport died and the session fell
    back to local generation."""
    cfg = session.config
    request = _build_request(session, chunk)
    try:
        endpoint.send(MSG_VERIFY_REQ, session.session_id, request)
    except ChannelClosed:
        return _fall_back(session, chunk, clock())
    session.offload_chunks += 1
    session.pending_request = request
    session.offload_records.append(
        OffloadRecord(start_pos=chunk.start_pos, send_ts=clock())
    )

    if session.flags.pi_on and cfg.delta >= 0:
        yield from _parallel_continue(session, endpoint, chunk, clock)

    while True:
        msg = endpoint.poll()
        if msg is None:
            if endpoint.closed:
                return _fall_back(session, chunk, clock())
            yield WaitGate(endpoint.gate)
            continue
        if msg.msg_type == MSG_VERIFY_RESP:
            merge(session, msg.payload, clock())
            return True
        if msg.msg_type == MSG_RESYNC_RESP:
            session.resyncs += 1
            session.cloud_cached_len = msg.payload.cached_len
            request = _build_request(session, chunk)
            session.pending_request = request
            try:
                endpoint.send(MSG_VERIFY_REQ, session.session_id, request)
            except ChannelClosed:
                return _fall_back(session, chunk, clock())
            continue
        logger.warning("session %d ignoring message type %d", session.session_id, msg.msg_type)


def _build_request(session: DeviceSession, chunk: DraftChunk) -> VerificationRequest:
    uncached = tuple(session.committed[session.cloud_cached_len:])
    wire_chunk = chunk
    if session.flags.compression_on:
        wire_chunk = DraftChunk(
            session=chunk.session,
            start_pos=chunk.start_pos,
            tokens=tuple(
                DraftToken(
                    token=t.token,
                    confidence=t.confidence,
                    importance=t.importance,
                    dist=compress(t.dist, session.config.sampling),
                )
                for t in chunk.tokens
            ),
            chunk_confidence=chunk.chunk_confidence,
            chunk_importance=chunk.chunk_importance,
        )
    return VerificationRequest(
        session=session.session_id,
        cached_len=session.cloud_cached_len,
        uncached_accepted=uncached,
        pending=wire_chunk,
    )


def _parallel_continue(session: DeviceSession, endpoint, chunk: DraftChunk, clock):
    """Build the speculative branch while the verdict is in flight.

    Drafting stops as soon as the response shows up (the current token
    is finished first; compute already spent is not thrown away).
    """
    cfg = session.config
    try:
        prediction = predict_rejection(
            chunk,
            session.alpha,
            rngs.substream(cfg.seed, rngs.PREDICT, chunk.start_pos),
        )
    except DegenerateDistribution:
        return
    r_star = prediction.r_star
    alt_pos = chunk.start_pos + r_star
    alternative = sample_alternative(
        chunk.tokens[r_star].dist,
        chunk.tokens[r_star].token,
        rngs.substream(cfg.seed, rngs.ALTERNATIVE, alt_pos),
    )
    if alternative is None:
        return
    session.predictions += 1
    branch = SpeculativeBranch(prediction=prediction, alternative=alternative)
    session.speculative_branch = branch
    ctx = list(session.committed) + list(chunk.token_ids[:r_star]) + [alternative]
    if cfg.eos_token is not None and alternative == cfg.eos_token:
        return
    pi_start = clock()
    for _ in range(cfg.delta):
        if endpoint.has_inbound() or endpoint.closed:
            break
        tok, cost = _draft_one(session, ctx)
        yield Delay(cost)
        branch.continuation.append(tok.token)
        ctx.append(tok.token)
        if cfg.eos_token is not None and tok.token == cfg.eos_token:
            break
    branch.busy_seconds = clock() - pi_start
    session.offload_records[-1].pi_busy = branch.busy_seconds


def _fall_back(session: DeviceSession, chunk: DraftChunk, now: float) -> bool:
    """Transport died with a chunk unresolved: keep the drafted tokens as
    local output and finish the sequence offline."""
    logger.info("session %d falling back to local generation", session.session_id)
    session.offline = True
    session.pending_request = None
    session.speculative_branch = None
    if session.offload_records and session.offload_records[-1].resp_ts == 0.0:
        session.offload_records.pop()
        session.offload_chunks -= 1
    session.retained_chunks += 1
    _commit(session, chunk.token_ids, [SOURCE_LOCAL] * len(chunk), now)
    return False


def run_session_blocking(session: DeviceSession, endpoint, clock=None, pace: bool = False) -> DeviceSession:
    """Drive a session on the current thread (socket carrier)."""
    from .sim import run_blocking

    return run_blocking(device_steps(session, endpoint, clock or time.monotonic), pace=pace)
