"""Shared domain types for device-cloud tandem token serving.

Everything in this module is an immutable value object. Constructors
validate local invariants and raise a subclass of ``TandemError`` on
violation. Cross-object invariants (request position bookkeeping) are
checked by :func:`validate_request`, which the cloud runtime calls on
every inbound request, since wire-decoded objects cannot be trusted by
construction.

Positions are absolute 0-based sequence indices counted from the start
of the prompt, on both the device and the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, TYPE_CHECKING, Union

import numpy as np

if TYPE_CHECKING:
    from .specdec import CompressedDistribution

TokenId = int

#: Tolerance for a probability vector summing to one.
DIST_SUM_TOL = 1e-9

#: Tolerance for stored chunk aggregates matching their recomputation.
AGG_TOL = 1e-12


class TandemError(Exception):
    """Base class for every domain error raised by this package."""


class InvalidDistribution(TandemError):
    pass


class InvalidConfig(TandemError):
    pass


class PositionMismatch(TandemError):
    """cached_len + len(uncached_accepted) does not equal pending.start_pos."""


class EmptyChunk(TandemError):
    """A draft chunk must carry at least one token."""


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """A probability vector over a vocabulary of ``V`` token ids.

    The backing array is float64, read-only, and must sum to one within
    ``DIST_SUM_TOL`` with every entry non-negative.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidDistribution("probs must be a non-empty 1-D vector")
        if np.any(arr < 0.0):
            raise InvalidDistribution("probs must be non-negative")
        total = float(arr.sum())
        if abs(total - 1.0) > DIST_SUM_TOL:
            raise InvalidDistribution(f"probs sum to {total!r}, expected 1")
        arr = arr.copy() if arr is self.probs and arr.flags.writeable else arr
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[0])

    def argmax(self) -> TokenId:
        """Index of the highest-probability token; ties break to the lowest id."""
        return int(np.argmax(self.probs))

    def top1(self) -> float:
        return float(self.probs[self.argmax()])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:  # frozen dataclass without field hashing
        return hash((self.vocab_size, self.probs.tobytes()))

    @staticmethod
    def uniform(vocab_size: int) -> "TokenDistribution":
        return TokenDistribution(np.full(vocab_size, 1.0 / vocab_size))

    @staticmethod
    def one_hot(vocab_size: int, token: TokenId) -> "TokenDistribution":
        probs = np.zeros(vocab_size)
        probs[token] = 1.0
        return TokenDistribution(probs)


@dataclass(frozen=True)
class DraftToken:
    """One drafted token with its decision signals.

    ``confidence`` is the top-1 probability of the drafting distribution
    (not the probability of the drafted token, which may differ under
    top-k/top-p sampling). ``dist`` is either the full distribution or
    its compressed form, depending on what goes over the wire.
    """

    token: TokenId
    confidence: float
    importance: float
    dist: Union[TokenDistribution, "CompressedDistribution"]

    def __post_init__(self) -> None:
        if self.token < 0:
            raise InvalidConfig("token id must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidConfig(f"confidence {self.confidence!r} outside [0, 1]")
        if self.importance < 0.0:
            raise InvalidConfig("importance must be non-negative")
        if isinstance(self.dist, TokenDistribution):
            if abs(self.confidence - self.dist.top1()) > AGG_TOL:
                raise InvalidConfig(
                    "confidence must equal the distribution's top-1 probability"
                )


@dataclass(frozen=True)
class DraftChunk:
    """A run of consecutive drafted tokens, the unit of offloading.

    The aggregate scores are stored rather than recomputed on read so a
    wire message is self-contained; the constructor cross-checks them
    against the per-token values to ``AGG_TOL``.
    """

    session: int
    start_pos: int
    tokens: tuple[DraftToken, ...]
    chunk_confidence: float
    chunk_importance: float

    def __post_init__(self) -> None:
        if len(self.tokens) == 0:
            raise EmptyChunk("a draft chunk must contain at least one token")
        if self.start_pos < 0:
            raise InvalidConfig("start_pos must be non-negative")
        conf = float(np.mean([t.confidence for t in self.tokens]))
        imp = float(np.mean([t.importance for t in self.tokens]))
        if abs(conf - self.chunk_confidence) > AGG_TOL:
            raise InvalidConfig("chunk_confidence does not match token mean")
        if abs(imp - self.chunk_importance) > AGG_TOL:
            raise InvalidConfig("chunk_importance does not match token mean")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def token_ids(self) -> tuple[TokenId, ...]:
        return tuple(t.token for t in self.tokens)

    @classmethod
    def from_tokens(
        cls, session: int, start_pos: int, tokens: Sequence[DraftToken]
    ) -> "DraftChunk":
        tokens = tuple(tokens)
        if not tokens:
            raise EmptyChunk("a draft chunk must contain at least one token")
        return cls(
            session=session,
            start_pos=start_pos,
            tokens=tokens,
            chunk_confidence=float(np.mean([t.confidence for t in tokens])),
            chunk_importance=float(np.mean([t.importance for t in tokens])),
        )


@dataclass(frozen=True)
class VerificationRequest:
    """What the device sends when it offloads a chunk.

    ``cached_len`` counts tokens the cloud already holds in its KV cache
    for this session; ``uncached_accepted`` are device-committed tokens
    the cloud has not seen; ``pending`` is the chunk awaiting a verdict.
    """

    session: int
    cached_len: int
    uncached_accepted: tuple[TokenId, ...]
    pending: DraftChunk

    def total_new_tokens(self) -> int:
        """Tokens this request pushes through a forward pass."""
        return len(self.uncached_accepted) + len(self.pending)


def validate_request(req: VerificationRequest) -> None:
    """Check the cross-field invariants of a verification request.

    Raises ``PositionMismatch`` when the position bookkeeping is broken
    and ``EmptyChunk`` when the pending chunk is empty. Returns None on
    success.
    """
    if len(req.pending.tokens) == 0:
        raise EmptyChunk("pending chunk is empty")
    expected = req.cached_len + len(req.uncached_accepted)
    if expected != req.pending.start_pos:
        raise PositionMismatch(
            f"cached_len {req.cached_len} + uncached {len(req.uncached_accepted)} "
            f"= {expected}, but pending.start_pos is {req.pending.start_pos}"
        )


@dataclass(frozen=True)
class VerificationResult:
    """The cloud's verdict on a pending chunk.

    ``accepted_count`` is the length of the accepted prefix. ``correction``
    carries the replacement token for the first rejected position, or,
    when the whole chunk was accepted, the bonus token the verifier emits
    for the next position (flagged with ``bonus=True``).
    """

    session: int
    accepted_count: int
    correction: Optional[TokenId] = None
    bonus: bool = False
    target_dists: Optional[tuple[TokenDistribution, ...]] = None

    def __post_init__(self) -> None:
        if self.accepted_count < 0:
            raise InvalidConfig("accepted_count must be non-negative")
        if self.bonus and self.correction is None:
            raise InvalidConfig("a bonus verdict must carry the bonus token")


@dataclass(frozen=True)
class SamplingMode:
    """How tokens are drawn from a distribution: top-1, top-k, or top-p."""

    kind: str
    k: int = 0
    p: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("top1", "topk", "topp"):
            raise InvalidConfig(f"unknown sampling kind {self.kind!r}")
        if self.kind == "topk" and self.k < 1:
            raise InvalidConfig("top-k sampling needs k >= 1")
        if self.kind == "topp" and not 0.0 < self.p <= 1.0:
            raise InvalidConfig("top-p sampling needs p in (0, 1]")

    @staticmethod
    def top1() -> "SamplingMode":
        return SamplingMode("top1")

    @staticmethod
    def topk(k: int) -> "SamplingMode":
        return SamplingMode("topk", k=k)

    @staticmethod
    def topp(p: float) -> "SamplingMode":
        return SamplingMode("topp", p=p)


@dataclass(frozen=True)
class SessionConfig:
    """Per-session generation knobs shared by device and cloud.

    ``gamma`` is the draft length, ``delta`` the parallel-inference
    lookahead, ``budget`` the offloading budget in [0, 1], and
    ``seq_exit_fraction`` the point (as a fraction of ``max_len``) past
    which offloading is disabled for the rest of the sequence.
    """

    max_len: int
    gamma: int = 4
    budget: float = 0.2
    sampling: SamplingMode = field(default_factory=SamplingMode.top1)
    delta: int = 4
    seq_exit_fraction: float = 0.8
    seed: int = 0
    eos_token: Optional[TokenId] = None

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise InvalidConfig("gamma must be >= 1")
        if self.max_len < 1:
            raise InvalidConfig("max_len must be >= 1")
        if not 0.0 <= self.budget <= 1.0:
            raise InvalidConfig("budget must lie in [0, 1]")
        if not 0.0 < self.seq_exit_fraction <= 1.0:
            raise InvalidConfig("seq_exit_fraction must lie in (0, 1]")
        if self.delta < 0:
            raise InvalidConfig("delta must be >= 0")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
