"""Draft-and-verify kernel and the distribution compression codec.

The verifier walks a drafted chunk left to right, accepting token x at
each position with probability min(1, q(x)/p(x)) where p is the draft
distribution the token was sampled from and q the target distribution
for the same position. On the first rejection it resamples a correction
from the residual normalize(max(0, q - p)); if every position is
accepted it emits one bonus token from the target distribution at the
next position. That residual rule is what makes the composition of
drafting and verification distribute exactly like sampling from the
target model alone.

Compression truncates a distribution to the entries the session's
sampling mode can actually emit, so the verifier on the other side of
the wire still sees the exact probability of every drafted token.
``sample`` and ``compress`` share one truncation helper, which is what
guarantees a sampled token is always inside the transmitted entries.

RNG discipline: every function takes an explicit ``numpy`` generator and
draws in a fixed order (one uniform per acceptance test, then one draw
for the residual or bonus sample). Callers own the generator state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    DraftChunk,
    DraftToken,
    SamplingMode,
    TandemError,
    TokenDistribution,
    TokenId,
    VerificationResult,
)


class KExceedsVocab(TandemError):
    pass


class LengthMismatch(TandemError):
    pass


class DraftTokenNotInEntries(TandemError):
    """The drafted token is outside the compressed entries, which means the
    sampler and the codec were configured with different modes."""


@dataclass(frozen=True)
class CompressedDistribution:
    """The transmitted slice of a distribution under a sampling mode.

    ``entries`` are (token, probability) pairs sorted by descending
    probability (ties by ascending token id), carrying the raw
    probabilities from the full distribution; ``residual_mass`` is
    whatever probability was left behind.
    """

    mode: SamplingMode
    entries: tuple[tuple[TokenId, float], ...]
    residual_mass: float

    def __post_init__(self) -> None:
        probs = [p for _, p in self.entries]
        if any(probs[i] < probs[i + 1] for i in range(len(probs) - 1)):
            raise ValueError("entries must be sorted by descending probability")
        if not -1e-9 <= self.residual_mass <= 1.0 + 1e-9:
            raise ValueError(f"residual_mass {self.residual_mass!r} outside [0, 1]")

    def entry_prob(self, token: TokenId) -> Optional[float]:
        for tok, prob in self.entries:
            if tok == token:
                return prob
        return None

    def sparse_probs(self, vocab_size: int) -> np.ndarray:
        """The transmitted entries as a dense vector, zero elsewhere."""
        out = np.zeros(vocab_size)
        for tok, prob in self.entries:
            out[tok] = prob
        return out

    def payload_entries(self) -> int:
        return len(self.entries)


def _truncated_support(
    dist: TokenDistribution, mode: SamplingMode
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and raw probabilities the mode can emit, sorted by
    descending probability with ties broken toward lower token ids.
    Zero-probability tokens never appear."""
    probs = dist.probs
    order = np.lexsort((np.arange(probs.shape[0]), -probs))
    sorted_probs = probs[order]
    positive = sorted_probs > 0.0
    order, sorted_probs = order[positive], sorted_probs[positive]
    if mode.kind == "top1":
        return order[:1], sorted_probs[:1]
    if mode.kind == "topk":
        return order[: mode.k], sorted_probs[: mode.k]
    # top-p: minimal prefix reaching the mass, or everything if the mass
    # is never reached (a sum slightly below 1.0 counts as exhausted).
    cum = np.cumsum(sorted_probs)
    cut = int(np.searchsorted(cum, mode.p - 1e-12)) + 1
    cut = min(cut, len(order))
    return order[:cut], sorted_probs[:cut]


def compress(dist: TokenDistribution, mode: SamplingMode) -> CompressedDistribution:
    """Truncate a distribution to what the sampling mode can emit."""
    if mode.kind == "topk" and mode.k > dist.vocab_size:
        raise KExceedsVocab(f"k={mode.k} exceeds vocabulary of {dist.vocab_size}")
    ids, probs = _truncated_support(dist, mode)
    entries = tuple((int(t), float(p)) for t, p in zip(ids, probs))
    return CompressedDistribution(
        mode=mode,
        entries=entries,
        residual_mass=1.0 - float(probs.sum()),
    )


def sample(dist: TokenDistribution, mode: SamplingMode, rng: np.random.Generator) -> TokenId:
    """Draw a token under the sampling mode.

    top-1 returns the argmax (ties to the lowest id) without consuming
    randomness; top-k and top-p renormalize the truncated support and
    draw one uniform.
    """
    if mode.kind == "top1":
        return dist.argmax()
    ids, probs = _truncated_support(dist, mode)
    return int(ids[_draw_index(probs, rng)])


def _draw_index(weights: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over non-negative weights (renormalized)."""
    cum = np.cumsum(weights)
    total = cum[-1]
    u = rng.random() * total
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, len(weights) - 1)


def residual_distribution(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """normalize(max(0, q - p)); falls back to q when the residual is empty."""
    res = np.maximum(q - p, 0.0)
    total = res.sum()
    if total <= 0.0:
        return q / q.sum()
    return res / total


def verify_chunk(
    pending: DraftChunk,
    target_dists: Sequence[TokenDistribution],
    rng: np.random.Generator,
) -> VerificationResult:
    """Verify a chunk whose tokens carry full draft distributions.

    ``target_dists`` must hold one distribution per pending token plus,
    optionally, one more for the bonus position; the bonus token is only
    emitted when that extra distribution is present and every pending
    token was accepted. A drafted token with zero draft probability is
    treated as an automatic rejection rather than an error, so degenerate
    inputs cannot wedge the pipeline.
    """
    m = len(pending.tokens)
    if not m <= len(target_dists) <= m + 1:
        raise LengthMismatch(
            f"{m} pending tokens but {len(target_dists)} target distributions"
        )
    for i, draft in enumerate(pending.tokens):
        if not isinstance(draft.dist, TokenDistribution):
            raise TypeError("verify_chunk needs full draft distributions")
        p = draft.dist.probs
        q = target_dists[i].probs
        token = draft.token
        p_tok = float(p[token])
        q_tok = float(q[token])
        if p_tok <= 0.0:
            accept = False  # auto-reject: the draft claims it could not emit this
            rng.random()  # keep the draw order aligned with the accept path
        else:
            accept = rng.random() < min(1.0, q_tok / p_tok)
        if not accept:
            correction = _draw_from(residual_distribution(q, p), rng)
            return VerificationResult(
                session=pending.session, accepted_count=i, correction=correction
            )
    if len(target_dists) == m + 1:
        bonus = _draw_from(target_dists[m].probs / target_dists[m].probs.sum(), rng)
        return VerificationResult(
            session=pending.session, accepted_count=m, correction=bonus, bonus=True
        )
    return VerificationResult(session=pending.session, accepted_count=m)


def verify_with_compressed(
    pending: DraftChunk,
    target_dists: Sequence[TokenDistribution],
    rng: np.random.Generator,
) -> VerificationResult:
    """Verify a chunk whose tokens carry compressed draft distributions.

    Acceptance uses the raw transmitted probability of each drafted
    token, so the acceptance ratios (and therefore the distribution of
    ``accepted_count``) are identical to full-distribution verification.
    The rejection residual is computed against the sparse reconstruction
    of the draft distribution, the best view of it this side of the wire.
    """
    m = len(pending.tokens)
    if not m <= len(target_dists) <= m + 1:
        raise LengthMismatch(
            f"{m} pending tokens but {len(target_dists)} target distributions"
        )
    for i, draft in enumerate(pending.tokens):
        comp = draft.dist
        if not isinstance(comp, CompressedDistribution):
            raise TypeError("verify_with_compressed needs compressed distributions")
        q = target_dists[i].probs
        token = draft.token
        p_tok = comp.entry_prob(token)
        if p_tok is None:
            raise DraftTokenNotInEntries(
                f"token {token} at position {i} missing from compressed entries"
            )
        q_tok = float(q[token])
        if p_tok <= 0.0:
            accept = False
            rng.random()
        else:
            accept = rng.random() < min(1.0, q_tok / p_tok)
        if not accept:
            sparse = comp.sparse_probs(len(q))
            correction = _draw_from(residual_distribution(q, sparse), rng)
            return VerificationResult(
                session=pending.session, accepted_count=i, correction=correction
            )
    if len(target_dists) == m + 1:
        bonus = _draw_from(target_dists[m].probs / target_dists[m].probs.sum(), rng)
        return VerificationResult(
            session=pending.session, accepted_count=m, correction=bonus, bonus=True
        )
    return VerificationResult(session=pending.session, accepted_count=m)


def _draw_from(probs: np.ndarray, rng: np.random.Generator) -> TokenId:
    return int(_nonzero_ids(probs)[_draw_index(_nonzero_probs(probs), rng)])


def _nonzero_ids(probs: np.ndarray) -> np.ndarray:
    return np.nonzero(probs > 0.0)[0]


def _nonzero_probs(probs: np.ndarray) -> np.ndarray:
    return probs[probs > 0.0]


def speculative_generate(
    draft_model,
    target_model,
    prompt: Sequence[TokenId],
    gamma: int,
    length: int,
    rng: np.random.Generator,
    mode: Optional[SamplingMode] = None,
) -> list[TokenId]:
    """Reference draft-and-verify loop without any transport in the way.

    Repeatedly drafts ``gamma`` tokens, verifies them against the target
    model with full distributions, and commits the accepted prefix plus
    the correction or bonus token. The committed sequence is distributed
    exactly like ``length`` tokens sampled autoregressively from the
    target model.
    """
    mode = mode or SamplingMode.topp(1.0)
    committed = list(prompt)
    generated: list[TokenId] = []
    while len(generated) < length:
        tokens = []
        ctx = list(committed)
        for _ in range(gamma):
            dist = draft_model.distribution(ctx)
            tok = sample(dist, mode, rng)
            tokens.append(DraftToken(token=tok, confidence=dist.top1(), importance=0.0, dist=dist))
            ctx.append(tok)
        chunk = DraftChunk.from_tokens(0, len(committed), tokens)
        targets = [
            target_model.distribution(committed + [t.token for t in tokens[:j]])
            for j in range(gamma + 1)
        ]
        result = verify_chunk(chunk, targets, rng)
        new = list(chunk.token_ids[: result.accepted_count])
        if result.correction is not None:
            new.append(result.correction)
        committed.extend(new)
        generated.extend(new)
    return generated[:length]
