"""Deterministic toy language-model backends and importance signals.

A backend maps a token-id prefix to a next-token distribution. Two
concrete families exist: lookup tables keyed by the longest matching
suffix, and add-one-smoothed n-gram models counted from a corpus. Both
are deterministic and cheap, which is what the rest of the runtime needs
from a model; neither pretends to be a neural network.

``layered_wrap`` turns any backend into a multi-layer one whose early
layers emit noisy provisional distributions that settle onto the base
distribution at the final layer, giving the early-exit policy something
real to exit from.

Importance scores are pluggable because toy backends have no attention
matrix to sum over. The default surrogate scores a position by how
peaked its drafting distribution is (1 - normalized entropy); trace
providers replay scores recorded in a file so tests can inject any
distribution shape they need.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import InvalidDistribution, TandemError, TokenDistribution, TokenId


class MissingDefaultRow(TandemError):
    """A table backend needs a row for the empty suffix."""


class CorpusTooShort(TandemError):
    pass


class PositionNotInTrace(TandemError):
    pass


class LanguageModelBackend:
    """Maps a token prefix to a next-token distribution, deterministically."""

    vocab_size: int
    layer_count: int = 1

    def distribution(self, prefix: Sequence[TokenId]) -> TokenDistribution:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Table backend
# ---------------------------------------------------------------------------


class TableBackend(LanguageModelBackend):
    """Distribution table keyed by token suffixes.

    Lookup walks from the longest stored suffix length down to the empty
    suffix, so a row for ``(2,)`` shadows the default row whenever the
    prefix ends in 2. The default row (empty suffix) is mandatory.
    """

    def __init__(self, rows: Mapping[tuple[TokenId, ...], TokenDistribution]):
        if () not in rows:
            raise MissingDefaultRow("table needs a default row keyed by ()")
        sizes = {dist.vocab_size for dist in rows.values()}
        if len(sizes) != 1:
            raise InvalidDistribution("all table rows must share one vocab size")
        self.vocab_size = sizes.pop()
        self._rows = dict(rows)
        self._max_suffix = max(len(k) for k in self._rows)

    def distribution(self, prefix: Sequence[TokenId]) -> TokenDistribution:
        prefix = tuple(prefix)
        for length in range(min(self._max_suffix, len(prefix)), -1, -1):
            row = self._rows.get(prefix[len(prefix) - length:])
            if row is not None:
                return row
        return self._rows[()]


def table_lm(
    rows: Mapping[tuple[TokenId, ...], Union[TokenDistribution, Sequence[float]]]
) -> TableBackend:
    """Build a table backend, accepting raw probability sequences as rows."""
    converted = {
        tuple(k): v if isinstance(v, TokenDistribution) else TokenDistribution(np.asarray(v, dtype=np.float64))
        for k, v in rows.items()
    }
    return TableBackend(converted)


# ---------------------------------------------------------------------------
# N-gram backend
# ---------------------------------------------------------------------------


class NgramBackend(LanguageModelBackend):
    """Add-one-smoothed n-gram model over a token corpus.

    P(t | ctx) = (count(ctx, t) + 1) / (count(ctx) + V), where ctx is the
    last n-1 prefix tokens. Prefixes shorter than n-1 fall back to the
    counts of their own (shorter) context, down to the unigram
    distribution for an empty prefix. Smoothing keeps every probability
    strictly positive, which the verification residual formula relies on.
    """

    def __init__(self, corpus: Sequence[TokenId], n: int, vocab_size: int):
        if n < 1:
            raise ValueError("n-gram order must be >= 1")
        corpus = list(corpus)
        if len(corpus) < n:
            raise CorpusTooShort(f"corpus of {len(corpus)} tokens cannot fit order {n}")
        if any(t < 0 or t >= vocab_size for t in corpus):
            raise ValueError("corpus token outside vocabulary")
        self.vocab_size = vocab_size
        self.order = n
        # counts[ctx] is a (vector over next tokens, total) pair, kept for
        # every context length 0..n-1 so short prefixes have a fallback.
        self._counts: dict[tuple[TokenId, ...], np.ndarray] = {}
        for length in range(n):
            for i in range(len(corpus) - length):
                ctx = tuple(corpus[i:i + length])
                vec = self._counts.get(ctx)
                if vec is None:
                    vec = np.zeros(vocab_size, dtype=np.float64)
                    self._counts[ctx] = vec
                vec[corpus[i + length]] += 1.0
        self._cache: dict[tuple[TokenId, ...], TokenDistribution] = {}

    def distribution(self, prefix: Sequence[TokenId]) -> TokenDistribution:
        prefix = tuple(prefix)
        ctx_len = min(self.order - 1, len(prefix))
        ctx = prefix[len(prefix) - ctx_len:]
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        vec = self._counts.get(ctx)
        if vec is None:
            vec = np.zeros(self.vocab_size, dtype=np.float64)
        probs = (vec + 1.0) / (vec.sum() + self.vocab_size)
        dist = TokenDistribution(probs)
        self._cache[ctx] = dist
        return dist


def ngram_lm(corpus: Sequence[TokenId], n: int, vocab_size: int) -> NgramBackend:
    return NgramBackend(corpus, n, vocab_size)


# ---------------------------------------------------------------------------
# Layered wrapper
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSignal:
    """What one layer of a backend exposes to the early-exit policy."""

    layer_index: int
    top1: float
    top2: float
    margin: float
    provisional_dist: TokenDistribution


@dataclass(frozen=True)
class GeometricDecaySchedule:
    """Noise weight w0 * ratio**layer for all layers but the last, 0 there."""

    w0: float = 0.5
    ratio: float = 0.5

    def __call__(self, layer: int, layer_count: int) -> float:
        if layer >= layer_count - 1:
            return 0.0
        return self.w0 * self.ratio ** layer


class LayeredBackend(LanguageModelBackend):
    """Simulates per-layer provisional outputs settling onto a base model.

    Layer ``l`` (0-based) emits ``(1 - w_l) * base + w_l * noise`` with the
    noise drawn from a generator keyed on (wrapper seed, prefix digest,
    layer), so identical prefixes always see identical signals. The final
    layer's weight must be exactly zero, making its provisional
    distribution bitwise equal to the base distribution.
    """

    def __init__(
        self,
        base: LanguageModelBackend,
        layer_count: int,
        noise_schedule: Optional[Callable[[int, int], float]] = None,
        seed: int = 0,
    ):
        if layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        schedule = noise_schedule or GeometricDecaySchedule()
        if schedule(layer_count - 1, layer_count) != 0.0:
            raise ValueError("noise schedule must be exactly 0 at the final layer")
        self.base = base
        self.vocab_size = base.vocab_size
        self.layer_count = layer_count
        self._schedule = schedule
        self._seed = seed

    def distribution(self, prefix: Sequence[TokenId]) -> TokenDistribution:
        return self.base.distribution(prefix)

    def layer_signals(self, prefix: Sequence[TokenId]) -> list[LayerSignal]:
        base_dist = self.base.distribution(prefix)
        digest = zlib.crc32(np.asarray(prefix, dtype=np.uint32).tobytes())
        signals = []
        for layer in range(self.layer_count):
            weight = self._schedule(layer, self.layer_count)
            if weight == 0.0:
                dist = base_dist
            else:
                gen = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence((self._seed, digest, layer)))
                )
                noise = gen.dirichlet(np.ones(self.vocab_size))
                dist = TokenDistribution((1.0 - weight) * base_dist.probs + weight * noise)
            signals.append(_signal_from_dist(layer, dist))
        return signals


def _signal_from_dist(layer: int, dist: TokenDistribution) -> LayerSignal:
    probs = dist.probs
    if probs.shape[0] == 1:
        top1, top2 = float(probs[0]), 0.0
    else:
        idx = np.argpartition(probs, -2)[-2:]
        a, b = float(probs[idx[0]]), float(probs[idx[1]])
        top1, top2 = max(a, b), min(a, b)
    return LayerSignal(
        layer_index=layer,
        top1=top1,
        top2=top2,
        margin=top1 - top2,
        provisional_dist=dist,
    )


def layered_wrap(
    base: LanguageModelBackend,
    layer_count: int,
    noise_schedule: Optional[Callable[[int, int], float]] = None,
    seed: int = 0,
) -> LayeredBackend:
    return LayeredBackend(base, layer_count, noise_schedule, seed)


def as_layered(backend: LanguageModelBackend) -> LayeredBackend:
    """Wrap a plain backend as a single-layer one if it is not layered yet."""
    if isinstance(backend, LayeredBackend):
        return backend
    return LayeredBackend(backend, 1)


# ---------------------------------------------------------------------------
# Importance providers
# ---------------------------------------------------------------------------


def entropy_score(dist: TokenDistribution) -> float:
    """1 - H(dist)/log(V), clamped to [0, 1].

    A uniform distribution scores 0, a one-hot distribution scores 1,
    and the score is invariant under permutation of the entries.
    """
    probs = dist.probs
    if probs.shape[0] == 1:
        return 1.0
    nz = probs[probs > 0.0]
    entropy = float(-(nz * np.log(nz)).sum())
    score = 1.0 - entropy / math.log(probs.shape[0])
    return min(1.0, max(0.0, score))


class ImportanceProvider:
    """Maps (prefix, position) to a non-negative importance score."""

    def score(
        self,
        prefix: Sequence[TokenId],
        position: int,
        dist: Optional[TokenDistribution] = None,
    ) -> float:
        raise NotImplementedError


class EntropyImportance(ImportanceProvider):
    """Importance from the peakedness of the drafting distribution.

    When the caller already holds the distribution for the position (the
    device does, having just drafted from it) passing it avoids a second
    model query and keeps the score consistent with any early-exit
    provisional output.
    """

    def __init__(self, backend: LanguageModelBackend):
        self._backend = backend

    def score(
        self,
        prefix: Sequence[TokenId],
        position: int,
        dist: Optional[TokenDistribution] = None,
    ) -> float:
        if dist is None:
            if position > len(prefix):
                raise ValueError("position lies beyond the prefix")
            dist = self._backend.distribution(tuple(prefix[:position]))
        return entropy_score(dist)


class TraceImportance(ImportanceProvider):
    """Replays per-position importance scores recorded in a trace."""

    def __init__(self, trace: Mapping[int, float]):
        bad = [p for p, s in trace.items() if s < 0.0]
        if bad:
            raise ValueError(f"negative importance at positions {bad[:5]}")
        self._trace = dict(trace)

    def score(
        self,
        prefix: Sequence[TokenId],
        position: int,
        dist: Optional[TokenDistribution] = None,
    ) -> float:
        try:
            return self._trace[position]
        except KeyError:
            raise PositionNotInTrace(f"position {position} not recorded") from None


def trace_importance(trace: Mapping[int, float]) -> TraceImportance:
    return TraceImportance(trace)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------
# Table file: one row per line, "suffix_csv : prob_csv". The suffix side
#   may be empty (the default row). Blank lines and #-comments ignored.
# Corpus file: whitespace-separated token ids.
# Trace file: one "position score" pair per line.


def load_table_file(path: Union[str, Path]) -> TableBackend:
    rows: dict[tuple[TokenId, ...], TokenDistribution] = {}
    for line in _content_lines(path):
        if ":" not in line:
            raise ValueError(f"table row without ':' separator: {line!r}")
        suffix_part, prob_part = line.split(":", 1)
        suffix = tuple(int(t) for t in suffix_part.replace(",", " ").split())
        probs = np.array([float(x) for x in prob_part.replace(",", " ").split()])
        rows[suffix] = TokenDistribution(probs)
    return TableBackend(rows)


def load_corpus_file(path: Union[str, Path]) -> list[TokenId]:
    tokens: list[TokenId] = []
    for line in _content_lines(path):
        tokens.extend(int(t) for t in line.replace(",", " ").split())
    return tokens


def load_trace_file(path: Union[str, Path]) -> TraceImportance:
    trace: dict[int, float] = {}
    for line in _content_lines(path):
        pos_str, score_str = line.split()
        trace[int(pos_str)] = float(score_str)
    return TraceImportance(trace)


def _content_lines(path: Union[str, Path]) -> list[str]:
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines
