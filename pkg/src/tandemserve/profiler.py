"""Offline profiling of the offloading thresholds.

Profiling runs the draft-and-verify loop with every chunk offloaded and
records three things per chunk: its mean confidence, its mean
importance, and how many of its tokens the verifier accepted. From
those it derives

* ``c_th``: the mean confidence of the chunks that were fully accepted
  (chunks that confident do not need the cloud at runtime),
* the importance CDF, from which a budget picks its cutoff ``i_th`` as
  the (1 - budget) quantile, and
* ``alpha``, the per-token acceptance probability, recovered by
  inverting the capped-geometric expectation
  E = (1 - alpha**(gamma + 1)) / (1 - alpha) of tokens gained per
  verification round.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import DraftChunk, SessionConfig, TandemError, TokenId
from .models import ImportanceProvider, LanguageModelBackend, as_layered
from .policy import OffloadPolicyState
from .specdec import verify_chunk, sample
from .core import DraftToken
from . import rng as rngs

logger = logging.getLogger(__name__)

ALPHA_CLAMP = 1e-6
DEFAULT_CTH_FALLBACK = 0.8


class EmptyCdf(TandemError):
    pass


class EOutOfRange(TandemError):
    pass


@dataclass(frozen=True)
class ProfileResult:
    """Everything the runtime needs to turn a budget into thresholds."""

    c_th: float
    importance_cdf: tuple[float, ...]
    alpha: float
    gamma: int
    provenance: str = ""

    def __post_init__(self) -> None:
        if any(
            self.importance_cdf[i] > self.importance_cdf[i + 1]
            for i in range(len(self.importance_cdf) - 1)
        ):
            raise ValueError("importance_cdf must be sorted ascending")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")

    def to_json(self) -> str:
        return json.dumps(
            {
                "c_th": self.c_th,
                "importance_cdf": list(self.importance_cdf),
                "alpha": self.alpha,
                "gamma": self.gamma,
                "provenance": self.provenance,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "ProfileResult":
        raw = json.loads(text)
        return ProfileResult(
            c_th=raw["c_th"],
            importance_cdf=tuple(raw["importance_cdf"]),
            alpha=raw["alpha"],
            gamma=raw["gamma"],
            provenance=raw.get("provenance", ""),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: Union[str, Path]) -> "ProfileResult":
        return ProfileResult.from_json(Path(path).read_text())

    def policy_state(self, budget: float, **overrides) -> OffloadPolicyState:
        """Instantiate runtime policy state at a given budget."""
        return OffloadPolicyState(
            c_th=self.c_th,
            i_th=budget_to_ith(self, budget),
            budget=budget,
            **overrides,
        )


def expected_generated(alpha: float, gamma: int) -> float:
    """Tokens gained per verification round under acceptance rate alpha."""
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def calibrate_alpha(mean_generated: float, gamma: int, tol: float = 1e-10) -> float:
    """Invert the capped-geometric expectation for alpha by bisection.

    The expectation rises monotonically from 1 (alpha -> 0) to gamma + 1
    (alpha -> 1), so bisection is enough. Values at the boundaries clamp
    to (0, 1) rather than erroring; values outside [1, gamma + 1] do
    error, because no acceptance rate can produce them.
    """
    if not 1.0 <= mean_generated <= gamma + 1.0:
        raise EOutOfRange(
            f"mean generated {mean_generated!r} outside [1, {gamma + 1}]"
        )
    lo, hi = ALPHA_CLAMP, 1.0 - ALPHA_CLAMP
    if mean_generated <= expected_generated(lo, gamma):
        return lo
    if mean_generated >= expected_generated(hi, gamma):
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        err = expected_generated(mid, gamma) - mean_generated
        if abs(err) < tol:
            return mid
        if err < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def budget_to_ith(profile: ProfileResult, budget: float) -> float:
    """Importance cutoff for a budget: the (1 - budget) quantile of the CDF.

    Budget 0 maps to the +inf sentinel so that nothing offloads at all;
    any positive budget interpolates linearly between order statistics.
    """
    if not profile.importance_cdf:
        raise EmptyCdf("profile holds no importance samples")
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    if budget == 0.0:
        return math.inf
    return float(np.quantile(np.asarray(profile.importance_cdf), 1.0 - budget))


@dataclass
class ChunkObservation:
    """One offloaded chunk as seen during profiling."""

    confidence: float
    importance: float
    accepted: int
    chunk_len: int

    @property
    def fully_accepted(self) -> bool:
        return self.accepted == self.chunk_len


def profile(
    draft_model: LanguageModelBackend,
    target_model: LanguageModelBackend,
    workload: Sequence[Sequence[TokenId]],
    config: SessionConfig,
    importance: ImportanceProvider,
    provenance: str = "",
) -> ProfileResult:
    """Profile a model pair by offloading every chunk of every prompt.

    Runs the draft-and-verify loop to ``max_len`` tokens per prompt with
    forced offloading, then reduces the per-chunk observations into a
    ProfileResult. When no chunk is ever fully accepted the confidence
    cutoff falls back to a conservative default with a logged warning.
    """
    if draft_model.vocab_size != target_model.vocab_size:
        raise ValueError("draft and target models must share a vocabulary")
    observations: list[ChunkObservation] = []
    layered = as_layered(draft_model)
    for prompt_idx, prompt in enumerate(workload):
        observations.extend(
            _profile_prompt(layered, target_model, list(prompt), config, importance)
        )
    if not observations:
        raise ValueError("profiling produced no chunks; is max_len >= 1?")

    full = [o.confidence for o in observations if o.fully_accepted]
    if full:
        c_th = float(np.mean(full))
    else:
        logger.warning(
            "no fully accepted chunks during profiling; falling back to c_th=%s",
            DEFAULT_CTH_FALLBACK,
        )
        c_th = DEFAULT_CTH_FALLBACK

    cdf = tuple(sorted(o.importance for o in observations))
    mean_generated = float(np.mean([o.accepted + 1 for o in observations]))
    alpha = calibrate_alpha(
        min(max(mean_generated, 1.0), config.gamma + 1.0), config.gamma
    )
    return ProfileResult(
        c_th=c_th,
        importance_cdf=cdf,
        alpha=alpha,
        gamma=config.gamma,
        provenance=provenance,
    )


def _profile_prompt(
    draft_model,
    target_model,
    prompt: list[TokenId],
    config: SessionConfig,
    importance: ImportanceProvider,
) -> list[ChunkObservation]:
    committed = list(prompt)
    generated = 0
    observations = []
    while generated < config.max_len:
        tokens: list[DraftToken] = []
        ctx = list(committed)
        for _ in range(config.gamma):
            pos = len(ctx)
            dist = draft_model.distribution(ctx)
            tok = sample(dist, config.sampling, rngs.substream(config.seed, rngs.DRAFT, pos))
            tokens.append(
                DraftToken(
                    token=tok,
                    confidence=dist.top1(),
                    importance=importance.score(ctx, pos, dist),
                    dist=dist,
                )
            )
            ctx.append(tok)
        chunk = DraftChunk.from_tokens(0, len(committed), tokens)
        targets = [
            target_model.distribution(committed + [t.token for t in tokens[:j]])
            for j in range(len(tokens) + 1)
        ]
        result = verify_chunk(
            chunk, targets, rngs.substream(config.seed, rngs.VERIFY, len(committed))
        )
        observations.append(
            ChunkObservation(
                confidence=chunk.chunk_confidence,
                importance=chunk.chunk_importance,
                accepted=result.accepted_count,
                chunk_len=len(chunk),
            )
        )
        new = list(chunk.token_ids[: result.accepted_count])
        if result.correction is not None:
            new.append(result.correction)
        committed.extend(new)
        generated += len(new)
    return observations
