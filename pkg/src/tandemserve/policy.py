"""Selective offloading decisions and progressive early exit.

The offload decision is a two-stage gate over a chunk's aggregate
scores. The confidence stage is a coarse filter: chunks at or below the
confidence cutoff always pass (the drafter is unsure, so the chunk is a
candidate), while chunks above it pass with a probability that falls
off on a scaled sigmoid. Survivors then face the importance stage,
which retains everything below half the importance cutoff, offloads
everything above the cutoff, and ramps between the two on its own
sigmoid. The stages compose as two sequential Bernoulli draws, so the
long-run offload rate of a chunk is the product of the two gate
probabilities.

Early exit comes in two flavors. Layer exit stops a drafting forward
pass at the first eligible layer whose top1-top2 margin clears a
threshold, with eligibility restricted to a trailing window of layers.
Sequence exit disables offloading entirely once generation is past a
fraction of the length budget, on the grounds that a well-established
trajectory no longer needs outside help.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import DraftChunk, InvalidConfig, SessionConfig
from .models import LayerSignal


@dataclass(frozen=True)
class OffloadPolicyState:
    """Thresholds and slopes driving every offload decision.

    ``i_th`` may be ``math.inf`` as the budget-zero sentinel, in which
    case no chunk ever offloads.
    """

    c_th: float
    i_th: float
    k: float = 10.0
    theta: float = -10.0
    budget: float = 0.2
    margin_threshold: float = 0.7
    exit_window: float = 0.25
    seq_exit_fraction: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.c_th <= 1.0:
            raise InvalidConfig("c_th must lie in [0, 1]")
        if not self.i_th > 0.0:
            raise InvalidConfig("i_th must be positive")
        if not 0.0 <= self.budget <= 1.0:
            raise InvalidConfig("budget must lie in [0, 1]")
        if not 0.0 < self.exit_window <= 1.0:
            raise InvalidConfig("exit_window must lie in (0, 1]")
        if not 0.0 < self.seq_exit_fraction <= 1.0:
            raise InvalidConfig("seq_exit_fraction must lie in (0, 1]")


class OffloadDecision(Enum):
    RETAIN = "retain"
    OFFLOAD = "offload"


def p_conf(c: float, state: OffloadPolicyState) -> float:
    """Dispatch probability from the chunk's mean confidence.

    Returns 1 for c <= c_th; above the cutoff the confidence is mapped
    onto [-1/2, 1/2] and pushed through 1/(1 + exp(k * norm)). With
    c_th = 1 every confidence hits the c <= c_th branch.
    """
    if c <= state.c_th:
        return 1.0
    norm = (c - state.c_th) / (1.0 - state.c_th) - 0.5
    return 1.0 / (1.0 + math.exp(state.k * norm))


def p_imp(i: float, state: OffloadPolicyState) -> float:
    """Dispatch probability from the chunk's mean importance.

    Three tiers: scores at or below i_th/2 never offload, scores above
    i_th always do, and the band between them follows a sigmoid with
    slope theta (negative, so the probability rises with importance).
    """
    if i <= state.i_th / 2.0:
        return 0.0
    if i > state.i_th:
        return 1.0
    half = state.i_th / 2.0
    norm = (i - half) / half - 0.5
    return 1.0 / (1.0 + math.exp(state.theta * norm))


def decide_offload(
    chunk: DraftChunk, state: OffloadPolicyState, rng: np.random.Generator
) -> OffloadDecision:
    """Two-stage Bernoulli gate over the chunk's aggregate scores.

    Both uniforms are always drawn, regardless of where the decision
    short-circuits, so a fixed generator yields comparable decisions
    across different threshold settings.
    """
    u_conf = rng.random()
    u_imp = rng.random()
    if u_conf >= p_conf(chunk.chunk_confidence, state):
        return OffloadDecision.RETAIN
    if u_imp < p_imp(chunk.chunk_importance, state):
        return OffloadDecision.OFFLOAD
    return OffloadDecision.RETAIN


def exit_boundary(layer_count: int, exit_window: float) -> int:
    """First 0-based layer index eligible for early exit.

    ceil((1 - window) * L); a layer sitting exactly on the boundary is
    eligible. With window 0.25 and L = 8 the boundary is 6, leaving the
    last two layers eligible.
    """
    return math.ceil((1.0 - exit_window) * layer_count)


def layer_exit(
    signals: Sequence[LayerSignal], state: OffloadPolicyState
) -> LayerSignal:
    """Pick the layer a drafting forward pass stops at.

    Scans layers in order and returns the first eligible one whose
    margin exceeds the threshold, or the final layer when none does.
    The returned signal carries the distribution and confidence the
    caller should use.
    """
    if not signals:
        raise ValueError("layer_exit needs at least one signal")
    layer_count = len(signals)
    boundary = exit_boundary(layer_count, state.exit_window)
    for sig in signals:
        if sig.layer_index >= boundary and sig.margin > state.margin_threshold:
            return sig
    return signals[-1]


def seq_exit(step: int, config: SessionConfig) -> bool:
    """True when offloading is disabled for the rest of the sequence.

    ``step`` counts generated tokens so far; the cutoff is strict, so a
    step landing exactly on fraction * max_len still offloads.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    return step > config.seq_exit_fraction * config.max_len
