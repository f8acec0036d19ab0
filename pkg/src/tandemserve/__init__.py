"""Device-cloud tandem token serving.

A device runtime drafts tokens with a small local model and selectively
offloads quality-critical chunks to a cloud runtime, which verifies them
under a verification-aware continuous-batching scheduler. The two talk
over a compressed binary wire protocol carried by either a simulated
channel or a TCP socket.
"""

from .core import (
    DraftChunk,
    DraftToken,
    SamplingMode,
    SessionConfig,
    TokenDistribution,
    VerificationRequest,
    VerificationResult,
    validate_request,
)
from .policy import OffloadPolicyState, decide_offload, layer_exit, p_conf, p_imp, seq_exit
from .profiler import ProfileResult, budget_to_ith, calibrate_alpha, profile
from .specdec import CompressedDistribution, compress, sample, verify_chunk, verify_with_compressed

__version__ = "0.1.0"

__all__ = [
    "CompressedDistribution",
    "DraftChunk",
    "DraftToken",
    "OffloadPolicyState",
    "ProfileResult",
    "SamplingMode",
    "SessionConfig",
    "TokenDistribution",
    "VerificationRequest",
    "VerificationResult",
    "budget_to_ith",
    "calibrate_alpha",
    "compress",
    "decide_offload",
    "layer_exit",
    "p_conf",
    "p_imp",
    "profile",
    "sample",
    "seq_exit",
    "validate_request",
    "verify_chunk",
    "verify_with_compressed",
]
