"""Deterministic random substreams.

Every stochastic decision in the runtime draws from a generator derived
from (session seed, decision domain, sequence position). Keying streams
by absolute position rather than by draw order makes a decision a pure
function of its inputs: re-drafting a token after a merge, or drafting
it speculatively while a verification is in flight, consumes the same
stream and therefore produces the same token. The cloud derives its
verification streams the same way, so verdicts do not depend on how
requests were batched.
"""

from __future__ import annotations

import numpy as np

# Decision domains. Values are part of the reproducibility contract:
# changing them changes every seeded run.
DRAFT = 1
OFFLOAD = 2
PREDICT = 3
ALTERNATIVE = 4
VERIFY = 5
WORKLOAD = 6
CHANNEL = 7


def substream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Return the generator for one keyed decision stream."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, domain, index)))
    )
