"""Shared builders for end-to-end tests."""

import numpy as np
import pytest

from tandemserve.core import SamplingMode, SessionConfig
from tandemserve.models import EntropyImportance, layered_wrap, ngram_lm
from tandemserve.policy import OffloadPolicyState


def seeded_corpus(seed, vocab, length=80):
    gen = np.random.Generator(np.random.PCG64(seed))
    return [int(t) for t in gen.integers(0, vocab, size=length)]


@pytest.fixture
def model_pair():
    """A draft/target n-gram pair over a small shared vocabulary."""
    vocab = 8
    draft = layered_wrap(ngram_lm(seeded_corpus(1, vocab), n=2, vocab_size=vocab), 4, seed=2)
    target = ngram_lm(seeded_corpus(3, vocab, length=120), n=2, vocab_size=vocab)
    return draft, target


@pytest.fixture
def importance(model_pair):
    return EntropyImportance(model_pair[0])


def session_config(**overrides):
    defaults = dict(max_len=40, gamma=4, budget=0.5, delta=4, seed=11,
                    sampling=SamplingMode.top1())
    defaults.update(overrides)
    return SessionConfig(**defaults)


def eager_policy(**overrides):
    """Thresholds that offload most chunks."""
    defaults = dict(c_th=0.95, i_th=1e-6, budget=0.5)
    defaults.update(overrides)
    return OffloadPolicyState(**defaults)
