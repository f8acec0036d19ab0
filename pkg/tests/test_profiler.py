import math

import numpy as np
import pytest

from tandemserve.core import SamplingMode, SessionConfig
from tandemserve.models import EntropyImportance, ngram_lm, table_lm
from tandemserve.profiler import (
    EOutOfRange,
    EmptyCdf,
    ProfileResult,
    budget_to_ith,
    calibrate_alpha,
    expected_generated,
    profile,
)


def make_profile(cdf=(0.1, 0.5, 0.9), alpha=0.5, gamma=4):
    return ProfileResult(c_th=0.7, importance_cdf=tuple(sorted(cdf)), alpha=alpha, gamma=gamma)


class TestCalibrateAlpha:
    def test_forward_inverse_round_trip(self):
        # forward: gamma=4, alpha=0.5 -> E = (1 - 0.5^5) / 0.5 = 1.9375
        e = expected_generated(0.5, 4)
        assert e == pytest.approx(1.9375)
        assert calibrate_alpha(e, 4) == pytest.approx(0.5, abs=1e-9)

    def test_boundaries_clamp(self):
        assert calibrate_alpha(1.0, 4) == pytest.approx(1e-6)
        assert calibrate_alpha(5.0, 4) == pytest.approx(1.0 - 1e-6)

    def test_out_of_range(self):
        with pytest.raises(EOutOfRange):
            calibrate_alpha(0.5, 4)
        with pytest.raises(EOutOfRange):
            calibrate_alpha(5.1, 4)

    def test_round_trip_over_random_alpha_gamma(self):
        gen = np.random.default_rng(4)
        for _ in range(300):
            alpha = float(gen.uniform(0.02, 0.98))
            gamma = int(gen.integers(1, 9))
            back = calibrate_alpha(expected_generated(alpha, gamma), gamma)
            assert back == pytest.approx(alpha, abs=1e-8)


class TestBudgetToIth:
    def test_quantile_interpolation(self):
        # samples 1..100, budget 0.2: 0.8-quantile by linear interpolation
        # sits at order-statistic position 0.8 * 99 = 79.2 -> 80.2
        prof = make_profile(cdf=tuple(float(x) for x in range(1, 101)))
        assert budget_to_ith(prof, 0.2) == pytest.approx(80.2)

    def test_budget_one_is_minimum(self):
        prof = make_profile(cdf=(0.3, 0.5, 2.0))
        assert budget_to_ith(prof, 1.0) == pytest.approx(0.3)

    def test_budget_zero_is_sentinel(self):
        prof = make_profile()
        assert budget_to_ith(prof, 0.0) == math.inf

    def test_monotone_nonincreasing_in_budget(self):
        gen = np.random.default_rng(9)
        prof = make_profile(cdf=tuple(sorted(gen.lognormal(0, 2, size=500))))
        budgets = np.linspace(0.01, 1.0, 50)
        cuts = [budget_to_ith(prof, float(b)) for b in budgets]
        assert all(a >= b for a, b in zip(cuts, cuts[1:]))

    def test_empty_cdf(self):
        prof = ProfileResult(c_th=0.7, importance_cdf=(), alpha=0.5, gamma=4)
        with pytest.raises(EmptyCdf):
            budget_to_ith(prof, 0.5)


class TestProfile:
    def config(self, max_len=24, seed=5):
        return SessionConfig(max_len=max_len, gamma=4, seed=seed)

    def test_identical_models_fully_accept(self):
        lm = ngram_lm([0, 1, 2, 3, 1, 0, 2, 1, 3, 0], n=2, vocab_size=4)
        result = profile(lm, lm, [[0, 1]], self.config(), EntropyImportance(lm))
        # ratio-1 acceptance everywhere: every chunk fully accepted, so
        # c_th is the mean confidence over all chunks
        assert result.alpha == pytest.approx(1.0 - 1e-6)
        assert 0.0 < result.c_th <= 1.0
        assert len(result.importance_cdf) >= 24 // 5

    def test_adversarial_target_falls_back(self, caplog):
        # draft always emits token 0; target puts everything on token 1
        draft = table_lm({(): [1.0, 0.0]})
        target = table_lm({(): [0.0, 1.0]})
        with caplog.at_level("WARNING"):
            result = profile(draft, target, [[0]], self.config(max_len=12), EntropyImportance(draft))
        assert result.c_th == 0.8
        assert "fall" in caplog.text or "fully accepted" in caplog.text

    def test_acceptance_matches_analytic_oracle(self):
        # single-position models make acceptance independent per token:
        # accept probability is sum_t min(p_t, q_t) when drafting from p
        p_row = [0.6, 0.3, 0.1]
        q_row = [0.2, 0.5, 0.3]
        draft = table_lm({(): p_row})
        target = table_lm({(): q_row})
        cfg = SessionConfig(max_len=400, gamma=4, seed=3, sampling=SamplingMode.topp(1.0))
        result = profile(draft, target, [[0]], cfg, EntropyImportance(draft))
        accept = sum(min(p, q) for p, q in zip(p_row, q_row))
        # mean generated per round for the capped geometric with that rate
        expected_e = expected_generated(accept, 4)
        measured_e = expected_generated(result.alpha, 4)
        assert measured_e == pytest.approx(expected_e, rel=0.08)

    def test_deterministic_given_seed(self):
        lm = ngram_lm([0, 1, 2, 3, 1, 0, 2, 1, 3, 0], n=2, vocab_size=4)
        target = ngram_lm([3, 2, 1, 0, 1, 2, 3, 0, 0, 1], n=2, vocab_size=4)
        a = profile(lm, target, [[0, 1]], self.config(), EntropyImportance(lm))
        b = profile(lm, target, [[0, 1]], self.config(), EntropyImportance(lm))
        assert a == b

    def test_round_trip_json(self, tmp_path):
        prof = make_profile()
        path = tmp_path / "profile.json"
        prof.save(path)
        assert ProfileResult.load(path) == prof

    def test_policy_state_carries_budget_cut(self):
        prof = make_profile(cdf=tuple(float(x) for x in range(1, 101)))
        state = prof.policy_state(0.2)
        assert state.i_th == pytest.approx(80.2)
        assert state.c_th == prof.c_th
