import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tandemserve.core import DraftChunk, DraftToken, SamplingMode, TokenDistribution
from tandemserve.models import ngram_lm
from tandemserve.specdec import (
    DraftTokenNotInEntries,
    KExceedsVocab,
    LengthMismatch,
    compress,
    residual_distribution,
    sample,
    speculative_generate,
    verify_chunk,
    verify_with_compressed,
)


def dist(*probs):
    return TokenDistribution(np.array(probs))


def chunk_from(tokens_and_dists, start_pos=0, session=1):
    tokens = [
        DraftToken(token=t, confidence=d.top1(), importance=0.0, dist=d)
        for t, d in tokens_and_dists
    ]
    return DraftChunk.from_tokens(session, start_pos, tokens)


class TestCompress:
    def test_top1_single_entry(self):
        comp = compress(dist(0.1, 0.7, 0.2), SamplingMode.top1())
        assert comp.entries == ((1, 0.7),)
        assert comp.residual_mass == pytest.approx(0.3)

    def test_one_hot_any_mode(self):
        for mode in (SamplingMode.top1(), SamplingMode.topk(3), SamplingMode.topp(0.9)):
            comp = compress(dist(0.0, 1.0, 0.0), mode)
            assert comp.entries == ((1, 1.0),)
            assert comp.residual_mass == 0.0

    def test_topp_minimal_prefix(self):
        # sort-and-accumulate by hand: 0.4 < 0.6, 0.4 + 0.3 >= 0.6 -> two entries
        comp = compress(dist(0.4, 0.3, 0.2, 0.1), SamplingMode.topp(0.6))
        assert comp.entries == ((0, 0.4), (1, 0.3))
        assert comp.residual_mass == pytest.approx(0.3)

    def test_topk_exceeds_vocab(self):
        with pytest.raises(KExceedsVocab):
            compress(dist(0.5, 0.5), SamplingMode.topk(3))

    def test_mass_consistency(self):
        gen = np.random.Generator(np.random.PCG64(0))
        for _ in range(200):
            probs = gen.dirichlet(np.ones(16))
            d = TokenDistribution(probs)
            for mode in (SamplingMode.top1(), SamplingMode.topk(4), SamplingMode.topp(0.7)):
                comp = compress(d, mode)
                total = sum(p for _, p in comp.entries) + comp.residual_mass
                assert total == pytest.approx(1.0, abs=1e-9)

    def test_entries_sorted_desc_with_id_tiebreak(self):
        comp = compress(dist(0.25, 0.25, 0.25, 0.25), SamplingMode.topk(3))
        assert [t for t, _ in comp.entries] == [0, 1, 2]

    def test_payload_ratio_at_large_vocab(self):
        vocab = 32000
        probs = np.full(vocab, 1.0 / vocab)
        comp = compress(TokenDistribution(probs), SamplingMode.top1())
        assert comp.payload_entries() / vocab < 0.005


class TestSample:
    def test_top1_argmax(self):
        assert sample(dist(0.1, 0.7, 0.2), SamplingMode.top1(), np.random.default_rng(0)) == 1

    def test_top1_tie_breaks_low(self):
        assert sample(dist(0.5, 0.5), SamplingMode.top1(), np.random.default_rng(0)) == 0

    def test_topk_frequencies_match(self):
        # uniform over 4, top-k(2): support is the two lowest ids, half each
        gen = np.random.default_rng(7)
        counts = np.zeros(4)
        n = 100_000
        d = dist(0.25, 0.25, 0.25, 0.25)
        for _ in range(n):
            counts[sample(d, SamplingMode.topk(2), gen)] += 1
        assert counts[2] == counts[3] == 0
        assert counts[0] / n == pytest.approx(0.5, abs=0.01)
        assert counts[1] / n == pytest.approx(0.5, abs=0.01)

    def test_sample_stays_inside_compressed_entries(self):
        gen = np.random.default_rng(3)
        for _ in range(100):
            probs = gen.dirichlet(np.ones(8))
            d = TokenDistribution(probs)
            for mode in (SamplingMode.top1(), SamplingMode.topk(3), SamplingMode.topp(0.5)):
                entries = {t for t, _ in compress(d, mode).entries}
                for _ in range(20):
                    assert sample(d, mode, gen) in entries


class TestVerifyChunk:
    def test_identical_models_always_accept(self):
        d = dist(0.6, 0.3, 0.1)
        chunk = chunk_from([(0, d), (1, d)])
        gen = np.random.default_rng(0)
        for _ in range(50):
            res = verify_chunk(chunk, [d, d], gen)
            assert res.accepted_count == 2
            assert res.correction is None

    def test_acceptance_rate_matches_ratio(self):
        # closed form: accept probability = min(1, q/p) = 0.4 / 0.8 = 0.5
        p = dist(0.8, 0.2)
        q = dist(0.4, 0.6)
        chunk = chunk_from([(0, p)])
        gen = np.random.default_rng(11)
        n = 100_000
        accepted = sum(verify_chunk(chunk, [q], gen).accepted_count for _ in range(n))
        assert accepted / n == pytest.approx(0.5, abs=0.01)

    def test_forced_reject_samples_residual(self):
        # residual arithmetic: max(0, q - p) = [0, 0.8] -> token 1 always
        p = dist(0.9, 0.1)
        q = dist(0.1, 0.9)
        chunk = chunk_from([(0, p)])
        gen = np.random.default_rng(5)
        for _ in range(200):
            res = verify_chunk(chunk, [q], gen)
            if res.accepted_count == 0:
                assert res.correction == 1

    def test_bonus_emitted_on_full_accept(self):
        d = dist(1.0, 0.0)
        bonus_dist = dist(0.0, 1.0)
        chunk = chunk_from([(0, d)])
        res = verify_chunk(chunk, [d, bonus_dist], np.random.default_rng(0))
        assert res.accepted_count == 1
        assert res.bonus and res.correction == 1

    def test_no_bonus_without_extra_dist(self):
        d = dist(1.0, 0.0)
        res = verify_chunk(chunk_from([(0, d)]), [d], np.random.default_rng(0))
        assert res.accepted_count == 1 and res.correction is None

    def test_prefix_property(self):
        gen = np.random.default_rng(2)
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.3, 0.5)
        chunk = chunk_from([(0, p), (0, p), (0, p)])
        for _ in range(300):
            res = verify_chunk(chunk, [q, q, q, q], gen)
            # nothing is ever accepted after the first rejection by
            # construction; verdict shape encodes it
            if res.accepted_count < 3:
                assert res.correction is not None and not res.bonus
            else:
                assert res.bonus

    def test_length_mismatch(self):
        d = dist(1.0, 0.0)
        with pytest.raises(LengthMismatch):
            verify_chunk(chunk_from([(0, d), (0, d)]), [d], np.random.default_rng(0))

    def test_zero_draft_prob_auto_rejects(self):
        p = dist(1.0, 0.0)
        q = dist(0.5, 0.5)
        tokens = [DraftToken(token=1, confidence=1.0, importance=0.0, dist=p)]
        chunk = DraftChunk.from_tokens(1, 0, tokens)
        res = verify_chunk(chunk, [q], np.random.default_rng(0))
        assert res.accepted_count == 0
        assert res.correction is not None


class TestResidual:
    def test_matches_formula(self):
        q = np.array([0.2, 0.3, 0.5])
        p = np.array([0.5, 0.3, 0.2])
        res = residual_distribution(q, p)
        expected = np.array([0.0, 0.0, 0.3]) / 0.3
        assert np.allclose(res, expected)

    def test_identical_falls_back_to_target(self):
        q = np.array([0.5, 0.5])
        assert np.allclose(residual_distribution(q, q), q)


class TestVerifyWithCompressed:
    def compressed_chunk(self, tokens_and_dists, mode):
        tokens = [
            DraftToken(token=t, confidence=d.top1(), importance=0.0, dist=compress(d, mode))
            for t, d in tokens_and_dists
        ]
        return DraftChunk.from_tokens(1, 0, tokens)

    def test_one_hot_identical_verdicts(self):
        d = dist(0.0, 1.0, 0.0)
        q = dist(0.2, 0.5, 0.3)
        full = chunk_from([(1, d)])
        comp = self.compressed_chunk([(1, d)], SamplingMode.top1())
        for seed in range(50):
            a = verify_chunk(full, [q], np.random.default_rng(seed))
            b = verify_with_compressed(comp, [q], np.random.default_rng(seed))
            assert a.accepted_count == b.accepted_count

    def test_paired_accept_counts_match_full(self):
        # under top-1 sampling the drafted token is the argmax, whose raw
        # probability travels in the single compressed entry, so paired
        # runs see identical acceptance draws
        gen = np.random.default_rng(9)
        mismatch = 0
        trials = 2000
        for trial in range(trials):
            p_probs = gen.dirichlet(np.ones(8))
            q_probs = gen.dirichlet(np.ones(8))
            p, q = TokenDistribution(p_probs), TokenDistribution(q_probs)
            tok = p.argmax()
            full = chunk_from([(tok, p)])
            comp = self.compressed_chunk([(tok, p)], SamplingMode.top1())
            a = verify_chunk(full, [q], np.random.default_rng(trial))
            b = verify_with_compressed(comp, [q], np.random.default_rng(trial))
            mismatch += a.accepted_count != b.accepted_count
        assert mismatch == 0

    def test_token_outside_entries(self):
        d = dist(0.6, 0.4)
        comp = compress(d, SamplingMode.top1())
        tokens = [DraftToken(token=1, confidence=0.6, importance=0.0, dist=comp)]
        chunk = DraftChunk.from_tokens(1, 0, tokens)
        with pytest.raises(DraftTokenNotInEntries):
            verify_with_compressed(chunk, [d], np.random.default_rng(0))


from oracles import enumerate_pipeline_law, enumerate_sequence_law


class TestLosslessness:
    def test_exact_enumeration_small_instance(self):
        # V=3, gamma=2, length=3: the pipeline law must equal the target law
        draft = ngram_lm([0, 1, 2, 1, 0, 2, 2, 1], n=2, vocab_size=3)
        target = ngram_lm([2, 0, 0, 1, 2, 1, 1, 0], n=2, vocab_size=3)
        prompt = [0]
        pipeline = enumerate_pipeline_law(draft, target, prompt, gamma=2, length=3)
        direct = enumerate_sequence_law(target, prompt, 3)
        assert abs(sum(pipeline.values()) - 1.0) < 1e-9
        assert set(pipeline) == set(direct)
        for seq, prob in direct.items():
            assert pipeline[seq] == pytest.approx(prob, abs=1e-9)

    def test_speculative_generate_matches_direct_marginals(self):
        # Monte-Carlo: per-position marginals of the kernel loop against
        # direct target sampling, paired sample sizes
        v = 8
        draft = ngram_lm(list(np.random.default_rng(1).integers(0, v, 60)), n=2, vocab_size=v)
        target = ngram_lm(list(np.random.default_rng(2).integers(0, v, 60)), n=2, vocab_size=v)
        length = 5
        trials = 4000
        gen = np.random.default_rng(33)
        pipe_counts = np.zeros((length, v))
        direct_counts = np.zeros((length, v))
        for _ in range(trials):
            seq = speculative_generate(draft, target, [0], gamma=3, length=length, rng=gen)
            for j, t in enumerate(seq):
                pipe_counts[j, t] += 1
            prefix = [0]
            for j in range(length):
                t = int(
                    np.searchsorted(
                        np.cumsum(target.distribution(prefix).probs), gen.random(), side="right"
                    )
                )
                direct_counts[j, min(t, v - 1)] += 1
                prefix.append(min(t, v - 1))
        for j in range(length):
            tv = 0.5 * np.abs(pipe_counts[j] / trials - direct_counts[j] / trials).sum()
            assert tv < 0.05, f"position {j} TV {tv}"


@st.composite
def distributions(draw, vocab=6):
    raw = draw(
        st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=vocab, max_size=vocab)
    )
    arr = np.array(raw)
    return TokenDistribution(arr / arr.sum())


class TestProperties:
    @given(distributions(), st.sampled_from(["top1", "topk", "topp"]))
    @settings(max_examples=60, deadline=None)
    def test_compress_mass_conserved(self, d, kind):
        mode = {"top1": SamplingMode.top1(), "topk": SamplingMode.topk(3),
                "topp": SamplingMode.topp(0.8)}[kind]
        comp = compress(d, mode)
        assert sum(p for _, p in comp.entries) + comp.residual_mass == pytest.approx(1.0, abs=1e-9)
        probs = [p for _, p in comp.entries]
        assert probs == sorted(probs, reverse=True)
