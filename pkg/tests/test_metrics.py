import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdlab.data import ParallelExample
from kdlab.metrics import (DIRECTIONS, bleu, gap_closure, gap_report, higher_is_better, lcs_length, perplexity,
                           perplexity_from_nll, rouge, score_corpus)
from kdlab.model import ModelConfig, Seq2SeqModel
from oracles import tiny_codec

HYPS = ["a b c d", "e f g", "h i"]
REFS = ["a b c e", "e f g", "h j k"]
# hand counts: 1-gram 7/9, 2-gram 4/6 -> (4+1)/(6+1), 3-gram 2/3 -> 3/4, 4-gram 0/1 -> 1/2; lengths 9 vs 10
HAND_BLEU = math.exp(1 - 10 / 9) * (7 / 9 * 5 / 7 * 3 / 4 * 1 / 2) ** 0.25


def affine_draws(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = rng.uniform(0.01, 100.0)
        b = rng.uniform(-100.0, 100.0)
        S, T, KD = rng.normal(0, 10, 3)
        if abs(T - S) < 1e-3:
            continue
        yield a, b, S, T, KD


class TestBleu:
    def test_hand_fixture(self):
        assert bleu(HYPS, REFS) == pytest.approx(HAND_BLEU, abs=1e-6)
        assert HAND_BLEU == pytest.approx(0.604554, abs=1e-6)

    def test_identical(self):
        assert bleu(REFS, REFS) == pytest.approx(1.0)

    def test_disjoint_near_zero(self):
        assert bleu(["a b c d"], ["e f g h"]) < 1e-6

    def test_brevity_penalty(self):
        assert bleu(["a b"], ["a b c d"]) < bleu(["a b c d"], ["a b c d"])

    def test_errors(self):
        with pytest.raises(ValueError):
            bleu([], [])
        with pytest.raises(ValueError):
            bleu(["a"], ["a", "b"])

    @given(st.lists(st.text("abc ", min_size=1, max_size=12), min_size=1, max_size=4), st.integers(0, 100))
    def test_bounded(self, hyps, seed):
        refs = [" ".join(np.random.default_rng(seed).choice(list("abc"), 4)) for _ in hyps]
        assert 0.0 <= bleu(hyps, refs) <= 1.0 + 1e-12


class TestRouge:
    def test_hand_fixture(self):
        r = rouge("a b c", "a b d")
        assert r.rouge1.f1 == pytest.approx(2 / 3, abs=1e-12)
        assert r.rougeL.f1 == pytest.approx(2 / 3, abs=1e-12)
        assert r.rouge2.f1 == pytest.approx(1 / 2, abs=1e-12)

    def test_identical(self):
        r = rouge("x y z", "x y z")
        assert r.rouge1.f1 == r.rouge2.f1 == r.rougeL.f1 == 1.0

    def test_empty_hypothesis(self):
        r = rouge("", "a b")
        assert r.rouge1.f1 == r.rouge2.f1 == r.rougeL.f1 == 0.0

    def test_lcs(self):
        assert lcs_length("abcbdab", "bdcaba") == 4

    def test_report_average(self):
        rep = score_corpus(HYPS, REFS)
        assert rep.rouge_avg == pytest.approx((rep.rouge1_f1 + rep.rouge2_f1 + rep.rougeL_f1) / 3, abs=1e-12)
        assert rep.get("bleu") == rep.bleu


class TestPerplexity:
    def _model(self, V, bias):
        m = Seq2SeqModel(ModelConfig(d_model=8, heads=2, d_ff=16, vocab_size=V, max_len=16, tie_embeddings=False))
        for k, p in m.params.items():
            p.data[...] = 0.0
        m.params["out.w"].data[...] = 0.0
        return m

    def test_uniform(self):
        codec = tiny_codec()
        V = len(codec.vocab)
        m = self._model(V, 0.0)
        exs = [ParallelExample("0", "a b", "c d"), ParallelExample("1", "e", "f g h")]
        assert perplexity(m, exs, codec) == pytest.approx(V, rel=1e-12)

    def test_from_nll(self):
        assert perplexity_from_nll(2 * math.log(16), 2) == pytest.approx(16.0)
        assert perplexity_from_nll(0.0, 5) == 1.0
        with pytest.raises(ValueError):
            perplexity_from_nll(1.0, 0)

    def test_composition(self):
        from kdlab.tensor import nll

        codec = tiny_codec()
        m = Seq2SeqModel(ModelConfig(d_model=8, heads=2, d_ff=16, vocab_size=len(codec.vocab), max_len=16), seed=4)
        exs = [ParallelExample("0", "a b", "c d"), ParallelExample("1", "e", "f g h")]
        total, count = 0.0, 0
        for ex in exs:
            tgt = codec.encode_target(ex.target)
            total += nll(m.forward([codec.encode_source(ex.source)], [tgt]).logits, np.array([tgt])).item()
            count += len(tgt)
        assert perplexity(m, exs, codec) == pytest.approx(math.exp(total / count), abs=1e-9)

    def test_unlabeled(self):
        with pytest.raises(ValueError):
            perplexity(None, [ParallelExample("0", "a")], tiny_codec())


class TestGap:
    def test_fixtures(self):
        assert gap_closure(30.0, 40.0, 37.5) == pytest.approx(0.75)
        assert gap_closure(30.0, 40.0, 40.0) == 1.0
        assert gap_closure(30.0, 40.0, 30.0) == 0.0

    def test_ppl_negated(self):
        assert gap_closure(20.0, 10.0, 12.5, lower_is_better=True) == pytest.approx(0.75)
        assert gap_report("ppl", 20.0, 10.0, 12.5).closed_fraction == pytest.approx(0.75)

    def test_equal_scores(self):
        with pytest.raises(ZeroDivisionError):
            gap_closure(1.0, 1.0, 2.0)
        assert gap_report("bleu", 1.0, 1.0, 2.0).closed_fraction is None

    def test_affine_invariance(self):
        n = 0
        for a, b, S, T, KD in affine_draws(1000, 0):
            assert gap_closure(a * S + b, a * T + b, a * KD + b) == pytest.approx(gap_closure(S, T, KD), rel=1e-9, abs=1e-9)
            n += 1
        assert n >= 990

    def test_directions(self):
        assert not higher_is_better("ppl") and higher_is_better("bleu")
        assert set(DIRECTIONS) >= {"bleu", "rouge_avg", "ppl"}
        with pytest.raises(KeyError):
            higher_is_better("meteor")
