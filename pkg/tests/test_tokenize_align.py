import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab import tensor as T
from kdlab.tokenize_align import (DELETE, EOS, INSERT, MATCH, REPLACE, SPECIALS, WORD_MARK, BPELiteTokenizer,
                                  CharTokenizer, NWScoring, ProjectedDistribution, TextCodec, Vocab, alignment_score,
                                  cross_tokenizer_logits_kd, is_prefix_pair, nw_align, project_topk, projection_arrays,
                                  tokenizer_from_dict)
from oracles import NW_PIECES, brute_force_nw, check_alignment_ops, random_token_pair

pieces = st.lists(st.sampled_from(NW_PIECES), min_size=1, max_size=6)


class TestTokenizers:
    def test_char_round_trip(self):
        tok = CharTokenizer()
        assert tok.tokenize("ab c") == [WORD_MARK + "a", "b", WORD_MARK + "c"]
        assert tok.detokenize(tok.tokenize("ab c")) == "ab c"

    def test_bpe_merges_and_round_trip(self):
        texts = ["a b a b", "a b c", "a b a b a b"]
        bpe = BPELiteTokenizer.train(texts, num_merges=8)
        assert bpe.merges
        for t in texts:
            assert bpe.detokenize(bpe.tokenize(t)) == t
        assert len(bpe.tokenize("a b a b")) < len(CharTokenizer().tokenize("a b a b"))

    def test_bpe_serialises(self):
        bpe = BPELiteTokenizer.train(["x y x y", "x y z"], num_merges=4)
        back = tokenizer_from_dict(bpe.to_dict())
        assert back.tokenize("x y z x") == bpe.tokenize("x y z x")

    def test_vocab_specials_first(self):
        v = Vocab.build([["b", "a"]])
        assert tuple(v.tokens[:5]) == SPECIALS and v.tokens[5:] == ["a", "b"]
        assert v.encode(["zz"]) == [v.unk_id]
        with pytest.raises(ValueError):
            Vocab(["a", "b"])

    def test_codec(self, tmp_path):
        codec = TextCodec.fit(["a b c"])
        ids = codec.encode_target("c a")
        assert ids[-1] == codec.vocab.eos_id
        assert codec.decode(ids) == "c a"
        codec.save(tmp_path / "c.json")
        assert TextCodec.load(tmp_path / "c.json").vocab.tokens == codec.vocab.tokens


class TestNW:
    def test_identical(self):
        ops = nw_align(["x", "y", "z"], ["x", "y", "z"])
        assert [o.kind for o in ops] == [MATCH] * 3

    def test_prefix_fixture(self):
        ops = nw_align(["Rob", "ert", "s"], ["Robert", "s"])
        assert [(o.kind, o.teacher_index, o.student_index) for o in ops] == [
            (REPLACE, 0, 0), (DELETE, 1, None), (MATCH, 2, 1)]
        assert ops[0].is_prefix_match and ops[0].matched
        assert not ops[1].matched

    def test_disjoint_prefers_replace(self):
        ops = nw_align(["p", "q"], ["x", "y"])
        assert [o.kind for o in ops] == [REPLACE, REPLACE]
        assert alignment_score(ops, ["p", "q"], ["x", "y"]) == -2.0

    def test_insert(self):
        ops = nw_align(["a"], ["a", "s"])
        assert [o.kind for o in ops] == [MATCH, INSERT]

    def test_empty(self):
        with pytest.raises(ValueError):
            nw_align([], ["a"])

    def test_prefix_pair(self):
        assert is_prefix_pair("Rob", "Robert") and is_prefix_pair("Robert", "Rob")
        assert not is_prefix_pair("a", "a") and not is_prefix_pair("ab", "b")

    def test_random_corpus_optimal(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            a, b = random_token_pair(rng)
            ops = nw_align(a, b)
            check_alignment_ops(ops, len(a), len(b))
            assert alignment_score(ops, a, b) == brute_force_nw(a, b)

    @settings(max_examples=100, deadline=None)
    @given(pieces, pieces)
    def test_property_optimal(self, a, b):
        ops = nw_align(a, b)
        check_alignment_ops(ops, len(a), len(b))
        assert alignment_score(ops, a, b) == brute_force_nw(a, b)

    def test_custom_scoring(self):
        sc = NWScoring(match=1.0, prefix=0.0, mismatch=-5.0, gap=-1.0)
        ops = nw_align(["p"], ["x"], sc)
        assert alignment_score(ops, ["p"], ["x"], sc) == brute_force_nw(["p"], ["x"], 1.0, 0.0, -5.0, -1.0) == -2.0


def vocab_of(*toks):
    return Vocab.build([list(toks)])


class TestProjection:
    def test_inserted_token_gets_one(self):
        v = vocab_of("a", "s")
        ops = nw_align(["a"], ["a", "s"])
        proj = project_topk([[("a", -0.1), ("s", -3.0)]], ops, v, ["a", "s"])
        assert proj[1].fallback and proj[1].entries == [("s", 1.0)]

    def test_token_outside_top5(self):
        v = vocab_of("in", "2010", "2011")
        ops = nw_align(["in", "2010"], ["in", "2010"])
        proj = project_topk([[("in", -0.01)], [("2011", -0.5), ("2012", -1.0)]], ops, v, ["in", "2010"])
        assert proj[1].fallback and proj[1].entries == [("2010", 1.0)]
        assert not proj[0].fallback and proj[0].entries == [("in", 1.0)]

    def test_three_of_five_kept(self):
        v = vocab_of("a", "b", "c")
        lps = [("a", -0.1), ("x", -1.0), ("b", -2.0), ("y", -2.5), ("c", -3.0)]
        proj = project_topk([lps], nw_align(["a"], ["a"]), v, ["a"])
        want = np.exp([-0.1, -2.0, -3.0])
        want /= want.sum()
        assert [t for t, _ in proj[0].entries] == ["a", "b", "c"]
        np.testing.assert_allclose([p for _, p in proj[0].entries], want, atol=1e-12)
        assert proj[0].total() == pytest.approx(1.0, abs=1e-9)

    def test_non_prefix_replace_falls_back(self):
        v = vocab_of("q", "x")
        proj = project_topk([[("q", -0.2), ("x", -2.0)]], nw_align(["q"], ["x"]), v, ["x"])
        assert proj[0].fallback

    def test_prefix_replace_counts_as_match(self):
        v = vocab_of("Robert", "Rob", "s")
        ops = nw_align(["Rob", "ert", "s"], ["Robert", "s"])
        proj = project_topk([[("Robert", -0.5), ("Rob", -1.0)], [("ert", -0.1)], [("s", -0.2)]], ops, v, ["Robert", "s"])
        assert not proj[0].fallback and dict(proj[0].entries).keys() == {"Robert", "Rob"}

    def test_unknown_student_token(self):
        with pytest.raises(KeyError):
            project_topk([[("a", -0.1)]], nw_align(["a"], ["zz"]), vocab_of("a"), ["zz"])

    @settings(max_examples=100, deadline=None)
    @given(pieces, pieces, st.integers(0, 10**6))
    def test_rows_sum_to_one(self, t_toks, s_toks, seed):
        rng = np.random.default_rng(seed)
        v = vocab_of(*NW_PIECES[:5])
        s_toks = [t if t in v else "a" for t in s_toks]
        top = []
        for _ in t_toks:
            k = int(rng.integers(1, 6))
            picks = rng.choice(NW_PIECES, size=k, replace=False)
            lps = np.log(rng.dirichlet(np.ones(k + 1))[:k])
            top.append(list(zip(picks.tolist(), lps.tolist())))
        proj = project_topk(top, nw_align(t_toks, s_toks), v, s_toks)
        assert [p.student_position for p in proj] == list(range(len(s_toks)))
        for p in proj:
            assert abs(p.total() - 1.0) <= 1e-9 and len(p.entries) <= 5
            if p.fallback:
                assert [pr for _, pr in p.entries] == [1.0]


class TestCrossTokenizerKD:
    def _arrays(self, proj, v, toks):
        ids = v.encode(toks)
        return ids, *projection_arrays(proj, v, ids)

    def test_all_fallback_is_nll(self):
        v = vocab_of("a", "b")
        toks = ["a", "b"]
        proj = [ProjectedDistribution(i, [(t, 1.0)], True) for i, t in enumerate(toks)]
        ids, p, sup, fb = self._arrays(proj, v, toks)
        logits = np.random.default_rng(0).normal(size=(2, len(v)))
        got = cross_tokenizer_logits_kd(T.Tensor(logits), p, sup, fb).item()
        assert got == pytest.approx(T.nll(logits, np.array(ids)).item(), abs=1e-12)

    def test_matching_student_is_zero(self):
        v = vocab_of("a", "b", "c")
        proj = [ProjectedDistribution(0, [("a", 0.7), ("b", 0.2), ("c", 0.1)])]
        ids, p, sup, fb = self._arrays(proj, v, ["a"])
        logits = np.full((1, len(v)), -4.0)
        logits[0, v.encode(["a", "b", "c"])] = np.log([0.7, 0.2, 0.1])
        assert abs(cross_tokenizer_logits_kd(T.Tensor(logits), p, sup, fb).item()) < 1e-12

    def test_naive_oracle(self):
        rng = np.random.default_rng(3)
        v = vocab_of("a", "b", "c", "d")
        proj = [ProjectedDistribution(0, [("a", 0.5), ("c", 0.5)]), ProjectedDistribution(1, [("d", 1.0)], True),
                ProjectedDistribution(2, [("b", 0.9), ("a", 0.1)])]
        ids, p, sup, fb = self._arrays(proj, v, ["a", "d", "b"])
        logits = rng.normal(size=(3, len(v)))
        want = 0.0
        for row, pd in enumerate(proj):
            z = logits[row]
            cols = list(range(len(v))) if pd.fallback else sorted({v.index[t] for t, _ in pd.entries} | {ids[row]})
            lse = math.log(sum(math.exp(z[c]) for c in cols))
            for t, pr in pd.entries:
                want += pr * (math.log(pr) - (z[v.index[t]] - lse))
        assert cross_tokenizer_logits_kd(T.Tensor(logits), p, sup, fb).item() == pytest.approx(want, abs=1e-9)

    def test_empty_support(self):
        with pytest.raises(ValueError):
            cross_tokenizer_logits_kd(T.Tensor(np.zeros((1, 3))), np.zeros((1, 3)), np.zeros((1, 3), bool),
                                      np.zeros(1, bool))

    def test_eos_padding_rows(self):
        v = vocab_of("a")
        proj = [ProjectedDistribution(0, [("a", 1.0)], True)]
        p, sup, fb = projection_arrays(proj, v, [v.index["a"]], length=3)
        assert sup[1:, 0].all() and p.shape == (3, len(v))
        assert EOS in v
