import json

import numpy as np
import pytest

from kdlab.data import DatasetSpec, generate
from kdlab.extreme import (ExternalFormatError, ExternalPT, _char_spans, export_external, load_external, prepare_pt,
                           run_extreme, save_external)
from kdlab.model import ModelConfig, Seq2SeqModel
from kdlab.tokenize_align import BPELiteTokenizer, CharTokenizer, TextCodec
from kdlab.training import TrainConfig


def record(**kw):
    base = {"example_id": "u1", "text": "ab c", "tokens": ["ab", " c"],
            "topk": [[{"token": "a", "logprob": -0.1}], [{"token": " ", "logprob": -0.2}, {"token": "c", "logprob": -3.0}]]}
    base.update(kw)
    return base


def write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


@pytest.fixture(scope="module")
def setup():
    splits = generate(DatasetSpec(n_labeled=12, unlabeled_ratio=2, n_dev=5, n_test=5, max_source_len=5, seed=2))
    texts = [ex.source for ex in splits.train_labeled + splits.train_unlabeled] + [ex.target for ex in splits.train_labeled]
    codec = TextCodec.fit(texts)
    V = len(codec.vocab)
    teacher = Seq2SeqModel(ModelConfig(d_model=16, heads=2, d_ff=32, vocab_size=V, max_len=48), seed=5)
    bpe = BPELiteTokenizer.train([ex.source for ex in splits.train_unlabeled], 12)
    pts = export_external(teacher, codec, bpe, splits.train_unlabeled + splits.dev, n_pts=3, max_len=10, seed=0)
    return splits, codec, pts


class TestSchema:
    def test_valid(self, tmp_path):
        ext = load_external(write_lines(tmp_path / "e.jsonl", [record(), record(text="c")]))
        assert [pt.text for pt in ext["u1"]] == ["ab c", "c"]

    @pytest.mark.parametrize("bad", [
        record(tokens=[]),
        record(topk=[[{"token": "a", "logprob": -0.1}]]),
        record(topk=[[{"token": "a", "logprob": 0.5}], [{"token": "c", "logprob": -1.0}]]),
        record(topk=[[{"token": "a", "logprob": -0.1}, {"token": "b", "logprob": -0.1}], [{"token": "c", "logprob": -1.0}]]),
        record(topk=[[{"token": t, "logprob": -3.0} for t in "abcdef"], [{"token": "c", "logprob": -1.0}]]),
        {"example_id": "u1", "text": "x"},
        [1, 2],
    ])
    def test_violation_names_line(self, tmp_path, bad):
        with pytest.raises(ExternalFormatError, match=":2:"):
            load_external(write_lines(tmp_path / "e.jsonl", [record(), bad]))

    def test_invalid_json(self, tmp_path):
        with pytest.raises(ExternalFormatError, match=":1:"):
            load_external(write_lines(tmp_path / "e.jsonl", ["{nope"]))

    def test_empty(self, tmp_path):
        with pytest.raises(ExternalFormatError):
            load_external(write_lines(tmp_path / "e.jsonl", []))


class TestExport:
    def test_char_spans(self):
        assert _char_spans(["ab", " c"], ["a", "b", " ", "c"]) == [0, 2]
        with pytest.raises(ValueError):
            _char_spans(["ax"], ["a", "b"])

    def test_round_trip(self, setup, tmp_path):
        _, _, pts = setup
        save_external(pts, tmp_path / "e.jsonl")
        back = load_external(tmp_path / "e.jsonl")
        flat = [pt for rows in back.values() for pt in rows]
        assert sorted((p.example_id, p.text) for p in flat) == sorted((p.example_id, p.text) for p in pts)

    def test_pieces_cover_text(self, setup):
        _, _, pts = setup
        for pt in pts:
            assert CharTokenizer().detokenize(pt.tokens) == pt.text
            assert len(pt.topk) == len(pt.tokens)
            for row in pt.topk:
                assert 1 <= len(row) <= 5
                assert sum(np.exp(lp) for _, lp in row) <= 1 + 1e-9

    def test_never_reads_labels(self, setup):
        splits, codec, _ = setup
        teacher = Seq2SeqModel(ModelConfig(d_model=16, heads=2, d_ff=32, vocab_size=len(codec.vocab), max_len=48), seed=5)
        bpe = BPELiteTokenizer.train(["a b c"], 4)
        stripped = [type(ex)(ex.id, ex.source) for ex in splits.dev]
        a = export_external(teacher, codec, bpe, splits.dev, n_pts=2, max_len=8)
        b = export_external(teacher, codec, bpe, stripped, n_pts=2, max_len=8)
        assert [(p.text, p.tokens) for p in a] == [(p.text, p.tokens) for p in b]

    def test_prepared_rows_sum_to_one(self, setup):
        _, codec, pts = setup
        for pt in pts[:20]:
            prep = prepare_pt(pt, codec)
            assert len(prep.ids) == prep.p.shape[0]
            np.testing.assert_allclose(prep.p.sum(-1), 1.0, atol=1e-9)
            for d in prep.projected:
                assert abs(sum(q for _, q in d.entries) - 1.0) <= 1e-9


class TestRun:
    def test_conditions_and_audit(self, setup):
        splits, codec, pts = setup
        ext = {}
        for pt in pts:
            ext.setdefault(pt.example_id, []).append(pt)
        V = len(codec.vocab)
        factory = lambda s: Seq2SeqModel(ModelConfig(d_model=16, heads=2, d_ff=32, vocab_size=V, max_len=48), seed=s)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=3, patience_epochs=3, warmup_steps=2)
        outs = run_extreme(ext, factory, splits, codec, cfg, n_pts=3, max_len=10)
        assert set(outs) == {"single_ft", "multi_ft", "single_logits", "multi_logits"}
        for name, o in outs.items():
            assert o.audit["labeled_examples_consumed"] == 0
            assert o.audit["gt_rows"] == 0
            assert o.audit["pts_per_example"] == (1 if name.startswith("single") else 3)
            assert o.gap is not None

    def test_no_coverage(self, setup):
        splits, codec, _ = setup
        ext = {"elsewhere": [ExternalPT("elsewhere", "a", ["a"], [[("a", -0.1)]])]}
        with pytest.raises(ValueError, match="unlabeled"):
            run_extreme(ext, None, splits, codec, TrainConfig())
