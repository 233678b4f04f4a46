"""Distillation from an external teacher known only through an exported PT file.

The file holds, per input, several generated outputs in the teacher's own
tokenization together with the teacher's top-5 next-token log-probabilities.
No labeled training data is used: the student learns from the exported PTs
alone, either by plain fine-tuning on them or by word-level KD after the
teacher's top-5 lists are aligned and projected onto the student vocabulary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ParallelExample, Splits
from .decoding import example_seed, sample_batch
from .metrics import GapReport, MetricReport, bleu, gap_report
from .model import Seq2SeqModel
from .pseudo_targets import teacher_topk
from .tensor import kl_div, nll, no_grad
from .tokenize_align import (TOP_K, BPELiteTokenizer, CharTokenizer, NWScoring, ProjectedDistribution, TextCodec,
                             nw_align, project_topk, projection_arrays)
from .training import TrainConfig, dev_scorer, evaluate, fit

log = logging.getLogger(__name__)

CONDITIONS = {
    "single_ft": (1, False),
    "multi_ft": (None, False),
    "single_logits": (1, True),
    "multi_logits": (None, True),
}


class ExternalFormatError(ValueError):
    pass


@dataclass
class ExternalPT:
    example_id: str
    text: str
    tokens: list[str]
    topk: list[list[tuple[str, float]]]


def _check_record(obj, where: str) -> ExternalPT:
    if not isinstance(obj, dict):
        raise ExternalFormatError(f"{where}: expected an object")
    for key in ("example_id", "text", "tokens", "topk"):
        if key not in obj:
            raise ExternalFormatError(f"{where}: missing field {key!r}")
    if not isinstance(obj["example_id"], str) or not isinstance(obj["text"], str):
        raise ExternalFormatError(f"{where}: example_id and text must be strings")
    toks = obj["tokens"]
    if not isinstance(toks, list) or not toks or not all(isinstance(t, str) for t in toks):
        raise ExternalFormatError(f"{where}: tokens must be a non-empty list of strings")
    topk = obj["topk"]
    if not isinstance(topk, list) or len(topk) != len(toks):
        raise ExternalFormatError(f"{where}: topk needs one list per token")
    rows = []
    for pos, row in enumerate(topk):
        if not isinstance(row, list) or not 1 <= len(row) <= TOP_K:
            raise ExternalFormatError(f"{where}: topk[{pos}] must hold 1..{TOP_K} entries")
        entries = []
        for e in row:
            if not isinstance(e, dict) or not isinstance(e.get("token"), str) or not isinstance(e.get("logprob"), (int, float)):
                raise ExternalFormatError(f"{where}: topk[{pos}] entries need a token string and a numeric logprob")
            if e["logprob"] > 1e-9:
                raise ExternalFormatError(f"{where}: topk[{pos}] has a positive logprob")
            entries.append((e["token"], float(e["logprob"])))
        if sum(np.exp(lp) for _, lp in entries) > 1 + 1e-9:
            raise ExternalFormatError(f"{where}: topk[{pos}] probabilities exceed 1")
        rows.append(entries)
    return ExternalPT(obj["example_id"], obj["text"], list(toks), rows)


def load_external(path) -> dict[str, list[ExternalPT]]:
    """Parse and validate an external PT file; PTs keep file order per example."""
    out: dict[str, list[ExternalPT]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ExternalFormatError(f"{where}: invalid JSON ({e.msg})") from e
            pt = _check_record(obj, where)
            out.setdefault(pt.example_id, []).append(pt)
    if not out:
        raise ExternalFormatError(f"{path}: no records")
    return out


def save_external(pts: Sequence[ExternalPT], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for pt in pts:
            f.write(json.dumps({"example_id": pt.example_id, "text": pt.text, "tokens": pt.tokens,
                                "topk": [[{"token": t, "logprob": lp} for t, lp in row] for row in pt.topk]}) + "\n")


def _char_spans(pieces: Sequence[str], chars: Sequence[str]) -> list[int]:
    """Index of the first character token inside each piece."""
    starts, j = [], 0
    for piece in pieces:
        starts.append(j)
        acc = ""
        while acc != piece:
            if j >= len(chars) or len(acc) >= len(piece):
                raise ValueError(f"piece {piece!r} is not a concatenation of character tokens")
            acc += chars[j]
            j += 1
    if j != len(chars):
        raise ValueError("pieces do not cover the character sequence")
    return starts


def export_external(teacher: Seq2SeqModel, codec: TextCodec, tokenizer: BPELiteTokenizer, examples: Sequence[ParallelExample],
                    n_pts: int = 5, max_len: int = 32, nucleus_p: float = 0.95, temperature: float = 1.0,
                    seed: int = 0, batch_size: int = 64) -> list[ExternalPT]:
    """Sample PTs from a character-level teacher and re-express them in ``tokenizer`` pieces.

    Each piece's top-5 list is the teacher's top-5 at the piece's first
    character, written as token strings (the way a remote model would report
    them). Labels are never read.
    """
    out = []
    eos = codec.vocab.eos_id
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        srcs = [codec.encode_source(ex.source) for ex in chunk]
        rep = [s for s in srcs for _ in range(n_pts)]
        seeds = [example_seed(seed, ex.id, j) for ex in chunk for j in range(n_pts)]
        with no_grad():
            samples = sample_batch(teacher, rep, max_len, nucleus_p, temperature, seeds)
        samples = [[t for t in s if t != eos] or [eos] for s in samples]
        tops = teacher_topk(teacher, rep, samples, TOP_K)
        for r, (ids, top) in enumerate(zip(samples, tops)):
            ex = chunk[r // n_pts]
            chars = [codec.vocab.tokens[t] for t in ids]
            text = CharTokenizer().detokenize(chars)
            if not text:
                continue
            chars = CharTokenizer().tokenize(text)
            pieces = tokenizer.tokenize(text)
            starts = _char_spans(pieces, chars)
            topk = [[(codec.vocab.tokens[t], lp) for t, lp in top[s]] for s in starts]
            out.append(ExternalPT(ex.id, text, pieces, topk))
    return out


@dataclass
class PreparedPT:
    ids: list[int]
    p: np.ndarray
    support: np.ndarray
    fallback: np.ndarray
    projected: list[ProjectedDistribution]


def prepare_pt(pt: ExternalPT, codec: TextCodec, scoring: NWScoring | None = None) -> PreparedPT:
    """Align teacher pieces with student tokens and project the top-5 lists (EOS gets probability one)."""
    student_tokens = codec.tokenizer.tokenize(pt.text)
    ids = codec.vocab.encode(student_tokens) + [codec.vocab.eos_id]
    ops = nw_align(pt.tokens, student_tokens, scoring)
    projected = project_topk(pt.topk, ops, codec.vocab, student_tokens)
    projected.append(ProjectedDistribution(len(student_tokens), [(codec.vocab.tokens[codec.vocab.eos_id], 1.0)], True))
    p, support, fallback = projection_arrays(projected, codec.vocab, ids)
    return PreparedPT(ids, p, support, fallback, projected)


@dataclass
class ExtremeOutcome:
    condition: str
    seed: int
    dev: MetricReport
    pt_dev_score: float
    gap: GapReport | None
    audit: dict
    best_step: int
    phase: str

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def run_extreme(external: dict[str, list[ExternalPT]], student_factory, splits: Splits, codec: TextCodec,
                train_cfg: TrainConfig, conditions: Sequence[str] = tuple(CONDITIONS), seed: int = 0,
                n_pts: int = 5, max_len: int = 32) -> dict[str, ExtremeOutcome]:
    """Train one student per condition from the external PTs only.

    Training inputs are the unlabeled inputs present in the file; dev
    selection scores against the teacher's first PT for each dev input.
    Final dev metrics use the real references (evaluation only).
    """
    labeled_ids = {ex.id for ex in splits.train_labeled}
    unlabeled = {ex.id: ex for ex in splits.train_unlabeled}
    train = [ParallelExample(i, unlabeled[i].source) for i in sorted(external, key=str) if i in unlabeled]
    if not train:
        raise ValueError("external file covers none of the unlabeled training inputs")
    dev = [ex for ex in splits.dev if ex.id in external]
    if not dev:
        raise ValueError("external file covers none of the dev inputs")
    pt_refs = [external[ex.id][0].text for ex in dev]
    prepared = {ex.id: [prepare_pt(pt, codec) for pt in external[ex.id][:n_pts]] for ex in train}
    teacher_dev = bleu(pt_refs, [ex.target for ex in dev])
    outcomes: dict[str, ExtremeOutcome] = {}
    baseline: float | None = None
    for cond in conditions:
        count, use_kd = CONDITIONS[cond]
        student: Seq2SeqModel = student_factory(seed)
        audit = {"labeled_examples_consumed": 0, "gt_rows": 0, "pt_rows": 0, "pts_per_example": {}}
        srcs = {ex.id: codec.encode_source(ex.source) for ex in train}

        def batch_loss(batch, epoch, step, rng, student=student, audit=audit, count=count, use_kd=use_kd):
            rows = []
            for ex in batch:
                if ex.id in labeled_ids or ex.target is not None:
                    audit["labeled_examples_consumed"] += 1
                    raise AssertionError(f"labeled example {ex.id} reached the extreme-setup trainer")
                pts = prepared[ex.id]
                k = 0 if count == 1 else epoch % len(pts)
                rows.append(pts[k])
                used = audit["pts_per_example"].setdefault(ex.id, set())
                used.add(k)
            audit["pt_rows"] += len(rows)
            tr = student.forward([srcs[ex.id] for ex in batch], [r.ids for r in rows], train=True, rng=rng)
            n, V = tr.logits.shape[1], tr.logits.shape[2]
            w = np.full(len(rows), 1.0 / len(rows))
            if not use_kd:
                tg = np.zeros((len(rows), n), dtype=np.int64)
                for b, r in enumerate(rows):
                    tg[b, : len(r.ids)] = r.ids
                return nll(tr.logits, tg, tr.target_mask, w)
            p = np.zeros((len(rows), n, V))
            sup = np.zeros((len(rows), n, V), bool)
            fb = np.ones((len(rows), n), bool)
            for b, r in enumerate(rows):
                L = len(r.ids)
                p[b, :L], sup[b, :L], fb[b, :L] = r.p, r.support, r.fallback
                p[b, L:, 0] = 1.0
            eff = np.where(fb[..., None], True, sup)
            return kl_div(p, tr.logits, mask=tr.target_mask, support=eff, weights=w)

        score = dev_scorer(dev, codec, max_len, train_cfg.dev_metric, train_cfg.dev_limit, references=pt_refs)
        res = fit(student, train, batch_loss, score, train_cfg, audit=audit)
        student.load_state_dict(res.best_state)
        dev_report = evaluate(student, dev, codec, max_len)
        audit["pts_per_example"] = int(max((len(v) for v in audit["pts_per_example"].values()), default=0))
        outcomes[cond] = ExtremeOutcome(cond, seed, dev_report, res.best_score, None, audit, res.best_step, res.phase)
        if cond == "single_ft":
            baseline = dev_report.bleu
    if baseline is not None:
        for o in outcomes.values():
            o.gap = gap_report("bleu", baseline, teacher_dev, o.dev.bleu)
    return outcomes
