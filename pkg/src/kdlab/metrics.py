"""BLEU, ROUGE, perplexity and the gap-closure statistic.

BLEU variant: corpus level, up to 4-grams, clipped counts, brevity penalty,
unigram precision unsmoothed and add-one smoothing ``(m+1)/(t+1)`` on 2-4 gram
precisions. Scores live in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

# higher-is-better flag per registered metric
DIRECTIONS = {
    "bleu": True,
    "rouge1_f1": True,
    "rouge2_f1": True,
    "rougeL_f1": True,
    "rouge_avg": True,
    "ppl": False,
}


def higher_is_better(metric: str) -> bool:
    try:
        return DIRECTIONS[metric]
    except KeyError:
        raise KeyError(f"metric {metric!r} has no registered direction") from None


def _tok(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tok(h), _tok(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(overlap: float, hyp_total: int, ref_total: int) -> PRF:
    p = overlap / hyp_total if hyp_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


def rouge_n(hyp, ref, n: int) -> PRF:
    h, r = _ngrams(_tok(hyp), n), _ngrams(_tok(ref), n)
    overlap = sum(min(c, r[g]) for g, c in h.items())
    return _prf(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref) -> PRF:
    h, r = _tok(hyp), _tok(ref)
    return _prf(lcs_length(h, r), len(h), len(r))


@dataclass(frozen=True)
class RougeScores:
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF

    @property
    def average_f1(self) -> float:
        return (self.rouge1.f1 + self.rouge2.f1 + self.rougeL.f1) / 3.0


def rouge(hypothesis, reference) -> RougeScores:
    return RougeScores(rouge_n(hypothesis, reference, 1), rouge_n(hypothesis, reference, 2), rouge_l(hypothesis, reference))


@dataclass
class MetricReport:
    bleu: float
    rouge1_f1: float
    rouge2_f1: float
    rougeL_f1: float
    rouge_avg: float
    ppl: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def get(self, name: str) -> float:
        return getattr(self, name)


def score_corpus(hypotheses: Sequence, references: Sequence, ppl: float | None = None) -> MetricReport:
    scores = [rouge(h, r) for h, r in zip(hypotheses, references)]
    r1 = float(np.mean([s.rouge1.f1 for s in scores])) if scores else 0.0
    r2 = float(np.mean([s.rouge2.f1 for s in scores])) if scores else 0.0
    rl = float(np.mean([s.rougeL.f1 for s in scores])) if scores else 0.0
    return MetricReport(bleu(hypotheses, references), r1, r2, rl, (r1 + r2 + rl) / 3.0, ppl)


def perplexity_from_nll(total_nll: float, num_tokens: int) -> float:
    if num_tokens <= 0:
        raise ValueError("no target tokens")
    return math.exp(total_nll / num_tokens)


def perplexity(model, examples, codec, batch_size: int = 64) -> float:
    """exp(mean per-token NLL of the ground-truth targets, EOS included)."""
    from .tensor import nll, no_grad

    if any(ex.target is None for ex in examples):
        raise ValueError("perplexity needs a labeled dataset")
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            src = [codec.encode_source(ex.source) for ex in chunk]
            tgt = [codec.encode_target(ex.target) for ex in chunk]
            trace = model.forward(src, tgt)
            tg = np.zeros(trace.target_mask.shape, dtype=np.int64)
            for b, t in enumerate(tgt):
                tg[b, : len(t)] = t
            total += nll(trace.logits, tg, trace.target_mask).item()
            count += int(trace.target_mask.sum())
    return perplexity_from_nll(total, count)


@dataclass
class GapReport:
    metric: str
    student: float
    teacher: float
    distilled: float
    closed_fraction: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def gap_closure(S: float, T: float, KD: float, lower_is_better: bool = False) -> float:
    """(KD - S) / (T - S); lower-is-better metrics are negated first."""
    if lower_is_better:
        S, T, KD = -S, -T, -KD
    if T == S:
        raise ZeroDivisionError("teacher and student scores are equal; gap closure undefined")
    return (KD - S) / (T - S)


def gap_report(metric: str, S: float, T: float, KD: float) -> GapReport:
    try:
        frac = gap_closure(S, T, KD, lower_is_better=not higher_is_better(metric))
    except ZeroDivisionError:
        frac = None
    return GapReport(metric, S, T, KD, frac)
