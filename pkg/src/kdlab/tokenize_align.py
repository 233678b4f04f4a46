"""Toy tokenizers, vocabularies and cross-tokenizer alignment.

The alignment half handles a teacher and a student that tokenize the same
pseudo-target differently: Needleman-Wunsch pairs up the two token streams,
then each teacher top-k distribution is re-expressed over the student
vocabulary.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, kl_div

WORD_MARK = "▁"
PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK)


# tokenizers ----------------------------------------------------------------


class CharTokenizer:
    """One token per character; the first character of each word carries a word mark."""

    name = "char"

    def tokenize(self, text: str) -> list[str]:
        out = []
        for word in text.split():
            out.append(WORD_MARK + word[0])
            out.extend(word[1:])
        return out

    def detokenize(self, tokens: Iterable[str]) -> str:
        return "".join(t for t in tokens if t not in SPECIALS).replace(WORD_MARK, " ").strip()

    def to_dict(self) -> dict:
        return {"kind": self.name}


class BPELiteTokenizer(CharTokenizer):
    """Greedy longest-match tokenizer over a vocabulary grown by pair merges.

    Training starts from character tokens and repeatedly merges the most
    frequent adjacent pair (ties: lexicographically smallest pair). Merges may
    span word boundaries.
    """

    name = "bpe"

    def __init__(self, merges: Sequence[tuple[str, str]] = (), base: Iterable[str] = ()):
        self.merges = [tuple(m) for m in merges]
        self.pieces = set(base) | {a + b for a, b in self.merges}
        self._max_piece = max((len(p) for p in self.pieces), default=1)

    @classmethod
    def train(cls, texts: Iterable[str], num_merges: int = 64) -> "BPELiteTokenizer":
        char = CharTokenizer()
        seqs = [char.tokenize(t) for t in texts]
        base = {tok for s in seqs for tok in s}
        merges = []
        for _ in range(num_merges):
            counts: Counter = Counter()
            for s in seqs:
                counts.update(zip(s, s[1:]))
            if not counts:
                break
            best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            if counts[best] < 2:
                break
            merges.append(best)
            joined = best[0] + best[1]
            new_seqs = []
            for s in seqs:
                out, i = [], 0
                while i < len(s):
                    if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                        out.append(joined)
                        i += 2
                    else:
                        out.append(s[i])
                        i += 1
                new_seqs.append(out)
            seqs = new_seqs
        return cls(merges, base)

    def tokenize(self, text: str) -> list[str]:
        s = "".join(CharTokenizer.tokenize(self, text))
        out, i = [], 0
        while i < len(s):
            for L in range(min(self._max_piece, len(s) - i), 0, -1):
                piece = s[i:i + L]
                if piece in self.pieces:
                    break
            else:
                L = 2 if s[i] == WORD_MARK and i + 1 < len(s) else 1
                piece = s[i:i + L]
            out.append(piece)
            i += L
        return out

    def to_dict(self) -> dict:
        return {"kind": self.name, "merges": [list(m) for m in self.merges], "base": sorted(self.pieces - {a + b for a, b in self.merges})}


def tokenizer_from_dict(d: dict):
    if d["kind"] == "char":
        return CharTokenizer()
    if d["kind"] == "bpe":
        return BPELiteTokenizer(d["merges"], d.get("base", ()))
    raise ValueError(f"unknown tokenizer kind {d['kind']!r}")


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], extra: Iterable[str] = ()) -> "Vocab":
        seen = set(SPECIALS)
        toks = list(SPECIALS)
        for tl in list(token_lists) + [list(extra)]:
            for t in tl:
                if t not in seen:
                    seen.add(t)
                    toks.append(t)
        return cls(list(SPECIALS) + sorted(toks[len(SPECIALS):]))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self.index

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    @property
    def sep_id(self):
        return 3

    @property
    def unk_id(self):
        return 4

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i >= len(SPECIALS):
                out.append(self.tokens[i])
        return out


class TextCodec:
    """Tokenizer + vocabulary: text <-> model ids (targets end with EOS)."""

    def __init__(self, tokenizer, vocab: Vocab):
        self.tokenizer = tokenizer
        self.vocab = vocab

    @classmethod
    def fit(cls, texts: Iterable[str], tokenizer=None) -> "TextCodec":
        tokenizer = tokenizer or CharTokenizer()
        return cls(tokenizer, Vocab.build(tokenizer.tokenize(t) for t in texts))

    def encode_source(self, text: str) -> list[int]:
        return self.vocab.encode(self.tokenizer.tokenize(text))

    def encode_target(self, text: str) -> list[int]:
        return self.vocab.encode(self.tokenizer.tokenize(text)) + [self.vocab.eos_id]

    def decode(self, ids: Sequence[int]) -> str:
        return self.tokenizer.detokenize(self.vocab.decode(ids))

    def to_dict(self) -> dict:
        return {"tokenizer": self.tokenizer.to_dict(), "vocab": self.vocab.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "TextCodec":
        return cls(tokenizer_from_dict(d["tokenizer"]), Vocab(d["vocab"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TextCodec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# Needleman-Wunsch ----------------------------------------------------------

MATCH, REPLACE, INSERT, DELETE = "match", "replace", "insert", "delete"


@dataclass(frozen=True)
class AlignmentOp:
    kind: str
    teacher_index: int | None = None
    student_index: int | None = None
    is_prefix_match: bool = False

    @property
    def matched(self) -> bool:
        """Exact matches and prefix replacements both count as matches."""
        return self.kind == MATCH or self.is_prefix_match


@dataclass(frozen=True)
class NWScoring:
    match: float = 2.0
    prefix: float = 1.0
    mismatch: float = -1.0
    gap: float = -1.0

    def pair(self, a: str, b: str) -> float:
        if a == b:
            return self.match
        if is_prefix_pair(a, b):
            return self.prefix
        return self.mismatch


def is_prefix_pair(a: str, b: str) -> bool:
    return a != b and (a.startswith(b) or b.startswith(a))


def nw_score_table(teacher: Sequence[str], student: Sequence[str], scoring: NWScoring) -> np.ndarray:
    n, m = len(teacher), len(student)
    H = np.zeros((n + 1, m + 1))
    H[:, 0] = scoring.gap * np.arange(n + 1)
    H[0, :] = scoring.gap * np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            H[i, j] = max(
                H[i - 1, j - 1] + scoring.pair(teacher[i - 1], student[j - 1]),
                H[i - 1, j] + scoring.gap,
                H[i, j - 1] + scoring.gap,
            )
    return H


def nw_align(teacher_tokens: Sequence[str], student_tokens: Sequence[str],
             scoring: NWScoring | None = None) -> list[AlignmentOp]:
    """Globally optimal alignment; traceback prefers match > replace > delete > insert."""
    scoring = scoring or NWScoring()
    if not teacher_tokens or not student_tokens:
        raise ValueError("both token sequences must be non-empty")
    H = nw_score_table(teacher_tokens, student_tokens, scoring)
    ops = []
    i, j = len(teacher_tokens), len(student_tokens)
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            a, b = teacher_tokens[i - 1], student_tokens[j - 1]
            diag = H[i - 1, j - 1] + scoring.pair(a, b)
            if a == b and H[i, j] == diag:
                ops.append(AlignmentOp(MATCH, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
            if H[i, j] == diag:
                ops.append(AlignmentOp(REPLACE, i - 1, j - 1, is_prefix_pair(a, b)))
                i, j = i - 1, j - 1
                continue
        if i > 0 and H[i, j] == H[i - 1, j] + scoring.gap:
            ops.append(AlignmentOp(DELETE, teacher_index=i - 1))
            i -= 1
            continue
        ops.append(AlignmentOp(INSERT, student_index=j - 1))
        j -= 1
    ops.reverse()
    return ops


def alignment_score(ops: Sequence[AlignmentOp], teacher: Sequence[str], student: Sequence[str],
                    scoring: NWScoring | None = None) -> float:
    scoring = scoring or NWScoring()
    total = 0.0
    for op in ops:
        if op.kind in (MATCH, REPLACE):
            total += scoring.pair(teacher[op.teacher_index], student[op.student_index])
        else:
            total += scoring.gap
    return total


# top-k projection ----------------------------------------------------------

TOP_K = 5


@dataclass
class ProjectedDistribution:
    student_position: int
    entries: list[tuple[str, float]]
    fallback: bool = False

    def total(self) -> float:
        return float(sum(p for _, p in self.entries))


def project_topk(teacher_topk: Sequence[Sequence[tuple[str, float]]], alignment: Sequence[AlignmentOp],
                 student_vocab, student_tokens: Sequence[str], k: int = TOP_K) -> list[ProjectedDistribution]:
    """Re-express teacher top-k next-token log-probs over the student vocabulary.

    Positions aligned by a match (or prefix replacement) keep the teacher tokens
    that exist verbatim in the student vocabulary, renormalised by softmax.
    Inserted tokens, non-prefix replacements and positions whose realised
    student token is not among the retained teacher tokens get probability one
    on the realised token.
    """
    for tok in student_tokens:
        if tok not in student_vocab:
            raise KeyError(f"student token {tok!r} not in student vocabulary")
    by_student = {op.student_index: op for op in alignment if op.student_index is not None}
    if set(by_student) != set(range(len(student_tokens))):
        raise ValueError("alignment does not cover every student position")
    out = []
    for j, tok in enumerate(student_tokens):
        op = by_student[j]
        kept: list[tuple[str, float]] = []
        if op.matched:
            for t, lp in list(teacher_topk[op.teacher_index])[:k]:
                if t in student_vocab and t not in {x for x, _ in kept}:
                    kept.append((t, float(lp)))
        if not any(t == tok for t, _ in kept):
            out.append(ProjectedDistribution(j, [(tok, 1.0)], fallback=True))
            continue
        lps = np.array([lp for _, lp in kept])
        probs = np.exp(lps - lps.max())
        probs /= probs.sum()
        out.append(ProjectedDistribution(j, [(t, float(p)) for (t, _), p in zip(kept, probs)]))
    return out


def projection_arrays(projected: Sequence[ProjectedDistribution], vocab: Vocab, student_ids: Sequence[int],
                      length: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense target probs, support mask and fallback flags, shaped [length, V]."""
    V = len(vocab)
    n = len(projected) if length is None else length
    p = np.zeros((n, V))
    support = np.zeros((n, V), bool)
    fallback = np.zeros(n, bool)
    for row, pd in enumerate(projected):
        for tok, prob in pd.entries:
            p[row, vocab.index[tok]] += prob
            support[row, vocab.index[tok]] = True
        support[row, student_ids[row]] = True
        fallback[row] = pd.fallback
    support[len(projected):, 0] = True
    return p, support, fallback


def cross_tokenizer_logits_kd(student_logits: Tensor, p: np.ndarray, support: np.ndarray, fallback: np.ndarray,
                              mask: np.ndarray | None = None) -> Tensor:
    """KL(projected || student) summed over positions.

    Matched rows compare against the student distribution restricted to the
    projected support and renormalised. Fallback rows put probability one on
    the realised token and compare against the full student distribution,
    which makes them a plain NLL term.
    """
    if not support.any(axis=-1).all():
        raise ValueError("empty support row")
    mask = np.ones(p.shape[:-1], bool) if mask is None else np.asarray(mask, bool)
    eff_support = np.where(fallback[..., None], True, support)
    return kl_div(p, student_logits, mask=mask, support=eff_support)
