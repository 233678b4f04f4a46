"""Synthetic seq2seq tasks and dataset JSONL I/O.

Text is whitespace pre-tokenized. Each task is a fixed, documented rule so any
(source, target) pair can be checked independently:

reversal
    Reverse the source tokens, then replace every vowel at target position
    ``i`` by the vowel ``i`` steps further along ``a e i o u`` (cyclically).
simplify
    Drop filler tokens (the last four letters of the alphabet in use), map
    every remaining letter to the letter at half its alphabet index, then swap
    each adjacent pair of the result.
arithmetic
    Copy the source, replacing every infix ``x + y`` (single digits) by the
    digit ``(x + y) mod 10``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
VOWELS = "aeiou"
TASKS = ("reversal", "simplify", "arithmetic")


@dataclass(frozen=True)
class ParallelExample:
    id: str
    source: str
    target: Optional[str] = None

    def __post_init__(self):
        if not self.source.strip():
            raise ValueError(f"example {self.id!r} has an empty source")

    @property
    def labeled(self) -> bool:
        return self.target is not None


@dataclass
class DatasetSpec:
    task: str = "reversal"
    n_labeled: int = 2000
    unlabeled_ratio: int = 4
    n_dev: int = 200
    n_test: int = 200
    vocab_size: int = 20
    min_source_len: int = 4
    max_source_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.unlabeled_ratio < 0:
            raise ValueError("unlabeled_ratio must be >= 0")
        if not 1 <= self.min_source_len <= self.max_source_len:
            raise ValueError("need 1 <= min_source_len <= max_source_len")
        if self.vocab_size > len(ALPHABET):
            raise ValueError(f"vocab_size is capped at {len(ALPHABET)} letters")


@dataclass
class Splits:
    train_labeled: list[ParallelExample]
    train_unlabeled: list[ParallelExample]
    dev: list[ParallelExample]
    test: list[ParallelExample]

    def items(self):
        return {"train_labeled": self.train_labeled, "train_unlabeled": self.train_unlabeled,
                "dev": self.dev, "test": self.test}.items()


# task rules ----------------------------------------------------------------


def _letters(vocab_size: int) -> str:
    consonants = [c for c in ALPHABET if c not in VOWELS]
    letters = list(VOWELS) + consonants[: vocab_size - len(VOWELS)]
    return "".join(sorted(letters))


def reversal_rule(tokens: list[str]) -> list[str]:
    out = []
    for i, tok in enumerate(reversed(tokens)):
        if tok in VOWELS:
            tok = VOWELS[(VOWELS.index(tok) + i) % len(VOWELS)]
        out.append(tok)
    return out


def simplify_rule(tokens: list[str], letters: str) -> list[str]:
    filler = set(letters[-4:])
    kept = [letters[letters.index(t) // 2] for t in tokens if t not in filler]
    for i in range(0, len(kept) - 1, 2):
        kept[i], kept[i + 1] = kept[i + 1], kept[i]
    return kept


def arithmetic_rule(tokens: list[str]) -> list[str]:
    out = []
    i = 0
    while i < len(tokens):
        if i + 2 < len(tokens) and tokens[i].isdigit() and tokens[i + 1] == "+" and tokens[i + 2].isdigit():
            out.append(str((int(tokens[i]) + int(tokens[i + 2])) % 10))
            i += 3
        else:
            out.append(tokens[i])
            i += 1
    return out


def apply_rule(task: str, source: str, vocab_size: int = 20) -> str:
    toks = source.split()
    if task == "reversal":
        return " ".join(reversal_rule(toks))
    if task == "simplify":
        return " ".join(simplify_rule(toks, _letters(vocab_size)))
    if task == "arithmetic":
        return " ".join(arithmetic_rule(toks))
    raise ValueError(f"unknown task {task!r}")


def _sample_source(spec: DatasetSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_source_len, spec.max_source_len + 1))
    if spec.task == "arithmetic":
        letters = _letters(spec.vocab_size)
        toks: list[str] = []
        while len(toks) < n:
            if rng.random() < 0.35 and len(toks) + 3 <= n:
                toks += [str(rng.integers(10)), "+", str(rng.integers(10))]
            else:
                toks.append(letters[rng.integers(len(letters))])
        return " ".join(toks)
    letters = _letters(spec.vocab_size)
    return " ".join(letters[j] for j in rng.integers(len(letters), size=n))


def generate(spec: DatasetSpec) -> Splits:
    """Deterministic splits; sources never repeat across (or within) splits."""
    if spec.task == "reversal" and spec.vocab_size < len(VOWELS) + 1:
        raise ValueError("reversal needs all five vowels plus at least one consonant")
    if spec.task == "simplify" and spec.vocab_size < 6:
        raise ValueError("simplify needs at least 6 letters (4 are filler)")
    if spec.task == "arithmetic" and spec.vocab_size < 1:
        raise ValueError("arithmetic needs at least one letter")
    rng = np.random.default_rng(spec.seed)
    sizes = {
        "train_labeled": spec.n_labeled,
        "train_unlabeled": spec.n_labeled * spec.unlabeled_ratio,
        "dev": spec.n_dev,
        "test": spec.n_test,
    }
    seen: set[str] = set()
    out: dict[str, list[ParallelExample]] = {}
    for split, count in sizes.items():
        rows = []
        attempts = 0
        while len(rows) < count:
            attempts += 1
            if attempts > 50 * count + 1000:
                raise ValueError(f"could not draw {count} distinct sources for {split}; widen lengths or vocab")
            src = _sample_source(spec, rng)
            if src in seen:
                continue
            if spec.task == "simplify" and not apply_rule(spec.task, src, spec.vocab_size):
                continue
            seen.add(src)
            tgt = None if split == "train_unlabeled" else apply_rule(spec.task, src, spec.vocab_size)
            rows.append(ParallelExample(f"{spec.task}-{split}-{len(rows)}", src, tgt))
        out[split] = rows
    return Splits(**out)


# JSONL I/O -----------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def save_jsonl(examples: Iterable[ParallelExample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"id": ex.id, "source": ex.source, "target": ex.target}, ensure_ascii=False) + "\n")


def load_jsonl(path) -> list[ParallelExample]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ex = ParallelExample(str(obj["id"]), obj["source"], obj.get("target"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"{path}:{lineno}: malformed example ({e})") from e
            if ex.id in seen:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            out.append(ex)
    return out


def save_splits(splits: Splits, directory) -> None:
    for name, rows in splits.items():
        save_jsonl(rows, Path(directory) / f"{name}.jsonl")


def load_splits(directory) -> Splits:
    d = Path(directory)
    return Splits(**{name: load_jsonl(d / f"{name}.jsonl") if (d / f"{name}.jsonl").exists() else []
                     for name in ("train_labeled", "train_unlabeled", "dev", "test")})


def validate_splits(splits: Splits) -> list[str]:
    """Problems found (empty list when the splits are well formed)."""
    problems = []
    where: dict[str, str] = {}
    for name, rows in splits.items():
        for ex in rows:
            if ex.source in where and where[ex.source] != name:
                problems.append(f"source {ex.source!r} appears in both {where[ex.source]} and {name}")
            where.setdefault(ex.source, name)
            if name == "train_unlabeled" and ex.labeled:
                problems.append(f"{ex.id}: unlabeled split carries a target")
            if name in ("train_labeled", "dev", "test") and not ex.labeled:
                problems.append(f"{ex.id}: {name} example has no target")
    return problems
