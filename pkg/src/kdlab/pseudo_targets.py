"""Pseudo-target generation, caching and per-epoch scheduling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import ParallelExample
from .decoding import BEAM, GREEDY, HIGH_TEMPERATURE, SAMPLE, DecodeConfig, beam_search_batch, example_seed, sample_batch
from .tensor import no_grad, np_log_softmax

TEACHER, STUDENT, EXTERNAL = "teacher", "student", "external"
PT_METHODS = ("beam", "sample", "h_sample", "greedy")


@dataclass
class PseudoTarget:
    example_id: str
    origin: str
    method: str
    index: int
    tokens: list[int]
    topk: Optional[list[list[tuple[int, float]]]] = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"empty pseudo-target for {self.example_id!r}")

    def to_json(self) -> dict:
        topk = None if self.topk is None else [[{"t": int(t), "lp": float(lp)} for t, lp in row] for row in self.topk]
        return {"example_id": self.example_id, "origin": self.origin, "method": self.method,
                "index": self.index, "tokens": [int(t) for t in self.tokens], "topk": topk}

    @classmethod
    def from_json(cls, obj: dict) -> "PseudoTarget":
        topk = obj.get("topk")
        if topk is not None:
            topk = [[(int(e["t"]), float(e["lp"])) for e in row] for row in topk]
        return cls(obj["example_id"], obj["origin"], obj["method"], int(obj["index"]), list(obj["tokens"]), topk)


@dataclass
class PTCache:
    """PTs keyed by (example_id, origin, method), each an ordered list."""

    entries: dict[tuple[str, str, str], list[PseudoTarget]] = field(default_factory=dict)

    def put(self, pts: Sequence[PseudoTarget]):
        """Store PTs; any existing list under the same key is replaced."""
        fresh: dict[tuple, list] = {}
        for pt in pts:
            fresh.setdefault((pt.example_id, pt.origin, pt.method), []).append(pt)
        for key, lst in fresh.items():
            self.entries[key] = sorted(lst, key=lambda p: p.index)

    def get(self, example_id: str, origin: str = TEACHER, method: str = "beam") -> list[PseudoTarget]:
        try:
            return self.entries[(example_id, origin, method)]
        except KeyError:
            raise KeyError(f"no {origin}/{method} PTs cached for example {example_id!r}") from None

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def example_ids(self, origin: str = TEACHER, method: str = "beam") -> set[str]:
        return {k[0] for k in self.entries if k[1] == origin and k[2] == method}

    def missing(self, examples: Iterable[ParallelExample], origin: str = TEACHER, method: str = "beam") -> list[str]:
        have = self.example_ids(origin, method)
        return [ex.id for ex in examples if ex.id not in have]

    def save_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for key in sorted(self.entries):
                for pt in self.entries[key]:
                    f.write(json.dumps(pt.to_json()) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "PTCache":
        pts = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if line.strip():
                    try:
                        pts.append(PseudoTarget.from_json(json.loads(line)))
                    except (KeyError, ValueError, TypeError) as e:
                        raise ValueError(f"{path}:{lineno}: malformed PT ({e})") from e
        cache = cls()
        cache.put(pts)
        return cache


def decode_config_for(method: str, beam_k: int = 16, num_samples: int = 48, nucleus_p: float = 0.95,
                      max_len: int = 32, seed: int = 0) -> DecodeConfig:
    if method == "beam":
        return DecodeConfig(BEAM, beam_k=beam_k, max_len=max_len, seed=seed)
    if method == "greedy":
        return DecodeConfig(GREEDY, max_len=max_len, seed=seed)
    if method == "sample":
        return DecodeConfig(SAMPLE, nucleus_p=nucleus_p, num_samples=num_samples, max_len=max_len, seed=seed)
    if method == "h_sample":
        return DecodeConfig(SAMPLE, nucleus_p=nucleus_p, temperature=HIGH_TEMPERATURE, num_samples=num_samples,
                            max_len=max_len, seed=seed)
    raise ValueError(f"unknown PT method {method!r}")


def teacher_topk(teacher, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], k: int = 5,
                 batch_size: int = 64) -> list[list[list[tuple[int, float]]]]:
    """Per-position top-k (token, logprob) of the teacher on given targets."""
    out = []
    with no_grad():
        for i in range(0, len(sources), batch_size):
            tr = teacher.forward(sources[i:i + batch_size], targets[i:i + batch_size])
            lp = np_log_softmax(tr.logits.data)
            top = np.argsort(-lp, axis=-1, kind="stable")[..., :k]
            for b, tgt in enumerate(targets[i:i + batch_size]):
                out.append([[(int(t), float(lp[b, j, t])) for t in top[b, j]] for j in range(len(tgt))])
    return out


def generate_teacher_pts(teacher, examples: Sequence[ParallelExample], encode_source, cfg: DecodeConfig,
                         method: str, batch_size: int = 32, with_topk: int = 0, origin: str = TEACHER) -> list[PseudoTarget]:
    """Generate PTs for every example (labels are never consulted).

    beam keeps all ``beam_k`` final beams; sampling methods draw
    ``num_samples`` sequences from per-example RNG streams.
    """
    pts: list[PseudoTarget] = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        srcs = [encode_source(ex.source) for ex in chunk]
        if cfg.method == BEAM:
            cands = [[t for t, _ in beams] for beams in beam_search_batch(teacher, srcs, cfg.beam_k, cfg.max_len)]
        elif cfg.method == GREEDY:
            from .decoding import greedy

            cands = [[t] for t in greedy(teacher, srcs, cfg.max_len)]
        else:
            S = cfg.num_samples
            rep = [s for s in srcs for _ in range(S)]
            seeds = [example_seed(cfg.seed, ex.id, j) for ex in chunk for j in range(S)]
            flat = sample_batch(teacher, rep, cfg.max_len, cfg.nucleus_p, cfg.temperature, seeds)
            cands = [flat[j * S:(j + 1) * S] for j in range(len(chunk))]
        topk = None
        if with_topk:
            flat_src = [s for s, c in zip(srcs, cands) for _ in c]
            flat_tgt = [t for c in cands for t in c]
            flat_topk = teacher_topk(teacher, flat_src, flat_tgt, with_topk)
            topk = iter(flat_topk)
        for ex, c in zip(chunk, cands):
            for j, toks in enumerate(c):
                pts.append(PseudoTarget(ex.id, origin, method, j, list(toks), next(topk) if topk else None))
    return pts


def pt_for_epoch(cache: PTCache, example_id: str, epoch: int, origin: str = TEACHER, method: str = "beam") -> PseudoTarget:
    """Round-robin: PT number ``epoch mod K``."""
    pts = cache.get(example_id, origin, method)
    return pts[epoch % len(pts)]


def generate_student_pts(student, sources: Sequence[Sequence[int]], keys: Sequence, step: int, nucleus_p: float = 0.95,
                         temperature: float = 1.0, max_len: int = 32, base_seed: int = 0) -> list[PseudoTarget]:
    """Sample one fresh PT per source from the current student (the training step salts the RNG)."""
    seeds = [example_seed(base_seed, k, step) for k in keys]
    toks = sample_batch(student, sources, max_len, nucleus_p, temperature, seeds)
    return [PseudoTarget(str(k), STUDENT, "sample", step, t) for k, t in zip(keys, toks)]


def generate_student_pt(student, example: ParallelExample, encode_source, cfg: DecodeConfig, step: int) -> PseudoTarget:
    return generate_student_pts(student, [encode_source(example.source)], [example.id], step, cfg.nucleus_p,
                                cfg.temperature, cfg.max_len, cfg.seed)[0]
