"""Autoregressive generation: greedy, beam search, nucleus/temperature sampling.

All strategies drive a *stepper*: any object with ``start(sources,
max_steps) -> (state, logprobs)``, ``step(state, tokens) -> logprobs``,
``reorder(state, idx) -> state`` and an ``eos_id`` attribute.
:class:`kdlab.model.Seq2SeqModel` is one; :class:`PrefixTableLM` is a tiny
table-driven one used for exhaustive checks.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import np_log_softmax, np_softmax

GREEDY, BEAM, SAMPLE = "greedy", "beam", "sample"


@dataclass
class DecodeConfig:
    method: str = GREEDY
    beam_k: int = 16
    nucleus_p: float = 0.95
    temperature: float = 1.0
    max_len: int = 32
    num_samples: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.method not in (GREEDY, BEAM, SAMPLE):
            raise ValueError(f"unknown decode method {self.method!r}")
        if self.beam_k < 1:
            raise ValueError("beam_k must be >= 1")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


HIGH_TEMPERATURE = 1.5


def apply_temperature(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return np.asarray(logits, dtype=np.float64) / tau


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def nucleus_sizes(sorted_probs: np.ndarray, p: float) -> np.ndarray:
    """Size of the smallest sorted prefix whose mass reaches ``p`` (per row)."""
    cum = np.cumsum(sorted_probs, axis=-1)
    k = (cum < p).sum(axis=-1) + 1
    return np.minimum(k, sorted_probs.shape[-1])


def nucleus_set(probs, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Token ids of the nucleus (most probable first) and their renormalised probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    k = int(nucleus_sizes(probs[order], p))
    kept = probs[order[:k]]
    return order[:k], kept / kept.sum()


def example_seed(base_seed: int, example_key, *salt: int) -> np.random.SeedSequence:
    """Independent RNG stream per example (and optional extra salts)."""
    if isinstance(example_key, str):
        example_key = zlib.crc32(example_key.encode("utf-8"))
    return np.random.SeedSequence([base_seed, int(example_key), *salt])


# greedy ------------------------------------------------------------------


def greedy(model, sources: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    state, lp = model.start(sources, max_steps=max_len)
    N = len(sources)
    out = [[] for _ in range(N)]
    done = np.zeros(N, bool)
    for t in range(max_len):
        tok = lp.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            out[i].append(int(tok[i]))
        done |= tok == model.eos_id
        if done.all() or t == max_len - 1:
            break
        lp = model.step(state, np.where(done, model.eos_id, tok))
    return out


def greedy_continue(model, sources: Sequence[Sequence[int]], prefixes: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Force each row's prefix, then continue greedily up to ``max_len`` tokens in total.

    A prefix that already ends in EOS is returned unchanged.
    """
    state, lp = model.start(sources, max_steps=max_len)
    N = len(sources)
    out = [[] for _ in range(N)]
    done = np.zeros(N, bool)
    for t in range(max_len):
        tok = lp.argmax(axis=-1)
        for i, pre in enumerate(prefixes):
            if t < len(pre):
                tok[i] = pre[t]
        for i in np.flatnonzero(~done):
            out[i].append(int(tok[i]))
        done |= tok == model.eos_id
        if done.all() or t == max_len - 1:
            break
        lp = model.step(state, np.where(done, model.eos_id, tok))
    return out


# beam search -------------------------------------------------------------


def beam_search_batch(model, sources: Sequence[Sequence[int]], beam_k: int, max_len: int) -> list[list[tuple[list[int], float]]]:
    """Beam search over a batch; every final beam is kept.

    Scores are raw summed log-probabilities. Finished beams stay in the pool
    and compete with live expansions. Each result list is sorted by
    decreasing score, ties broken by the token sequence (lower ids first).
    """
    if beam_k < 1:
        raise ValueError("beam_k must be >= 1")
    B, K = len(sources), beam_k
    state, lp = model.start(sources, max_steps=max_len)
    V = lp.shape[-1]
    state = model.reorder(state, np.repeat(np.arange(B), K))
    lp = np.repeat(lp, K, axis=0)
    scores = np.full((B, K), -np.inf)
    scores[:, 0] = 0.0
    finished = np.zeros((B, K), bool)
    tokens = np.zeros((B, K, max_len), dtype=np.int64)
    lengths = np.zeros((B, K), dtype=np.int64)
    rows = np.arange(B)[:, None]
    for t in range(max_len):
        valid = np.isfinite(scores)
        live = valid & ~finished
        expand = np.where(live[:, :, None], scores[:, :, None] + lp.reshape(B, K, V), -np.inf)
        keep = np.where(finished & valid, scores, -np.inf)
        cand = np.concatenate([keep, expand.reshape(B, K * V)], axis=1)
        pick = np.argsort(-cand, axis=1, kind="stable")[:, :K]
        new_scores = np.take_along_axis(cand, pick, axis=1)
        from_fin = pick < K
        parent = np.where(from_fin, pick, (pick - K) // V)
        tok = np.where(from_fin, model.eos_id, (pick - K) % V)
        tokens = tokens[rows, parent]
        lengths = lengths[rows, parent]
        finished = finished[rows, parent]
        grow = ~from_fin & np.isfinite(new_scores)
        tokens[grow, lengths[grow]] = tok[grow]
        lengths = lengths + grow
        finished = finished | (grow & (tok == model.eos_id))
        scores = new_scores
        valid = np.isfinite(scores)
        if not (valid & ~finished).any() or t == max_len - 1:
            break
        flat_parent = (np.arange(B)[:, None] * K + parent).reshape(-1)
        state = model.reorder(state, flat_parent)
        lp = model.step(state, tok.reshape(-1))
    results = []
    for b in range(B):
        beams = [(tokens[b, k, : lengths[b, k]].tolist(), float(scores[b, k])) for k in range(K) if np.isfinite(scores[b, k])]
        beams.sort(key=lambda x: (-x[1], x[0]))
        results.append(beams)
    return results


def beam_search(model, source: Sequence[int], cfg: DecodeConfig) -> list[tuple[list[int], float]]:
    return beam_search_batch(model, [source], cfg.beam_k, cfg.max_len)[0]


# sampling ----------------------------------------------------------------


def sample_batch(model, sources: Sequence[Sequence[int]], max_len: int, nucleus_p: float = 1.0,
                 temperature: float = 1.0, seeds: Sequence | None = None,
                 on_step: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None) -> list[list[int]]:
    """Temperature-then-nucleus sampling; one independent RNG stream per row.

    ``on_step(probs, nucleus_k, chosen_rank)`` is an optional debug hook that
    sees every step's sorted probabilities.
    """
    N = len(sources)
    if seeds is None:
        seeds = range(N)
    rngs = [np.random.default_rng(s) for s in seeds]
    state, lp = model.start(sources, max_steps=max_len)
    out = [[] for _ in range(N)]
    done = np.zeros(N, bool)
    for t in range(max_len):
        probs = np_softmax(apply_temperature(lp, temperature))
        order = np.argsort(-probs, axis=-1, kind="stable")
        sp = np.take_along_axis(probs, order, axis=-1)
        k = nucleus_sizes(sp, nucleus_p)
        cum = np.cumsum(sp, axis=-1)
        total = cum[np.arange(N), k - 1]
        u = np.array([r.random() for r in rngs]) * total
        rank = np.minimum((cum <= u[:, None]).sum(axis=-1), k - 1)
        if on_step is not None:
            on_step(sp, k, rank)
        tok = order[np.arange(N), rank]
        for i in np.flatnonzero(~done):
            out[i].append(int(tok[i]))
        done |= tok == model.eos_id
        if done.all() or t == max_len - 1:
            break
        lp = model.step(state, np.where(done, model.eos_id, tok))
    return out


def nucleus_sample(model, source: Sequence[int], cfg: DecodeConfig) -> list[int]:
    return sample_batch(model, [source], cfg.max_len, cfg.nucleus_p, cfg.temperature, seeds=[cfg.seed])[0]


def generate(model, sources: Sequence[Sequence[int]], cfg: DecodeConfig, keys: Sequence | None = None) -> list[list[list[int]]]:
    """Dispatch on ``cfg.method``; returns a list of candidate sequences per source."""
    if cfg.method == GREEDY:
        return [[s] for s in greedy(model, sources, cfg.max_len)]
    if cfg.method == BEAM:
        return [[toks for toks, _ in beams] for beams in beam_search_batch(model, sources, cfg.beam_k, cfg.max_len)]
    keys = list(range(len(sources))) if keys is None else list(keys)
    S = cfg.num_samples
    rep = [src for src in sources for _ in range(S)]
    seeds = [example_seed(cfg.seed, key, j) for key in keys for j in range(S)]
    flat = sample_batch(model, rep, cfg.max_len, cfg.nucleus_p, cfg.temperature, seeds)
    return [flat[i * S:(i + 1) * S] for i in range(len(sources))]


# table-driven stepper ----------------------------------------------------


class PrefixTableLM:
    """Next-token log-probs looked up from a table keyed by the generated prefix.

    ``table`` maps a tuple prefix to a logits vector; missing prefixes fall
    back to ``default`` logits. Used to check decoders against enumeration.
    """

    def __init__(self, table: dict[tuple, np.ndarray], vocab_size: int, eos_id: int, default=None):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.default = np.zeros(vocab_size) if default is None else np.asarray(default, dtype=np.float64)

    def logprobs(self, prefix: tuple) -> np.ndarray:
        return np_log_softmax(self.table.get(tuple(prefix), self.default))

    def start(self, sources, max_steps=None):
        state = [() for _ in sources]
        return state, np.stack([self.logprobs(p) for p in state])

    def step(self, state, tokens):
        for i, t in enumerate(tokens):
            state[i] = state[i] + (int(t),)
        return np.stack([self.logprobs(p) for p in state])

    def reorder(self, state, idx):
        return [state[i] for i in idx]
