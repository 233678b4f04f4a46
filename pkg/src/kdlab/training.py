"""Generic training engine: batching, AdamW updates, dev evaluation, early stopping.

The engine knows nothing about distillation. Callers hand it a
``batch_loss(examples, epoch, step, rng) -> Tensor`` closure and a
``dev_score(model) -> float`` closure; it owns the schedule, checkpoint
selection and the audit counters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decoding import greedy
from .metrics import DIRECTIONS, MetricReport, perplexity, score_corpus
from .optim import AdamW, OptimizerConfig
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 96
    max_epochs: int = 192
    patience_epochs: int = 16
    evals_per_epoch: int = 2
    post_finetune_epochs: int = 10
    dev_metric: str = "bleu"
    dev_limit: int = 1000
    warmup_steps: int = 100
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.patience_epochs > self.max_epochs:
            raise ValueError("patience_epochs must not exceed max_epochs")
        if self.dev_metric not in DIRECTIONS:
            raise ValueError(f"dev metric {self.dev_metric!r} has no registered direction")
        if self.evals_per_epoch < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("evals_per_epoch, batch_size and max_epochs must be >= 1")

    @property
    def patience_evals(self) -> int:
        return self.patience_epochs * self.evals_per_epoch


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_dev_score: float | None = None
    best_step: int | None = None
    best_checkpoint_path: str | None = None
    evals_since_improvement: int = 0


@dataclass
class TrainResult:
    best_score: float
    best_step: int
    best_state: dict
    history: list[dict]
    audit: dict
    stopped_early: bool
    phase: str = "kd"


def better(a: float, b: float | None, metric: str) -> bool:
    """True when ``a`` strictly improves on ``b`` under the metric's direction."""
    if b is None:
        return True
    return a > b if DIRECTIONS[metric] else a < b


def eval_points(steps_per_epoch: int, evals_per_epoch: int) -> set[int]:
    """Update indices (1-based, within an epoch) after which dev evaluation runs."""
    k = min(evals_per_epoch, steps_per_epoch)
    return {max(1, round((i + 1) * steps_per_epoch / k)) for i in range(k)}


def fit(model, examples: Sequence, batch_loss: Callable, dev_score: Callable, cfg: TrainConfig,
        epochs: int | None = None, patience_evals: int | None = None, checkpoint_path=None,
        audit: dict | None = None, phase: str = "kd") -> TrainResult:
    """Train with early stopping; returns the best dev checkpoint (not applied to ``model``)."""
    epochs = cfg.max_epochs if epochs is None else epochs
    patience = cfg.patience_evals if patience_evals is None else patience_evals
    n = len(examples)
    if n == 0:
        raise ValueError("no training examples")
    spe = math.ceil(n / cfg.batch_size)
    total = epochs * spe
    opt = AdamW(model.parameters(), OptimizerConfig(cfg.learning_rate, total, cfg.weight_decay,
                                                    warmup_steps=min(cfg.warmup_steps, total)))
    points = eval_points(spe, cfg.evals_per_epoch)
    st = TrainState()
    history: list[dict] = []
    best_state = model.state_dict()
    stopped = False
    rng = np.random.default_rng([cfg.seed, 7])
    for epoch in range(epochs):
        st.epoch = epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for b in range(spe):
            batch = [examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(batch, epoch, st.step, rng)
            loss.backward()
            opt.step()
            st.step += 1
            if b + 1 in points:
                score = dev_score(model)
                improved = better(score, st.best_dev_score, cfg.dev_metric)
                history.append({"step": st.step, "epoch": epoch, "score": score, "loss": loss.item(), "phase": phase})
                log.info("%s epoch %d step %d loss %.4f dev %s %.4f%s", phase, epoch, st.step, loss.item(),
                         cfg.dev_metric, score, " *" if improved else "")
                if improved:
                    st.best_dev_score, st.best_step = score, st.step
                    st.evals_since_improvement = 0
                    best_state = model.state_dict()
                    if checkpoint_path is not None:
                        model.save(checkpoint_path, extra={"step": st.step, "dev_score": score, "phase": phase})
                        st.best_checkpoint_path = str(checkpoint_path)
                else:
                    st.evals_since_improvement += 1
                    if st.evals_since_improvement >= patience:
                        stopped = True
                        break
        if stopped:
            break
    return TrainResult(st.best_dev_score, st.best_step, best_state, history, dict(audit or {}), stopped, phase)


def keep_better(kd: TrainResult, ft: TrainResult, metric: str) -> TrainResult:
    """The final checkpoint comes from whichever phase scored better on dev (ties keep the KD one)."""
    return ft if better(ft.best_score, kd.best_score, metric) else kd


# evaluation --------------------------------------------------------------


def decode_texts(model, examples: Sequence, codec, max_len: int, batch_size: int = 128) -> list[str]:
    out = []
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            ids = greedy(model, [codec.encode_source(ex.source) for ex in chunk], max_len)
            out.extend(codec.decode(t) for t in ids)
    return out


def evaluate(model, examples: Sequence, codec, max_len: int, references: Sequence[str] | None = None,
             with_ppl: bool = True) -> MetricReport:
    """Greedy-decode and score; PPL uses the examples' ground truth."""
    refs = [ex.target for ex in examples] if references is None else list(references)
    hyps = decode_texts(model, examples, codec, max_len)
    ppl = perplexity(model, examples, codec) if with_ppl and references is None else None
    return score_corpus(hyps, refs, ppl)


def dev_scorer(examples: Sequence, codec, max_len: int, metric: str, limit: int = 1000,
               references: Sequence[str] | None = None) -> Callable:
    """Closure scoring at most ``limit`` dev predictions on ``metric``."""
    exs = list(examples)[:limit]
    refs = None if references is None else list(references)[:limit]

    def score(model) -> float:
        if metric == "ppl":
            return perplexity(model, exs, codec)
        return evaluate(model, exs, codec, max_len, refs, with_ppl=False).get(metric)

    return score


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
