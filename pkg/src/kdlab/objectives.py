"""Distillation objectives.

Losses are summed over target positions and (when ``weights`` is given)
weighted per sequence; the trainer passes ``1 / examples_in_batch`` so the
result is a per-example mean. Teacher quantities always enter as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ForwardTrace, relation_logits
from .tensor import Tensor, kl_div, nll, np_log_softmax, np_softmax

FINETUNE, LOGITS, NOISY, ATT_REL = "finetune", "logits", "noisy", "att_rel"
OBJECTIVES = (FINETUNE, LOGITS, NOISY, ATT_REL)


@dataclass
class KDConfig:
    objective: str = LOGITS
    alpha: float = 0.5
    student_pt_fraction: float = 0.5
    joint_mode: str = "alternate"  # or "mixture": alpha-weighted sum every step
    noise_sigma: float = 0.1
    relation_layers: tuple[str, ...] = ("last_encoder", "last_decoder")
    relation_kinds: tuple[str, ...] = ("QQ", "KK", "VV")
    relation_heads: Optional[int] = None
    interpolate_ground_truth: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.student_pt_fraction <= 1.0:
            raise ValueError("student_pt_fraction must lie in [0, 1]")
        if self.joint_mode not in ("alternate", "mixture"):
            raise ValueError("joint_mode is 'alternate' or 'mixture'")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _teacher_logprobs(teacher) -> np.ndarray:
    if isinstance(teacher, ForwardTrace):
        return np_log_softmax(teacher.logits.data)
    return np.asarray(teacher, dtype=np.float64)


def logits_kd_loss(teacher, student_trace: ForwardTrace, mask: np.ndarray | None = None,
                   weights: np.ndarray | None = None) -> Tensor:
    """Sum over unmasked positions of KL(P_T || P_S).

    ``teacher`` is a teacher ForwardTrace on the same targets or its
    log-probabilities array [B, n, V].
    """
    lp = _teacher_logprobs(teacher)
    if lp.shape != student_trace.logits.shape:
        raise ValueError(f"trace shape mismatch: teacher {lp.shape} vs student {student_trace.logits.shape}")
    mask = student_trace.target_mask if mask is None else mask
    return kl_div(np.exp(lp), student_trace.logits, mask=mask, weights=weights)


def noisy_kd_loss(teacher, student_trace: ForwardTrace, sigma: float, seed, mask: np.ndarray | None = None,
                  weights: np.ndarray | None = None) -> Tensor:
    """Logits KD against teacher logits perturbed by i.i.d. N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    logits = teacher.logits.data if isinstance(teacher, ForwardTrace) else np.asarray(teacher, dtype=np.float64)
    if sigma > 0:
        logits = logits + np.random.default_rng(seed).normal(0.0, sigma, logits.shape)
    return logits_kd_loss(np_log_softmax(logits), student_trace, mask, weights)


def default_relation_heads(teacher_heads: int, student_heads: int) -> int:
    return math.gcd(teacher_heads, student_heads)


def _relation_pairs(teacher_trace: ForwardTrace, student_trace: ForwardTrace, layers: Sequence[str]):
    for name in layers:
        side = "encoder" if name == "last_encoder" else "decoder"
        t_layers = teacher_trace.encoder if side == "encoder" else teacher_trace.decoder
        s_layers = student_trace.encoder if side == "encoder" else student_trace.decoder
        if not t_layers or not s_layers:
            if side == "encoder" and not t_layers and not s_layers:
                continue  # decoder-only pair
            raise ValueError(f"relation layer {name} missing from a trace")
        yield name, t_layers[-1], s_layers[-1]


def att_rel_components(teacher_trace: ForwardTrace, student_trace: ForwardTrace, kinds=("QQ", "KK", "VV"),
                       layers=("last_encoder", "last_decoder"), relation_heads: int | None = None,
                       weights: np.ndarray | None = None) -> dict[str, Tensor]:
    """KL(teacher relation row || student relation row) summed over heads and rows, per (layer, kind)."""
    out = {}
    for name, t_st, s_st in _relation_pairs(teacher_trace, student_trace, layers):
        heads = relation_heads or default_relation_heads(t_st.heads, s_st.heads)
        for kind in kinds:
            t_scores, allowed = relation_logits(t_st, kind, heads)
            s_scores, s_allowed = relation_logits(s_st, kind, heads)
            if t_scores.shape != s_scores.shape:
                raise ValueError(f"incompatible relation shapes {t_scores.shape} vs {s_scores.shape}")
            allowed = np.broadcast_to(allowed, t_scores.shape)
            p = np.where(allowed, np_softmax(np.where(allowed, t_scores.data, -np.inf)), 0.0)
            rows = np.broadcast_to(t_st.key_mask[:, None, :], t_scores.shape[:-1])
            out[f"{name}.{kind}"] = kl_div(p, s_scores, mask=rows, support=allowed, weights=weights)
    return out


def att_rel_kd_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace, cfg: KDConfig | None = None,
                    scales: dict[str, float] | None = None, weights: np.ndarray | None = None) -> Tensor:
    """Scaled sum of the relation KL components (add the logits KD term separately)."""
    cfg = cfg or KDConfig(objective=ATT_REL)
    comps = att_rel_components(teacher_trace, student_trace, cfg.relation_kinds, cfg.relation_layers,
                               cfg.relation_heads, weights)
    total: Tensor | float = 0.0
    for key, val in comps.items():
        total = val * (scales.get(key, 1.0) if scales else 1.0) + total
    return total if isinstance(total, Tensor) else Tensor(0.0)


@dataclass
class ComponentScaler:
    """Fixes per-component weights so every component starts at magnitude 1."""

    scales: dict[str, float] = field(default_factory=dict)

    def update(self, components: dict[str, float]) -> dict[str, float]:
        for k, v in components.items():
            if k not in self.scales:
                self.scales[k] = 1.0 / v if v > 1e-12 else 1.0
        return self.scales


def interpolated_loss(loss_fn: Callable, x, y, pt):
    """loss(x, pt) + loss(x, y) for labeled inputs, loss(x, pt) alone otherwise."""
    if y is None and pt is None:
        raise ValueError("need a ground-truth target or a pseudo-target")
    if pt is None:
        return loss_fn(x, y)
    if y is None:
        return loss_fn(x, pt)
    return loss_fn(x, pt) + loss_fn(x, y)


@dataclass
class ScoredTarget:
    """A target sequence plus the teacher's log-probs on it ([n, V]), if rescored."""

    tokens: list[int]
    teacher_logprobs: Optional[np.ndarray] = None


def _log_loss(student, source, target: ScoredTarget) -> Tensor:
    trace = student.forward([source], [target.tokens])
    return logits_kd_loss(target.teacher_logprobs[None], trace)


def joint_teaching_loss(student, source, teacher_pt: ScoredTarget, student_pt: ScoredTarget, alpha: float = 0.5):
    """alpha * L_Log(x, teacher PT) + (1 - alpha) * L_Log(x, student PT)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if teacher_pt.teacher_logprobs is None:
        raise ValueError("teacher PT lacks teacher log-probs")
    if student_pt.teacher_logprobs is None:
        raise ValueError("student PT was not rescored by the teacher")
    terms = []
    if alpha > 0:
        terms.append(_log_loss(student, source, teacher_pt) * alpha)
    if alpha < 1:
        terms.append(_log_loss(student, source, student_pt) * (1.0 - alpha))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def nll_loss(student_trace: ForwardTrace, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    return nll(student_trace.logits, targets, student_trace.target_mask, weights)
