"""Next-token distributions and KL divergence between them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, kl_div, np_log_softmax


@dataclass(frozen=True)
class TokenDistribution:
    """Log-probabilities over a vocabulary at one decoding position."""

    logprobs: np.ndarray

    @classmethod
    def from_probs(cls, probs) -> "TokenDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(probs))

    @classmethod
    def from_logits(cls, logits) -> "TokenDistribution":
        return cls(np_log_softmax(np.asarray(logits, dtype=np.float64)))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def __len__(self):
        return self.logprobs.shape[-1]


def _as_probs(p) -> np.ndarray:
    if isinstance(p, TokenDistribution):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def kl_divergence(p, q) -> float | Tensor:
    """KL(p || q) = sum_i p_i (ln p_i - ln q_i), with 0 ln 0 taken as 0.

    ``q`` may be a logits ``Tensor``, in which case the result is a
    differentiable scalar tensor; otherwise a float is returned.
    """
    pp = _as_probs(p)
    if isinstance(q, Tensor):
        if q.shape[-1] != pp.shape[-1]:
            raise ValueError(f"vocabulary size mismatch: {pp.shape[-1]} vs {q.shape[-1]}")
        return kl_div(np.broadcast_to(pp, q.shape), q)
    if isinstance(q, TokenDistribution):
        lq = q.logprobs
    else:
        with np.errstate(divide="ignore"):
            lq = np.log(np.asarray(q, dtype=np.float64))
    if lq.shape[-1] != pp.shape[-1]:
        raise ValueError(f"vocabulary size mismatch: {pp.shape[-1]} vs {lq.shape[-1]}")
    pos = pp > 0
    lp = np.log(np.where(pos, pp, 1.0))
    return float(np.where(pos, pp * (lp - np.where(pos, lq, 0.0)), 0.0).sum())
