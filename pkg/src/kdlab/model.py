"""Pre-LN transformer generators: encoder-decoder and decoder-only.

Two execution paths share one parameter store:

* ``forward`` runs teacher forcing through the autodiff engine and returns a
  :class:`ForwardTrace` (logits plus per-layer Q/K/V and hidden states).
* ``start``/``step``/``reorder`` run cached incremental decoding in plain
  numpy; this is what the decoding strategies drive.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .tensor import Tensor

NEG = -1e9

ENCODER_DECODER = "encoder_decoder"
DECODER_ONLY = "decoder_only"


@dataclass
class ModelConfig:
    arch: str = ENCODER_DECODER
    E: int = 2
    D: int = 2
    d_model: int = 64
    heads: int = 2
    d_ff: int = 256
    vocab_size: int = 32
    max_len: int = 64
    dropout: float = 0.0
    tie_embeddings: bool = True
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_id: int = 3

    def __post_init__(self):
        if self.arch not in (ENCODER_DECODER, DECODER_ONLY):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.arch == DECODER_ONLY and self.E != 0:
            raise ValueError("decoder_only models have E=0")
        if self.arch == ENCODER_DECODER and self.E < 1:
            raise ValueError("encoder_decoder needs E >= 1")
        if self.D < 1:
            raise ValueError("D must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerStates:
    q: Tensor
    k: Tensor
    v: Tensor
    hidden: Tensor
    key_mask: np.ndarray  # [B, T] true where the position is real
    causal: bool
    heads: int = 1


@dataclass
class ForwardTrace:
    logits: Tensor  # [B, n, V]
    target_mask: np.ndarray  # [B, n]
    encoder: list[LayerStates] = field(default_factory=list)
    decoder: list[LayerStates] = field(default_factory=list)

    @property
    def log_probs(self) -> np.ndarray:
        return T.np_log_softmax(self.logits.data)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    n = max((len(s) for s in seqs), default=0) if length is None else length
    out = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _np_ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


_MAC_COUNT: list[int] | None = None


@contextmanager
def count_macs():
    """Count multiply-accumulates of the inference path (start/step) inside the block.

    Yields a one-element list whose value grows as matmuls run.
    """
    global _MAC_COUNT
    prev, _MAC_COUNT = _MAC_COUNT, [0]
    try:
        yield _MAC_COUNT
    finally:
        _MAC_COUNT = prev


def _mm(a, b):
    out = a @ b
    if _MAC_COUNT is not None:
        _MAC_COUNT[0] += out.size * a.shape[-1]
    return out


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(T._GELU_C * x * (1.0 + 0.044715 * x * x)))


class Seq2SeqModel:
    """Parameter store plus both execution paths."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pos = sinusoidal_table(config.max_len + 1, config.d_model)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        for k, v in params.items():
            self.params[k] = T.parameter(np.array(v, dtype=np.float64), name=k)

    # construction ------------------------------------------------------

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        c = self.config
        d, f = c.d_model, c.d_ff
        p: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out, scale=1.0):
            p[name + ".w"] = rng.normal(0.0, scale / math.sqrt(fan_in), (fan_in, fan_out))
            p[name + ".b"] = np.zeros(fan_out)

        def ln(name):
            p[name + ".g"] = np.ones(d)
            p[name + ".b"] = np.zeros(d)

        def attn(name):
            for part in ("q", "k", "v"):
                lin(f"{name}.{part}", d, d)
            lin(f"{name}.o", d, d, scale=1.0 / math.sqrt(2 * max(c.E + c.D, 1)))

        def ffn(name):
            lin(f"{name}.ff1", d, f)
            lin(f"{name}.ff2", f, d, scale=1.0 / math.sqrt(2 * max(c.E + c.D, 1)))

        p["embed"] = rng.normal(0.0, 1.0 / math.sqrt(d), (c.vocab_size, d))
        for i in range(c.E):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.sa")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}")
        if c.E:
            ln("enc.ln")
        for i in range(c.D):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.sa")
            if c.arch == ENCODER_DECODER:
                ln(f"dec.{i}.ln2")
                attn(f"dec.{i}.ca")
            ln(f"dec.{i}.ln3")
            ffn(f"dec.{i}")
        ln("dec.ln")
        if not c.tie_embeddings:
            p["out.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.vocab_size))
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise KeyError("parameter names differ from model")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].data[...] = v

    def clone(self) -> "Seq2SeqModel":
        return Seq2SeqModel(copy.deepcopy(self.config), params=self.state_dict())

    def save(self, path, extra: dict | None = None):
        save_tensors(path, self.state_dict(), config=self.config.to_dict(), extra=extra)

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        tensors, manifest = load_tensors(path)
        return cls(ModelConfig(**manifest["config"]), params=tensors)

    @property
    def bos_id(self):
        return self.config.bos_id

    @property
    def eos_id(self):
        return self.config.eos_id

    @property
    def vocab_size(self):
        return self.config.vocab_size

    # teacher-forced path ----------------------------------------------

    def _w(self, name) -> Tensor:
        return self.params[name]

    def _embed(self, ids: np.ndarray, pos_ids: np.ndarray, train, rng) -> Tensor:
        c = self.config
        x = T.embedding(self._w("embed"), ids) * math.sqrt(c.d_model) + self._pos[pos_ids]
        return T.dropout(x, c.dropout, rng, train)

    def _mha(self, name, xq: Tensor, xkv: Tensor, mask_add: np.ndarray):
        c = self.config
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        h, dh = c.heads, c.d_head
        q = T.linear(xq, self._w(name + ".q.w"), self._w(name + ".q.b"))
        k = T.linear(xkv, self._w(name + ".k.w"), self._w(name + ".k.b"))
        v = T.linear(xkv, self._w(name + ".v.w"), self._w(name + ".v.b"))
        qh = T.transpose(T.reshape(q, (B, Tq, h, dh)), (0, 2, 1, 3))
        kh = T.transpose(T.reshape(k, (B, Tk, h, dh)), (0, 2, 3, 1))
        vh = T.transpose(T.reshape(v, (B, Tk, h, dh)), (0, 2, 1, 3))
        scores = T.matmul(qh, kh) * (1.0 / math.sqrt(dh)) + mask_add
        attn = T.softmax(scores, axis=-1)
        o = T.reshape(T.transpose(T.matmul(attn, vh), (0, 2, 1, 3)), (B, Tq, d))
        return T.linear(o, self._w(name + ".o.w"), self._w(name + ".o.b")), (q, k, v)

    def _ln(self, name, x):
        return T.layer_norm(x, self._w(name + ".g"), self._w(name + ".b"))

    def _ffn(self, name, x):
        hdn = T.gelu(T.linear(x, self._w(name + ".ff1.w"), self._w(name + ".ff1.b")))
        return T.linear(hdn, self._w(name + ".ff2.w"), self._w(name + ".ff2.b"))

    def _logits(self, h: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            return T.matmul(h, T.transpose(self._w("embed"), (1, 0)))
        return T.matmul(h, self._w("out.w"))

    def _check_ids(self, *arrays):
        V = self.config.vocab_size
        for a in arrays:
            if a.size and (a.min() < 0 or a.max() >= V):
                raise ValueError("token id out of vocabulary")

    def encode(self, src: np.ndarray, src_mask: np.ndarray, train=False, rng=None):
        """Encoder pass on padded ids; returns (memory, per-layer states)."""
        c = self.config
        B, m = src.shape
        pos = np.broadcast_to(np.arange(m), (B, m))
        x = self._embed(src, pos, train, rng)
        mask_add = np.where(src_mask, 0.0, NEG)[:, None, None, :]
        layers = []
        for i in range(c.E):
            n = f"enc.{i}"
            hx = self._ln(n + ".ln1", x)
            a, (q, k, v) = self._mha(n + ".sa", hx, hx, mask_add)
            x = x + T.dropout(a, c.dropout, rng, train)
            x = x + T.dropout(self._ffn(n, self._ln(n + ".ln2", x)), c.dropout, rng, train)
            layers.append(LayerStates(q, k, v, x, src_mask, causal=False, heads=c.heads))
        return self._ln("enc.ln", x), layers

    def forward(self, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardTrace:
        """Teacher-forced logits for every target position.

        Row ``i`` of the logits scores ``targets[b][i]`` given the source and
        ``targets[b][:i]``.
        """
        c = self.config
        if train and c.dropout > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        tgt, tgt_mask = pad_batch(targets, c.pad_id)
        B, n = tgt.shape
        if c.arch == DECODER_ONLY:
            return self._forward_decoder_only(sources, tgt, tgt_mask, train, rng)
        src, src_mask = pad_batch(sources, c.pad_id)
        if src.shape[1] > c.max_len or n > c.max_len:
            raise ValueError(f"sequence longer than max_len={c.max_len}")
        if not src_mask.any(axis=1).all():
            raise ValueError("empty source sequence")
        self._check_ids(src, tgt)
        memory, enc_layers = self.encode(src, src_mask, train, rng)
        dec_in = np.concatenate([np.full((B, 1), c.bos_id), tgt[:, :-1]], axis=1)
        pos = np.broadcast_to(np.arange(n), (B, n))
        x = self._embed(dec_in, pos, train, rng)
        causal = np.where(np.tril(np.ones((n, n), bool)), 0.0, NEG)[None, None]
        cross = np.where(src_mask, 0.0, NEG)[:, None, None, :]
        dec_layers = []
        for i in range(c.D):
            nm = f"dec.{i}"
            hx = self._ln(nm + ".ln1", x)
            a, (q, k, v) = self._mha(nm + ".sa", hx, hx, causal)
            x = x + T.dropout(a, c.dropout, rng, train)
            a2, _ = self._mha(nm + ".ca", self._ln(nm + ".ln2", x), memory, cross)
            x = x + T.dropout(a2, c.dropout, rng, train)
            x = x + T.dropout(self._ffn(nm, self._ln(nm + ".ln3", x)), c.dropout, rng, train)
            dec_layers.append(LayerStates(q, k, v, x, tgt_mask, causal=True, heads=c.heads))
        logits = self._logits(self._ln("dec.ln", x))
        return ForwardTrace(logits, tgt_mask, enc_layers, dec_layers)

    def _forward_decoder_only(self, sources, tgt, tgt_mask, train, rng) -> ForwardTrace:
        c = self.config
        B, n = tgt.shape
        src_lens = [len(s) for s in sources]
        if min(src_lens) < 1:
            raise ValueError("empty source sequence")
        seqs = []
        for s, t, tm in zip(sources, tgt, tgt_mask):
            real = list(t[tm])
            seqs.append(list(s) + [c.sep_id] + real[:-1] if real else list(s) + [c.sep_id])
        ids, mask = pad_batch(seqs, c.pad_id)
        L = ids.shape[1]
        if max(src_lens) + n + 1 > c.max_len:
            raise ValueError(f"source+target longer than max_len={c.max_len}")
        self._check_ids(ids, tgt)
        pos = np.broadcast_to(np.arange(L), (B, L))
        x = self._embed(ids, pos, train, rng)
        causal = np.where(np.tril(np.ones((L, L), bool)), 0.0, NEG)[None, None]
        layers = []
        for i in range(c.D):
            nm = f"dec.{i}"
            hx = self._ln(nm + ".ln1", x)
            a, (q, k, v) = self._mha(nm + ".sa", hx, hx, causal)
            x = x + T.dropout(a, c.dropout, rng, train)
            x = x + T.dropout(self._ffn(nm, self._ln(nm + ".ln3", x)), c.dropout, rng, train)
            layers.append(LayerStates(q, k, v, x, mask, causal=True, heads=c.heads))
        hidden = self._ln("dec.ln", x)
        rows = np.array(src_lens)[:, None] + np.arange(n)[None, :]
        rows = np.minimum(rows, L - 1)
        picked = T.getitem(hidden, (np.arange(B)[:, None], rows))
        # loss is computed only on target positions: the source segment never gets a row here
        return ForwardTrace(self._logits(picked), tgt_mask, [], layers)

    # incremental path -------------------------------------------------

    def _p(self, name) -> np.ndarray:
        return self.params[name].data

    def _np_attn_proj(self, name, x):
        return _mm(x, self._p(name + ".w")) + self._p(name + ".b")

    def _np_heads(self, x):
        N, L, _ = x.shape
        return x.reshape(N, L, self.config.heads, self.config.d_head).transpose(0, 2, 1, 3)

    def _np_logits(self, h):
        if self.config.tie_embeddings:
            return _mm(h, self._p("embed").T)
        return _mm(h, self._p("out.w"))

    def _np_embed(self, ids, pos):
        return self._p("embed")[ids] * math.sqrt(self.config.d_model) + self._pos[pos]

    def _np_ffn(self, name, x):
        return self._np_attn_proj(name + ".ff2", _np_gelu(self._np_attn_proj(name + ".ff1", x)))

    def start(self, sources: Sequence[Sequence[int]], max_steps: int | None = None):
        """Prepare a cached decoding state; returns ``(state, logprobs)`` for the first target token."""
        c = self.config
        max_steps = c.max_len if max_steps is None else max_steps
        if c.arch == DECODER_ONLY:
            return self._start_decoder_only(sources, max_steps)
        src, src_mask = pad_batch(sources, c.pad_id)
        if src.shape[1] > c.max_len:
            raise ValueError(f"source longer than max_len={c.max_len}")
        self._check_ids(src)
        N, m = src.shape
        x = self._np_embed(src, np.broadcast_to(np.arange(m), (N, m)))
        add = np.where(src_mask, 0.0, NEG)[:, None, None, :]
        scale = 1.0 / math.sqrt(c.d_head)
        for i in range(c.E):
            n = f"enc.{i}"
            hx = _np_ln(x, self._p(n + ".ln1.g"), self._p(n + ".ln1.b"))
            x = x + self._np_self_attn_full(n + ".sa", hx, add, scale)
            x = x + self._np_ffn(n, _np_ln(x, self._p(n + ".ln2.g"), self._p(n + ".ln2.b")))
        memory = _np_ln(x, self._p("enc.ln.g"), self._p("enc.ln.b"))
        state = DecodeState(
            self_k=[np.zeros((N, c.heads, max_steps, c.d_head)) for _ in range(c.D)],
            self_v=[np.zeros((N, c.heads, max_steps, c.d_head)) for _ in range(c.D)],
            key_valid=np.zeros((N, max_steps), bool),
            cross_k=[self._np_heads(self._np_attn_proj(f"dec.{i}.ca.k", memory)) for i in range(c.D)],
            cross_v=[self._np_heads(self._np_attn_proj(f"dec.{i}.ca.v", memory)) for i in range(c.D)],
            cross_add=add,
            next_pos=np.zeros(N, dtype=np.int64),
            filled=0,
        )
        return state, self.step(state, np.full(N, c.bos_id))

    def _np_self_attn_full(self, name, hx, add, scale):
        q = self._np_heads(self._np_attn_proj(name + ".q", hx))
        k = self._np_heads(self._np_attn_proj(name + ".k", hx))
        v = self._np_heads(self._np_attn_proj(name + ".v", hx))
        a = T.np_softmax(_mm(q, k.transpose(0, 1, 3, 2)) * scale + add)
        o = _mm(a, v).transpose(0, 2, 1, 3).reshape(hx.shape)
        return self._np_attn_proj(name + ".o", o)

    def _start_decoder_only(self, sources, max_steps):
        c = self.config
        seqs = [list(s) + [c.sep_id] for s in sources]
        if min(len(s) for s in seqs) < 2:
            raise ValueError("empty source sequence")
        N = len(seqs)
        P = max(len(s) for s in seqs)
        if P + max_steps > c.max_len + 1:
            max_steps = c.max_len + 1 - P
        ids = np.full((N, P), c.pad_id, dtype=np.int64)
        valid = np.zeros((N, P), bool)
        for i, s in enumerate(seqs):
            ids[i, P - len(s):] = s  # left padding
            valid[i, P - len(s):] = True
        self._check_ids(ids)
        pos = np.maximum(np.cumsum(valid, axis=1) - 1, 0)
        x = self._np_embed(ids, pos)
        causal = np.tril(np.ones((P, P), bool))[None, None] & valid[:, None, None, :]
        add = np.where(causal, 0.0, NEG)
        scale = 1.0 / math.sqrt(c.d_head)
        total = P + max_steps
        state = DecodeState(
            self_k=[np.zeros((N, c.heads, total, c.d_head)) for _ in range(c.D)],
            self_v=[np.zeros((N, c.heads, total, c.d_head)) for _ in range(c.D)],
            key_valid=np.concatenate([valid, np.zeros((N, max_steps), bool)], axis=1),
            cross_k=None, cross_v=None, cross_add=None,
            next_pos=valid.sum(axis=1).astype(np.int64),
            filled=P,
        )
        for i in range(c.D):
            n = f"dec.{i}"
            hx = _np_ln(x, self._p(n + ".ln1.g"), self._p(n + ".ln1.b"))
            q = self._np_heads(self._np_attn_proj(n + ".sa.q", hx))
            k = self._np_heads(self._np_attn_proj(n + ".sa.k", hx))
            v = self._np_heads(self._np_attn_proj(n + ".sa.v", hx))
            state.self_k[i][:, :, :P] = k
            state.self_v[i][:, :, :P] = v
            a = T.np_softmax(_mm(q, k.transpose(0, 1, 3, 2)) * scale + add)
            o = _mm(a, v).transpose(0, 2, 1, 3).reshape(x.shape)
            x = x + self._np_attn_proj(n + ".sa.o", o)
            x = x + self._np_ffn(n, _np_ln(x, self._p(n + ".ln3.g"), self._p(n + ".ln3.b")))
        h = _np_ln(x[:, -1], self._p("dec.ln.g"), self._p("dec.ln.b"))
        return state, T.np_log_softmax(self._np_logits(h))

    def step(self, state: "DecodeState", tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row; returns next-token log-probabilities [N, V]."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        t = state.filled
        if t >= state.key_valid.shape[1]:
            raise ValueError("decode state is full (max_len reached)")
        x = self._np_embed(tokens, np.minimum(state.next_pos, c.max_len))[:, None, :]
        state.key_valid[:, t] = True
        add = np.where(state.key_valid[:, : t + 1], 0.0, NEG)[:, None, None, :]
        scale = 1.0 / math.sqrt(c.d_head)
        for i in range(c.D):
            n = f"dec.{i}"
            hx = _np_ln(x, self._p(n + ".ln1.g"), self._p(n + ".ln1.b"))
            q = self._np_heads(self._np_attn_proj(n + ".sa.q", hx))
            state.self_k[i][:, :, t] = self._np_heads(self._np_attn_proj(n + ".sa.k", hx))[:, :, 0]
            state.self_v[i][:, :, t] = self._np_heads(self._np_attn_proj(n + ".sa.v", hx))[:, :, 0]
            k = state.self_k[i][:, :, : t + 1]
            v = state.self_v[i][:, :, : t + 1]
            a = T.np_softmax(_mm(q, k.transpose(0, 1, 3, 2)) * scale + add)
            o = _mm(a, v).transpose(0, 2, 1, 3).reshape(x.shape)
            x = x + self._np_attn_proj(n + ".sa.o", o)
            if c.arch == ENCODER_DECODER:
                hx = _np_ln(x, self._p(n + ".ln2.g"), self._p(n + ".ln2.b"))
                q = self._np_heads(self._np_attn_proj(n + ".ca.q", hx))
                a = T.np_softmax(_mm(q, state.cross_k[i].transpose(0, 1, 3, 2)) * scale + state.cross_add)
                o = _mm(a, state.cross_v[i]).transpose(0, 2, 1, 3).reshape(x.shape)
                x = x + self._np_attn_proj(n + ".ca.o", o)
            x = x + self._np_ffn(n, _np_ln(x, self._p(n + ".ln3.g"), self._p(n + ".ln3.b")))
        state.filled = t + 1
        state.next_pos = state.next_pos + 1
        h = _np_ln(x[:, 0], self._p("dec.ln.g"), self._p("dec.ln.b"))
        return T.np_log_softmax(self._np_logits(h))

    def reorder(self, state: "DecodeState", idx: np.ndarray) -> "DecodeState":
        return state.take(np.asarray(idx, dtype=np.int64))


@dataclass
class DecodeState:
    self_k: list
    self_v: list
    key_valid: np.ndarray
    cross_k: list | None
    cross_v: list | None
    cross_add: np.ndarray | None
    next_pos: np.ndarray
    filled: int

    def take(self, idx: np.ndarray) -> "DecodeState":
        return DecodeState(
            self_k=[k[idx] for k in self.self_k],
            self_v=[v[idx] for v in self.self_v],
            key_valid=self.key_valid[idx],
            cross_k=None if self.cross_k is None else [k[idx] for k in self.cross_k],
            cross_v=None if self.cross_v is None else [v[idx] for v in self.cross_v],
            cross_add=None if self.cross_add is None else self.cross_add[idx],
            next_pos=self.next_pos[idx],
            filled=self.filled,
        )


# structural pruning ------------------------------------------------------


def prune_layers(model: Seq2SeqModel, part: str, policy: str = "keep_first_last") -> Seq2SeqModel:
    """Copy of ``model`` keeping only the first and last layers of ``part``."""
    if policy != "keep_first_last":
        raise ValueError(f"unknown pruning policy {policy!r}")
    c = model.config
    if part == "encoder":
        prefix, count = "enc", c.E
    elif part == "decoder":
        prefix, count = "dec", c.D
    else:
        raise ValueError("part must be 'encoder' or 'decoder'")
    if count < 2:
        raise ValueError(f"{part} has {count} layer(s); need at least 2 to prune")
    keep = [0, count - 1]
    new_state = {}
    for name, val in model.state_dict().items():
        bits = name.split(".")
        if bits[0] == prefix and bits[1].isdigit():
            old = int(bits[1])
            if old not in keep:
                continue
            bits[1] = str(keep.index(old))
            new_state[".".join(bits)] = val
        else:
            new_state[name] = val
    cfg = replace(c, E=2) if part == "encoder" else replace(c, D=2)
    return Seq2SeqModel(cfg, params=new_state)


# attention relations -----------------------------------------------------


def relation_logits(states: LayerStates, kind: str, relation_heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-relation scores [B, A_r, T, T] and their row/column validity.

    Padded keys and (for causal layers) future keys are pushed to a large
    negative score so the row softmax ignores them.
    """
    s = {"QQ": states.q, "KK": states.k, "VV": states.v}[kind]
    B, L, d = s.shape
    if d % relation_heads:
        raise ValueError(f"hidden size {d} not divisible into {relation_heads} relation heads")
    dr = d // relation_heads
    sh = T.transpose(T.reshape(s, (B, L, relation_heads, dr)), (0, 2, 1, 3))
    scores = T.matmul(sh, T.transpose(sh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dr))
    allowed = np.broadcast_to(states.key_mask[:, None, None, :], (B, 1, L, L))
    if states.causal:
        allowed = allowed & np.tril(np.ones((L, L), bool))[None, None]
    return T.masked_fill(scores, ~allowed, NEG), allowed


def attention_relations(trace: ForwardTrace, layer: int, kind: str, relation_heads: int | None = None,
                        side: str = "decoder") -> np.ndarray:
    """Per-head relation distributions softmax(S S^T / sqrt(d_r)) for one layer."""
    layers = trace.decoder if side == "decoder" else trace.encoder
    if not -len(layers) <= layer < len(layers):
        raise IndexError(f"layer {layer} not in trace ({len(layers)} {side} layers)")
    st = layers[layer]
    if relation_heads is None:
        relation_heads = st.heads
    scores, _ = relation_logits(st, kind, relation_heads)
    return T.np_softmax(scores.data, axis=-1)
