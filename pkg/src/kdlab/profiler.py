"""Inference cost: closed-form operation counts, latency and throughput.

Cost units count attention cells (query-key pairs) at fixed width:
``m^2 E + n (m + n) D`` for an encoder-decoder and ``m^2 D + n (m + n) D``
for a decoder-only model, with input length m and output length n.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import greedy
from .model import DECODER_ONLY, ENCODER_DECODER, ModelConfig, count_macs

CSV_COLUMNS = ("model", "m", "n", "params", "flops", "latency_ms", "latency_sd", "throughput_per_min")


def _layers(cfg) -> tuple[str, int, int]:
    if isinstance(cfg, ModelConfig):
        return cfg.arch, cfg.E, cfg.D
    arch, E, D = cfg
    return arch, E, D


def theoretical_cost(cfg, m: int, n: int) -> int:
    """Attention-cell count; ``cfg`` is a ModelConfig or an ``(arch, E, D)`` triple."""
    if m < 1 or n < 0:
        raise ValueError("need m >= 1 and n >= 0")
    arch, E, D = _layers(cfg)
    if arch == ENCODER_DECODER:
        return m * m * E + n * (m + n) * D
    if arch == DECODER_ONLY:
        return m * m * D + n * (m + n) * D
    raise ValueError(f"unknown architecture {arch!r}")


def pruning_savings(m: int, n: int, E: int, D: int, delta: int = 1) -> tuple[int, int]:
    """Cost saved by dropping ``delta`` encoder layers vs ``delta`` decoder layers."""
    full = theoretical_cost((ENCODER_DECODER, E, D), m, n)
    enc = full - theoretical_cost((ENCODER_DECODER, E - delta, D), m, n)
    dec = full - theoretical_cost((ENCODER_DECODER, E, D - delta), m, n)
    return enc, dec


def absolute_macs(cfg: ModelConfig, m: int, n: int) -> int:
    """Multiply-accumulates of one generation of n tokens from an m-token input.

    Attention cells (from ``theoretical_cost``) cost ``2 d`` each (scores and
    weighted values); every token position also pays its projections and FFN,
    and every generated token pays the output layer.
    """
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    cells = theoretical_cost(cfg, m, n)
    ffn = 2 * d * f
    if cfg.arch == ENCODER_DECODER:
        enc = m * cfg.E * (4 * d * d + ffn)
        dec = n * cfg.D * (4 * d * d + 2 * d * d + ffn) + cfg.D * 2 * m * d * d
        linear = enc + dec
    else:
        prefix = m + 1  # the separator rides with the input
        linear = (prefix + n - 1) * cfg.D * (4 * d * d + ffn)
    return 2 * d * cells + linear + n * d * V


def flops_forward(cfg: ModelConfig, m: int, n: int) -> int:
    return 2 * absolute_macs(cfg, m, n)


def measured_macs(model, source: Sequence[int], n: int) -> int:
    """Instrumented count over the cached decoding path, forcing exactly n steps."""
    with count_macs() as counter:
        state, _ = model.start([list(source)], max_steps=n)
        for _ in range(n - 1):
            model.step(state, np.array([model.config.bos_id + 4]))
    return counter[0]


@dataclass
class LatencyStats:
    mean_ms: float
    sd_ms: float
    runs: int

    @property
    def cv(self) -> float:
        return self.sd_ms / self.mean_ms if self.mean_ms > 0 else 0.0


def _timer_resolution() -> float:
    return time.get_clock_info("perf_counter").resolution


def fixed_length_generate(model, sources: Sequence[Sequence[int]], n: int):
    """Generate exactly n tokens per row (EOS is not allowed to stop early)."""
    state, lp = model.start(sources, max_steps=n)
    out = []
    for t in range(n):
        lp = lp.copy()
        lp[:, model.eos_id] = -np.inf
        tok = lp.argmax(axis=-1)
        out.append(tok)
        if t < n - 1:
            lp = model.step(state, tok)
    return np.stack(out, axis=1)


def measure_latency(model, source: Sequence[int], n: int | None = None, max_len: int = 32, warmup: int = 10,
                    runs: int = 100) -> LatencyStats:
    """Wall time of single-example generation: ``warmup`` untimed runs, then the mean of ``runs``.

    With ``n`` set, exactly n tokens are generated; otherwise greedy decoding
    stops at EOS or ``max_len``.
    """
    if _timer_resolution() > 1e-6:
        raise RuntimeError("timer resolution below 1 microsecond is unavailable")

    def once():
        if n is None:
            greedy(model, [source], max_len)
        else:
            fixed_length_generate(model, [source], n)

    for _ in range(warmup):
        once()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        once()
        times.append((time.perf_counter() - t0) * 1000.0)
    return LatencyStats(statistics.fmean(times), statistics.stdev(times) if runs > 1 else 0.0, runs)


def activation_bytes(cfg: ModelConfig, batch: int, m: int, n: int) -> int:
    """Peak bytes held by the cached decoding state plus one layer's working set (float64)."""
    d, h = cfg.d_model, cfg.heads
    if cfg.arch == ENCODER_DECODER:
        kv = 2 * cfg.D * batch * n * d + 2 * cfg.D * batch * m * d
        work = batch * (m * max(cfg.d_ff, 3 * d) + h * m * m)
    else:
        kv = 2 * cfg.D * batch * (m + 1 + n) * d
        work = batch * ((m + 1) * max(cfg.d_ff, 3 * d) + h * (m + 1) ** 2)
    return 8 * (kv + work + batch * cfg.vocab_size)


def max_batch(cfg: ModelConfig, m: int, n: int, memory_budget: int, cap: int = 4096) -> int:
    if activation_bytes(cfg, 1, m, n) > memory_budget:
        raise MemoryError("a single example exceeds the memory budget")
    lo, hi = 1, 1
    while hi < cap and activation_bytes(cfg, hi * 2, m, n) <= memory_budget:
        hi *= 2
    hi = min(hi * 2, cap)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if activation_bytes(cfg, mid, m, n) <= memory_budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def measure_throughput(model, sources: Sequence[Sequence[int]], n: int, memory_budget: int,
                       batch_size: int | None = None, repeats: int = 3) -> tuple[float, int]:
    """Examples per minute at the largest batch that fits ``memory_budget`` bytes.

    Returns ``(throughput_per_min, batch_size)``.
    """
    cfg = model.config
    m = max(len(s) for s in sources)
    bs = max_batch(cfg, m, n, memory_budget) if batch_size is None else batch_size
    if activation_bytes(cfg, bs, m, n) > memory_budget:
        raise MemoryError(f"batch {bs} exceeds the memory budget")
    batch = [list(sources[i % len(sources)]) for i in range(bs)]
    fixed_length_generate(model, batch, n)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fixed_length_generate(model, batch, n)
        best = min(best, time.perf_counter() - t0)
    return bs * 60.0 / best, bs


@dataclass
class ComplexityReport:
    model: str
    m: int
    n: int
    params: int
    flops: int
    latency_ms: float
    latency_sd: float
    throughput_per_min: float

    def __post_init__(self):
        for k in ("m", "n", "params", "flops", "latency_ms", "latency_sd", "throughput_per_min"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")

    def row(self) -> dict:
        return asdict(self)


def profile_model(name: str, model, source: Sequence[int], n: int, memory_budget: int = 64 << 20,
                  warmup: int = 10, runs: int = 100) -> ComplexityReport:
    lat = measure_latency(model, source, n=n, warmup=warmup, runs=runs)
    thr, _ = measure_throughput(model, [source], n, memory_budget)
    m = len(source)
    return ComplexityReport(name, m, n, model.num_parameters(), flops_forward(model.config, m, n),
                            lat.mean_ms, lat.sd_ms, thr)


def write_csv(reports: Sequence[ComplexityReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def read_csv(path) -> list[ComplexityReport]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    ints = {"m", "n", "params", "flops"}
    return [ComplexityReport(**{k: (int(v) if k in ints else v if k == "model" else float(v)) for k, v in r.items()})
            for r in rows]
