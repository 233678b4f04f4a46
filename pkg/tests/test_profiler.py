import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdlab.model import DECODER_ONLY, ENCODER_DECODER, ModelConfig, Seq2SeqModel, prune_layers
from kdlab.profiler import (ComplexityReport, LatencyStats, absolute_macs, activation_bytes, fixed_length_generate,
                            max_batch, measure_latency, measure_throughput, measured_macs, profile_model,
                            pruning_savings, read_csv, theoretical_cost, write_csv)


def small(arch=ENCODER_DECODER, E=2, D=2, d=16):
    return ModelConfig(arch=arch, E=E if arch == ENCODER_DECODER else 0, D=D, d_model=d, heads=2, d_ff=2 * d,
                       vocab_size=20, max_len=64)


class TestTheoreticalCost:
    def test_fixture(self):
        assert theoretical_cost((ENCODER_DECODER, 2, 2), 8, 4) == 224
        assert theoretical_cost((DECODER_ONLY, 0, 2), 8, 4) == 224

    def test_pruning_fixture(self):
        # m=8, n=4: encoder layer costs m^2 = 64, decoder layer n(m+n) = 48
        assert pruning_savings(8, 4, 2, 2) == (64, 48)
        # a decoder-only layer carries the input term too
        do_saving = theoretical_cost((DECODER_ONLY, 0, 2), 8, 4) - theoretical_cost((DECODER_ONLY, 0, 1), 8, 4)
        assert do_saving == 112

    def test_no_output(self):
        assert theoretical_cost((ENCODER_DECODER, 3, 5), 7, 0) == 7 * 7 * 3

    def test_grid_equality(self):
        for m, n, L in itertools.product(range(1, 33), range(1, 33), range(1, 7)):
            assert theoretical_cost((ENCODER_DECODER, L, L), m, n) == theoretical_cost((DECODER_ONLY, 0, L), m, n)

    def test_accepts_config(self):
        assert theoretical_cost(small(), 8, 4) == 224

    def test_bad_input(self):
        with pytest.raises(ValueError):
            theoretical_cost((ENCODER_DECODER, 1, 1), 0, 3)
        with pytest.raises(ValueError):
            theoretical_cost(("rnn", 1, 1), 2, 3)

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6), st.integers(1, 6))
    def test_strictly_increasing(self, m, n, E, D):
        c = theoretical_cost((ENCODER_DECODER, E, D), m, n)
        assert theoretical_cost((ENCODER_DECODER, E, D), m + 1, n) > c
        assert theoretical_cost((ENCODER_DECODER, E, D), m, n + 1) > c
        assert theoretical_cost((ENCODER_DECODER, E + 1, D), m, n) > c
        assert theoretical_cost((ENCODER_DECODER, E, D + 1), m, n) > c

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(2, 6), st.integers(2, 6), st.integers(1, 1))
    def test_decoder_pruning_dominates(self, m, n, E, D, delta):
        enc, dec = pruning_savings(m, n, E, D, delta)
        assert (dec > enc) == (n * (m + n) > m * m)


class TestMacs:
    @pytest.mark.parametrize("arch", [ENCODER_DECODER, DECODER_ONLY])
    @pytest.mark.parametrize("m,n", [(8, 4), (5, 10), (12, 3), (1, 1), (20, 20)])
    def test_instrumented_matches_formula(self, arch, m, n):
        cfg = small(arch)
        got = measured_macs(Seq2SeqModel(cfg), [4 + i % 16 for i in range(m)], n)
        want = absolute_macs(cfg, m, n)
        assert abs(got - want) / want < 0.10


class TestLatency:
    def test_stats(self):
        s = measure_latency(Seq2SeqModel(small()), [4, 5, 6], n=3, warmup=2, runs=20)
        assert s.runs == 20 and s.mean_ms > 0 and s.sd_ms >= 0
        assert LatencyStats(2.0, 0.5, 3).cv == 0.25

    def test_fixed_length(self):
        out = fixed_length_generate(Seq2SeqModel(small(), seed=1), [[4, 5], [6, 7, 8]], 6)
        assert out.shape == (2, 6)
        assert not (out == 2).any()

    def test_decoder_pruning_is_faster(self):
        full = Seq2SeqModel(small(E=4, D=4, d=32))
        pruned = prune_layers(full, "decoder")
        src = [4, 5, 6, 7]
        lat_full = measure_latency(full, src, n=16, warmup=3, runs=30).mean_ms
        lat_pruned = measure_latency(pruned, src, n=16, warmup=3, runs=30).mean_ms
        assert lat_pruned < lat_full


class TestThroughput:
    def test_memory_error(self):
        with pytest.raises(MemoryError):
            max_batch(small(), 8, 4, memory_budget=16)
        with pytest.raises(MemoryError):
            measure_throughput(Seq2SeqModel(small()), [[4, 5]], 3, memory_budget=16)

    def test_max_batch_fits(self):
        cfg = small()
        budget = 2 << 20
        b = max_batch(cfg, 8, 4, budget)
        assert activation_bytes(cfg, b, 8, 4) <= budget < activation_bytes(cfg, b + 1, 8, 4)

    def test_activation_bytes_monotone(self):
        cfg = small()
        vals = [activation_bytes(cfg, b, 8, 4) for b in range(1, 20)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_batch_one_consistent_with_latency(self):
        model = Seq2SeqModel(small())
        thr, bs = measure_throughput(model, [[4, 5, 6]], 4, memory_budget=1 << 30, batch_size=1, repeats=5)
        lat = measure_latency(model, [4, 5, 6], n=4, warmup=3, runs=20).mean_ms
        assert bs == 1
        assert 0.3 < thr / (60000.0 / lat) < 3.0

    def test_batching_helps(self):
        model = Seq2SeqModel(small())
        one, _ = measure_throughput(model, [[4, 5, 6]], 4, memory_budget=1 << 30, batch_size=1)
        many, _ = measure_throughput(model, [[4, 5, 6]], 4, memory_budget=1 << 30, batch_size=32)
        assert many > one


class TestReport:
    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ComplexityReport("x", 1, 1, 10, 10, -1.0, 0.0, 1.0)

    def test_csv_round_trip(self, tmp_path):
        model = Seq2SeqModel(small())
        rep = profile_model("student", model, [4, 5, 6], 3, warmup=1, runs=3)
        assert rep.params == model.num_parameters()
        path = tmp_path / "c.csv"
        write_csv([rep, rep], path)
        header = path.read_text().splitlines()[0]
        assert header == "model,m,n,params,flops,latency_ms,latency_sd,throughput_per_min"
        back = read_csv(path)
        assert back[0] == rep and len(back) == 2

    def test_flops_positive(self):
        assert np.all([absolute_macs(small(), m, n) > 0 for m in (1, 5) for n in (0, 3)])
