import math

import numpy as np
import pytest

from kdlab import tensor as T
from kdlab.model import ForwardTrace
from kdlab.objectives import (ATT_REL, ComponentScaler, KDConfig, ScoredTarget, att_rel_components, att_rel_kd_loss,
                              default_relation_heads, interpolated_loss, joint_teaching_loss, logits_kd_loss,
                              nll_loss, noisy_kd_loss)
from oracles import central_diff, joint_linearity_error, kd_identity_losses, tiny_pair


def fake_trace(logits, mask=None):
    logits = np.asarray(logits, dtype=float)
    mask = np.ones(logits.shape[:-1], bool) if mask is None else mask
    return ForwardTrace(T.parameter(logits), mask)


def fixture(seed=0, arch="encoder_decoder"):
    rng = np.random.default_rng(seed)
    teacher, _ = tiny_pair(seed, arch)
    student, _ = tiny_pair(seed + 100, arch, heads=(2, 2))
    V = teacher.vocab_size
    srcs = [list(rng.integers(5, V, size=4)), list(rng.integers(5, V, size=2))]
    tgts = [list(rng.integers(5, V, size=3)) + [2], [int(rng.integers(5, V)), 2]]
    return teacher, student, srcs, tgts


class TestIdentities:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_copy_gives_zero(self, seed):
        for name, v in kd_identity_losses(seed).items():
            assert abs(v) <= 1e-9, name

    @pytest.mark.parametrize("seed", [0, 1])
    def test_joint_linear_in_alpha(self, seed):
        assert joint_linearity_error(seed) <= 1e-9


class TestLogitsKD:
    def test_known_value(self):
        teacher = np.log([[[0.5, 0.5]]])
        loss = logits_kd_loss(teacher, fake_trace(np.log([[[0.25, 0.75]]])))
        assert loss.item() == pytest.approx(0.14384, abs=5e-6)

    def test_masked_position(self):
        rng = np.random.default_rng(0)
        t, s = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 2, 4))
        full = logits_kd_loss(T.np_log_softmax(t), fake_trace(s)).item()
        first = logits_kd_loss(T.np_log_softmax(t[:, :1]), fake_trace(s[:, :1])).item()
        masked = logits_kd_loss(T.np_log_softmax(t), fake_trace(s, np.array([[True, False]]))).item()
        assert masked == pytest.approx(first) and masked < full

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            logits_kd_loss(np.zeros((1, 2, 3)), fake_trace(np.zeros((1, 3, 3))))

    def test_nonnegative_and_no_teacher_grad(self):
        teacher, student, srcs, tgts = fixture()
        tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        loss = logits_kd_loss(tt, st)
        assert loss.item() > 0
        loss.backward()
        assert all(p.grad is None for p in teacher.parameters())
        assert any(p.grad is not None for p in student.parameters())

    def test_student_gradient_finite_difference(self):
        teacher, student, srcs, tgts = fixture(3)
        with T.no_grad():
            lp = T.np_log_softmax(teacher.forward(srcs, tgts).logits.data)
        w = student.params["dec.1.ff2.w"]
        logits_kd_loss(lp, student.forward(srcs, tgts)).backward()
        auto = w.grad.copy()

        def f():
            with T.no_grad():
                return logits_kd_loss(lp, student.forward(srcs, tgts)).item()

        num = central_diff(f, w.data)
        assert np.linalg.norm(auto - num) / (np.linalg.norm(auto) + np.linalg.norm(num)) < 1e-5


class TestNoisyKD:
    def test_sigma_zero_exact(self):
        teacher, student, srcs, tgts = fixture()
        tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        assert noisy_kd_loss(tt, st, 0.0, 1).item() == logits_kd_loss(tt, st).item()

    def test_seeded_and_different(self):
        teacher, student, srcs, tgts = fixture()
        tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        a, b = noisy_kd_loss(tt, st, 0.1, 5).item(), noisy_kd_loss(tt, st, 0.1, 5).item()
        assert a == b and a != logits_kd_loss(tt, st).item()

    def test_monte_carlo_mean(self):
        teacher, student, srcs, tgts = fixture(1)
        with T.no_grad():
            tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        base = logits_kd_loss(tt, st).item()
        vals = [noisy_kd_loss(tt, st, 0.1, s).item() for s in range(1000)]
        assert abs(np.mean(vals) - base) <= 0.05 * base

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            noisy_kd_loss(np.zeros((1, 1, 2)), fake_trace(np.zeros((1, 1, 2))), -0.1, 0)


def naive_relation_kl(t_state, s_state, kind, heads):
    """Double loop over rows and keys."""
    tv = {"QQ": t_state.q, "KK": t_state.k, "VV": t_state.v}[kind].data
    sv = {"QQ": s_state.q, "KK": s_state.k, "VV": s_state.v}[kind].data
    B, L, _ = tv.shape
    total = 0.0
    for b in range(B):
        for a in range(heads):
            dt, ds = tv.shape[-1] // heads, sv.shape[-1] // heads
            for i in range(L):
                if not t_state.key_mask[b, i]:
                    continue
                keys = [j for j in range(L) if t_state.key_mask[b, j] and (not t_state.causal or j <= i)]
                st_ = np.array([tv[b, i, a * dt:(a + 1) * dt] @ tv[b, j, a * dt:(a + 1) * dt] / math.sqrt(dt) for j in keys])
                ss_ = np.array([sv[b, i, a * ds:(a + 1) * ds] @ sv[b, j, a * ds:(a + 1) * ds] / math.sqrt(ds) for j in keys])
                p = np.exp(st_ - st_.max())
                p /= p.sum()
                q = np.exp(ss_ - ss_.max())
                q /= q.sum()
                total += float((p * (np.log(p) - np.log(q))).sum())
    return total


class TestAttentionRelations:
    def test_gcd_heads(self):
        assert default_relation_heads(4, 2) == 2
        assert default_relation_heads(6, 4) == 2

    @pytest.mark.parametrize("kind", ["QQ", "KK", "VV"])
    def test_matches_naive_oracle(self, kind):
        teacher, student, srcs, tgts = fixture(2)
        tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        comps = att_rel_components(tt, st, kinds=(kind,))
        want_dec = naive_relation_kl(tt.decoder[-1], st.decoder[-1], kind, 2)
        want_enc = naive_relation_kl(tt.encoder[-1], st.encoder[-1], kind, 2)
        assert comps[f"last_decoder.{kind}"].item() == pytest.approx(want_dec, abs=1e-9)
        assert comps[f"last_encoder.{kind}"].item() == pytest.approx(want_enc, abs=1e-9)

    def test_length_one_decoder_is_zero(self):
        teacher, student, srcs, _ = fixture()
        tgts = [[2], [2]]
        tt, st = teacher.forward(srcs, tgts), student.forward(srcs, tgts)
        cfg = KDConfig(objective=ATT_REL, relation_layers=("last_decoder",))
        assert abs(att_rel_kd_loss(tt, st, cfg).item()) < 1e-12

    def test_decoder_only_pair_skips_encoder(self):
        teacher, student, srcs, tgts = fixture(0, "decoder_only")
        comps = att_rel_components(teacher.forward(srcs, tgts), student.forward(srcs, tgts))
        assert set(comps) == {"last_decoder.QQ", "last_decoder.KK", "last_decoder.VV"}

    def test_incompatible_heads(self):
        teacher, student, srcs, tgts = fixture()
        with pytest.raises(ValueError):
            att_rel_components(teacher.forward(srcs, tgts), student.forward(srcs, tgts), relation_heads=3)

    def test_scaler_starts_at_one(self):
        teacher, student, srcs, tgts = fixture()
        comps = att_rel_components(teacher.forward(srcs, tgts), student.forward(srcs, tgts))
        scales = ComponentScaler().update({k: v.item() for k, v in comps.items()})
        for k, v in comps.items():
            assert v.item() * scales[k] == pytest.approx(1.0)
        total = att_rel_kd_loss(teacher.forward(srcs, tgts), student.forward(srcs, tgts), scales=scales)
        assert total.item() == pytest.approx(len(comps))

    def test_scaler_is_fixed_after_first_call(self):
        sc = ComponentScaler()
        sc.update({"a": 4.0})
        assert sc.update({"a": 1.0})["a"] == 0.25


class TestInterpolationAndJoint:
    def test_interpolated(self):
        table = {"y": 1.2, "pt": 0.8}
        fn = lambda x, t: table[t]  # noqa: E731
        assert interpolated_loss(fn, None, "y", "pt") == pytest.approx(2.0)
        assert interpolated_loss(fn, None, None, "pt") == pytest.approx(0.8)
        with pytest.raises(ValueError):
            interpolated_loss(fn, None, None, None)

    def test_joint_boundaries_and_midpoint(self):
        teacher, student, srcs, tgts = fixture(4)
        src = srcs[0]
        lp = lambda toks: T.np_log_softmax(teacher.forward([src], [toks]).logits.data[0])  # noqa: E731
        t_pt, s_pt = ScoredTarget(tgts[0], lp(tgts[0])), ScoredTarget(tgts[1], lp(tgts[1]))
        only_t = logits_kd_loss(t_pt.teacher_logprobs[None], student.forward([src], [tgts[0]])).item()
        only_s = logits_kd_loss(s_pt.teacher_logprobs[None], student.forward([src], [tgts[1]])).item()
        assert joint_teaching_loss(student, src, t_pt, s_pt, 1.0).item() == pytest.approx(only_t)
        assert joint_teaching_loss(student, src, t_pt, s_pt, 0.0).item() == pytest.approx(only_s)
        assert joint_teaching_loss(student, src, t_pt, s_pt, 0.5).item() == pytest.approx(0.5 * (only_t + only_s))

    def test_joint_needs_rescoring(self):
        teacher, student, srcs, tgts = fixture()
        t_pt = ScoredTarget(tgts[0], np.zeros((len(tgts[0]), teacher.vocab_size)))
        with pytest.raises(ValueError):
            joint_teaching_loss(student, srcs[0], t_pt, ScoredTarget(tgts[1]), 0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KDConfig(alpha=1.5)
        with pytest.raises(ValueError):
            KDConfig(objective="distill")
        with pytest.raises(ValueError):
            KDConfig(joint_mode="both")

    def test_nll_loss_weights(self):
        tr = fake_trace(np.zeros((2, 1, 4)))
        assert nll_loss(tr, np.array([[1], [2]]), np.array([0.5, 0.5])).item() == pytest.approx(math.log(4))
