"""The staged distillation study.

Stage recipes are plain data (``STAGES``). ``Study`` holds the dataset, the
codec and the model architectures, and runs any recipe: it fine-tunes the
baselines, generates and caches teacher pseudo-targets, distills, selects the
best dev checkpoint, fine-tunes it on the labeled data and keeps the better of
the two, then reports gap closure against the fine-tuned student.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DatasetSpec, ParallelExample, Splits, generate, load_splits, save_splits
from .decoding import example_seed, greedy_continue, greedy, sample_batch
from .metrics import GapReport, MetricReport, bleu, gap_report
from .model import DECODER_ONLY, ENCODER_DECODER, ModelConfig, Seq2SeqModel, prune_layers
from .objectives import ATT_REL, FINETUNE, LOGITS, NOISY, ComponentScaler, KDConfig, att_rel_components
from .pseudo_targets import (PTCache, TEACHER, decode_config_for, generate_teacher_pts,
                             pt_for_epoch)
from .tensor import Tensor, kl_div, nll, no_grad, np_log_softmax
from .tokenize_align import TextCodec
from .training import TrainConfig, TrainResult, dev_scorer, ensure_dir, evaluate, fit, keep_better

log = logging.getLogger(__name__)

REPORT_METRICS = ("bleu", "rouge_avg", "ppl")


@dataclass
class ArchSpec:
    """Model size without the data-dependent vocabulary and length."""

    arch: str = ENCODER_DECODER
    E: int = 2
    D: int = 2
    d_model: int = 64
    heads: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    tie_embeddings: bool = True

    def config(self, vocab_size: int, max_len: int) -> ModelConfig:
        E = 0 if self.arch == DECODER_ONLY else self.E
        return ModelConfig(self.arch, E, self.D, self.d_model, self.heads, self.d_ff, vocab_size, max_len,
                           self.dropout, self.tie_embeddings)

    def build(self, vocab_size: int, max_len: int, seed: int) -> Seq2SeqModel:
        return Seq2SeqModel(self.config(vocab_size, max_len), seed=seed)


TEACHER_ARCH = ArchSpec(E=4, D=4, d_model=128, heads=4, d_ff=512)
STUDENT_ARCH = ArchSpec(E=2, D=2, d_model=64, heads=2, d_ff=256)
PRUNE_BASE_ARCH = ArchSpec(E=4, D=4, d_model=64, heads=2, d_ff=256)


@dataclass(frozen=True)
class Recipe:
    """One condition of one stage.

    model: which student to train (student, decoder_only, prune_decoder,
    prune_encoder). pt_count=1 means the single mode-approximation PT,
    None means rotate over every cached PT. student_pt_fraction > 0 turns on
    on-the-fly student PTs (1.0 = only student PTs).
    """

    objective: str = FINETUNE
    pt_method: Optional[str] = None
    pt_count: Optional[int] = 1
    unlabeled: bool = False
    student_pt_fraction: float = 0.0
    model: str = "student"
    post_finetune: bool = True


STAGES: dict[int, dict[str, Recipe]] = {
    1: {"encoder_decoder": Recipe(post_finetune=False),
        "decoder_only": Recipe(model="decoder_only", post_finetune=False)},
    2: {"prune_decoder": Recipe(model="prune_decoder", post_finetune=False),
        "prune_encoder": Recipe(model="prune_encoder", post_finetune=False)},
    3: {"logits": Recipe(LOGITS), "noisy": Recipe(NOISY), "att_rel": Recipe(ATT_REL)},
    4: {"seq_lvl": Recipe(FINETUNE, "beam"), "logits_seq": Recipe(LOGITS, "beam")},
    5: {"labeled": Recipe(LOGITS, "beam"), "unlabeled": Recipe(LOGITS, "beam", unlabeled=True)},
    6: {"single_pt": Recipe(LOGITS, "beam", 1, True), "k_beams": Recipe(LOGITS, "beam", None, True)},
    7: {"sampling": Recipe(LOGITS, "sample", None, True), "h_sampling": Recipe(LOGITS, "h_sample", None, True)},
    8: {"only_teacher": Recipe(LOGITS, "sample", None, True, 0.0),
        "only_student": Recipe(LOGITS, None, None, True, 1.0),
        "joint_teaching": Recipe(LOGITS, "sample", None, True, 0.5)},
}


def recipe_for(stage: int, condition: str) -> Recipe:
    try:
        return STAGES[stage][condition]
    except KeyError:
        raise KeyError(f"stage {stage} has no condition {condition!r}; known: {sorted(STAGES.get(stage, {}))}") from None


@dataclass
class PTSettings:
    beam_k: int = 16
    single_beam_k: int = 16
    num_samples: int = 48
    nucleus_p: float = 0.95


@dataclass
class StudyConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: ArchSpec = field(default_factory=lambda: replace(TEACHER_ARCH))
    student: ArchSpec = field(default_factory=lambda: replace(STUDENT_ARCH))
    prune_base: ArchSpec = field(default_factory=lambda: replace(PRUNE_BASE_ARCH))
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    kd_train: TrainConfig = field(default_factory=TrainConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    pts: PTSettings = field(default_factory=PTSettings)
    teacher_cache_rows: int = 200_000
    workdir: str = "runs/study"


def config_from_dict(cls, d: dict | None):
    """Build a (nested) dataclass from a plain mapping, rejecting unknown keys."""
    d = dict(d or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    proto = cls()
    for name, val in d.items():
        cur = getattr(proto, name)
        if is_dataclass(cur) and isinstance(val, dict):
            kwargs[name] = config_from_dict(type(cur), val)
        elif isinstance(cur, tuple) and isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


# teacher log-prob cache ---------------------------------------------------


class TeacherCache:
    """Teacher log-probs per (example id, target tokens), computed lazily in batches."""

    def __init__(self, teacher: Seq2SeqModel, capacity_rows: int = 200_000):
        self.teacher = teacher
        self.capacity = capacity_rows
        self.rows: dict[tuple, np.ndarray] = {}
        self.hits = self.misses = 0

    def get(self, keys: Sequence, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
            use_cache: bool = True) -> list[np.ndarray]:
        out: list[Optional[np.ndarray]] = [None] * len(keys)
        todo = []
        for i, (k, t) in enumerate(zip(keys, targets)):
            hit = self.rows.get((k, tuple(t))) if use_cache else None
            if hit is None:
                todo.append(i)
            else:
                out[i] = hit
        self.hits += len(keys) - len(todo)
        self.misses += len(todo)
        if todo:
            with no_grad():
                tr = self.teacher.forward([sources[i] for i in todo], [targets[i] for i in todo])
            lp = np_log_softmax(tr.logits.data)
            for j, i in enumerate(todo):
                row = lp[j, : len(targets[i])].copy()
                out[i] = row
                if use_cache and len(self.rows) < self.capacity:
                    self.rows[(keys[i], tuple(targets[i]))] = row
        return out  # type: ignore[return-value]


def _pad_logprobs(rows: Sequence[np.ndarray], n: int, V: int) -> np.ndarray:
    lp = np.zeros((len(rows), n, V))
    for b, r in enumerate(rows):
        lp[b, : len(r)] = r
        lp[b, len(r):] = -np.log(V)
    return lp


def _target_array(targets: Sequence[Sequence[int]], n: int) -> np.ndarray:
    out = np.zeros((len(targets), n), dtype=np.int64)
    for b, t in enumerate(targets):
        out[b, : len(t)] = t
    return out


# the study ---------------------------------------------------------------


@dataclass
class StageOutcome:
    stage: int
    condition: str
    seed: int
    dev: MetricReport
    test: MetricReport
    gaps: dict[str, GapReport]
    best_step: int
    phase: str
    audit: dict
    history: list[dict]
    seconds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


class Study:
    def __init__(self, cfg: StudyConfig, splits: Splits | None = None, codec: TextCodec | None = None):
        self.cfg = cfg
        self.workdir = Path(cfg.workdir)
        self.splits = splits if splits is not None else generate(cfg.data)
        if codec is None:
            texts = [ex.source for ex in self.splits.train_labeled + self.splits.train_unlabeled]
            texts += [ex.target for ex in self.splits.train_labeled]
            codec = TextCodec.fit(texts)
        self.codec = codec
        targets = [self.codec.encode_target(ex.target) for ex in self.splits.train_labeled]
        self.max_target_len = max(len(t) for t in targets)
        self.max_source_len = max(len(self.codec.encode_source(ex.source))
                                  for ex in self.splits.train_labeled + self.splits.train_unlabeled)
        self.max_len = 2 * max(self.max_source_len, self.max_target_len) + 2
        self.V = len(self.codec.vocab)
        self.pt_cache = PTCache()
        self.teacher: Seq2SeqModel | None = None
        self.student_baseline: Seq2SeqModel | None = None
        self.baseline_reports: dict[str, tuple[MetricReport, MetricReport]] = {}
        self._tcache: TeacherCache | None = None
        self._src_cache: dict[str, list[int]] = {}

    # persistence ---------------------------------------------------------

    @classmethod
    def from_workdir(cls, cfg: StudyConfig) -> "Study":
        wd = Path(cfg.workdir)
        study = cls(cfg, load_splits(wd / "data"), TextCodec.load(wd / "codec.json"))
        for role in ("teacher", "student"):
            p = wd / "models" / f"{role}.dkt"
            if p.exists():
                m = Seq2SeqModel.load(p)
                setattr(study, "teacher" if role == "teacher" else "student_baseline", m)
        for p in sorted((wd / "pts").glob("*.jsonl")) if (wd / "pts").exists() else []:
            c = PTCache.load_jsonl(p)
            study.pt_cache.entries.update(c.entries)
        return study

    def save_base(self):
        save_splits(self.splits, ensure_dir(self.workdir / "data"))
        self.codec.save(self.workdir / "codec.json")

    def path(self, *parts) -> Path:
        p = self.workdir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # helpers -------------------------------------------------------------

    def src(self, ex: ParallelExample) -> list[int]:
        ids = self._src_cache.get(ex.id)
        if ids is None:
            ids = self._src_cache[ex.id] = self.codec.encode_source(ex.source)
        return ids

    def tgt(self, ex: ParallelExample) -> list[int]:
        return self.codec.encode_target(ex.target)

    @property
    def teacher_cache(self) -> TeacherCache:
        if self.teacher is None:
            raise RuntimeError("no teacher: fine-tune or load one first")
        if self._tcache is None or self._tcache.teacher is not self.teacher:
            self._tcache = TeacherCache(self.teacher, self.cfg.teacher_cache_rows)
        return self._tcache

    def dev_score_fn(self, train_cfg: TrainConfig):
        return dev_scorer(self.splits.dev, self.codec, self.max_target_len, train_cfg.dev_metric, train_cfg.dev_limit)

    def report(self, model) -> tuple[MetricReport, MetricReport]:
        dev = evaluate(model, self.splits.dev, self.codec, self.max_target_len)
        test = evaluate(model, self.splits.test, self.codec, self.max_target_len)
        return dev, test

    def build_model(self, which: str, seed: int) -> Seq2SeqModel:
        c = self.cfg
        if which == "teacher":
            return c.teacher.build(self.V, self.max_len, seed)
        if which == "student":
            return c.student.build(self.V, self.max_len, seed)
        if which == "decoder_only":
            return replace(c.student, arch=DECODER_ONLY).build(self.V, self.max_len, seed)
        if which in ("prune_decoder", "prune_encoder"):
            base = c.prune_base.build(self.V, self.max_len, seed)
            return prune_layers(base, "decoder" if which == "prune_decoder" else "encoder")
        raise ValueError(f"unknown model kind {which!r}")

    # fine-tuning ---------------------------------------------------------

    def nll_batch_loss(self, model, train: bool):
        def loss(batch, epoch, step, rng):
            src = [self.src(ex) for ex in batch]
            tgt = [self.tgt(ex) for ex in batch]
            tr = model.forward(src, tgt, train=train, rng=rng)
            return nll(tr.logits, _target_array(tgt, tr.logits.shape[1]), tr.target_mask,
                       np.full(len(batch), 1.0 / len(batch)))

        return loss

    def finetune(self, model, train_cfg: TrainConfig, epochs: int | None = None, patience_evals: int | None = None,
                 checkpoint=None, phase="finetune") -> TrainResult:
        return fit(model, self.splits.train_labeled, self.nll_batch_loss(model, True), self.dev_score_fn(train_cfg),
                   train_cfg, epochs=epochs, patience_evals=patience_evals, checkpoint_path=checkpoint, phase=phase,
                   audit={"gt_rows_labeled": "all", "gt_rows_unlabeled": 0})

    def train_teacher(self, seed: int = 0) -> TrainResult:
        model = self.build_model("teacher", seed)
        res = self.finetune(model, replace(self.cfg.teacher_train, seed=seed), checkpoint=self.path("models", "teacher.dkt"))
        model.load_state_dict(res.best_state)
        self.teacher = model
        self.baseline_reports["teacher"] = self.report(model)
        return res

    def train_student_baseline(self, seed: int = 0, which: str = "student") -> tuple[Seq2SeqModel, TrainResult]:
        model = self.build_model(which, seed)
        name = "student" if which == "student" else which
        res = self.finetune(model, replace(self.cfg.student_train, seed=seed), checkpoint=self.path("models", f"{name}.dkt"))
        model.load_state_dict(res.best_state)
        if which == "student":
            self.student_baseline = model
            self.baseline_reports["student"] = self.report(model)
        return model, res

    # pseudo-targets ------------------------------------------------------

    def pt_method_config(self, method: str, single: bool = False):
        p = self.cfg.pts
        beam_k = p.single_beam_k if single else p.beam_k
        return decode_config_for(method, beam_k, p.num_samples, p.nucleus_p, self.max_target_len, self.cfg.kd_train.seed)

    def pt_key(self, method: str, single: bool) -> str:
        return f"{method}1" if single and method == "beam" else method

    def ensure_teacher_pts(self, method: str, single: bool, unlabeled: bool) -> str:
        """Generate (once) and persist teacher PTs for the inputs a recipe needs; returns the cache method key."""
        if self.teacher is None:
            raise RuntimeError("missing teacher for PT generation")
        key = self.pt_key(method, single)
        pool = self.splits.train_labeled + (self.splits.train_unlabeled if unlabeled else [])
        todo = self.pt_cache.missing(pool, TEACHER, key)
        if todo:
            want = set(todo)
            exs = [ex for ex in pool if ex.id in want]
            t0 = time.time()
            pts = generate_teacher_pts(self.teacher, exs, self.codec.encode_source, self.pt_method_config(method, single), key)
            self.pt_cache.put(pts)
            self.pt_cache.save_jsonl(self.path("pts", "teacher.jsonl"))
            log.info("generated %d %s PTs for %d inputs in %.1fs", len(pts), key, len(exs), time.time() - t0)
        missing = self.pt_cache.missing(pool, TEACHER, key)
        if missing:
            raise RuntimeError(f"PT coverage check failed for {len(missing)} inputs")
        return key

    # distillation --------------------------------------------------------

    def kd_batch_loss(self, student, recipe: Recipe, kd: KDConfig, pt_key: str | None, audit: dict, seed: int):
        """Loss closure for one recipe; see ``Recipe`` for the knobs."""
        teacher = self.teacher
        tcache = self.teacher_cache if recipe.objective != FINETUNE or recipe.student_pt_fraction > 0 else None
        scaler = ComponentScaler()
        labeled_ids = {ex.id for ex in self.splits.train_labeled}

        def pt_rows(batch, epoch, step, use_student: bool):
            if use_student:
                with no_grad():
                    seeds = [example_seed(seed, ex.id, step) for ex in batch]
                    toks = sample_batch(student, [self.src(ex) for ex in batch], self.max_target_len,
                                        self.cfg.pts.nucleus_p, 1.0, seeds)
                audit["student_pt_rows"] += len(batch)
                return [(ex, t, False) for ex, t in zip(batch, toks)]
            rows = []
            for ex in batch:
                pt = (self.pt_cache.get(ex.id, TEACHER, pt_key)[0] if recipe.pt_count == 1
                      else pt_for_epoch(self.pt_cache, ex.id, epoch, TEACHER, pt_key))
                rows.append((ex, pt.tokens, True))
            audit["teacher_pt_rows"] += len(rows)
            return rows

        def gt_rows(batch):
            rows = []
            for ex in batch:
                if ex.target is None:
                    continue
                if ex.id not in labeled_ids:
                    raise AssertionError(f"ground truth requested for non-training example {ex.id}")
                rows.append((ex, self.tgt(ex), True))
            audit["gt_rows_labeled"] += len(rows)
            return rows

        def row_loss(rows, weight, rng, step, train=True) -> Tensor:
            src = [self.src(ex) for ex, _, _ in rows]
            tgt = [t for _, t, _ in rows]
            tr = student.forward(src, tgt, train=train, rng=rng)
            n = tr.logits.shape[1]
            w = np.full(len(rows), weight)
            if recipe.objective == FINETUNE:
                return nll(tr.logits, _target_array(tgt, n), tr.target_mask, w)
            keys = [ex.id for ex, _, _ in rows]
            lps = tcache.get(keys, src, tgt, use_cache=all(c for _, _, c in rows))
            lp = _pad_logprobs(lps, n, self.V)
            if recipe.objective == NOISY and kd.noise_sigma > 0:
                noise = np.random.default_rng([seed, step, 11]).normal(0.0, kd.noise_sigma, lp.shape)
                lp = np_log_softmax(lp + noise)
            loss = kl_div(np.exp(lp), tr.logits, mask=tr.target_mask, weights=w)
            if recipe.objective == ATT_REL:
                with no_grad():
                    ttr = teacher.forward(src, tgt)
                comps = att_rel_components(ttr, tr, kd.relation_kinds, kd.relation_layers, kd.relation_heads, w)
                scales = scaler.update({k: v.item() for k, v in comps.items()})
                for k, v in comps.items():
                    loss = loss + v * scales[k]
            return loss

        def batch_loss(batch, epoch, step, rng):
            weight = 1.0 / len(batch)
            for ex in batch:
                audit["labeled_examples" if ex.target is not None else "unlabeled_examples"] += 1
            labeled = [ex for ex in batch if ex.target is not None]
            gt = gt_rows(labeled) if (recipe.pt_method is None and recipe.student_pt_fraction == 0) or kd.interpolate_ground_truth else []
            if recipe.pt_method is None and recipe.student_pt_fraction == 0:
                return row_loss(gt, weight, rng, step)
            frac = recipe.student_pt_fraction
            if frac in (0.0, 1.0) or kd.joint_mode == "alternate":
                use_student = frac >= 1.0 or (frac > 0 and rng.random() < frac)
                rows = gt + pt_rows(batch, epoch, step, use_student)
                return row_loss(rows, weight, rng, step)
            # mixture: alpha-weighted sum of the teacher-PT and student-PT terms every step
            a = kd.alpha
            t_loss = row_loss(gt + pt_rows(batch, epoch, step, False), weight * a, rng, step)
            s_loss = row_loss(pt_rows(batch, epoch, step, True), weight * (1 - a), rng, step)
            extra = row_loss(gt, weight * (1 - a), rng, step) if gt else None
            out = t_loss + s_loss
            return out + extra if extra is not None else out

        return batch_loss

    def distill(self, recipe: Recipe, seed: int = 0, name: str = "kd", init: Seq2SeqModel | None = None) -> tuple[Seq2SeqModel, TrainResult, dict]:
        """Run one KD recipe; returns the selected model, its result and the audit log."""
        if recipe.objective != FINETUNE or recipe.pt_method or recipe.student_pt_fraction:
            if self.teacher is None:
                raise RuntimeError("missing teacher checkpoint")
        kd = replace(self.cfg.kd, objective=recipe.objective)
        train_cfg = replace(self.cfg.kd_train, seed=seed)
        pt_key = None
        if recipe.pt_method is not None:
            pt_key = self.ensure_teacher_pts(recipe.pt_method, recipe.pt_count == 1, recipe.unlabeled)
        student = init.clone() if init is not None else self.build_model(recipe.model, seed)
        audit = {"labeled_examples": 0, "unlabeled_examples": 0, "gt_rows_labeled": 0, "gt_rows_unlabeled": 0,
                 "teacher_pt_rows": 0, "student_pt_rows": 0}
        pool = list(self.splits.train_labeled) + (list(self.splits.train_unlabeled) if recipe.unlabeled else [])
        ckpt = self.path("models", f"{name}.dkt")
        res = fit(student, pool, self.kd_batch_loss(student, recipe, kd, pt_key, audit, seed), self.dev_score_fn(train_cfg),
                  train_cfg, checkpoint_path=ckpt, audit=audit)
        if recipe.post_finetune and train_cfg.post_finetune_epochs > 0:
            student.load_state_dict(res.best_state)
            ft = self.finetune(student, train_cfg, epochs=train_cfg.post_finetune_epochs,
                               patience_evals=10 ** 9, phase="post_finetune")
            final = keep_better(res, ft, train_cfg.dev_metric)
            final.history = res.history + ft.history
            final.audit = audit
        else:
            final = res
        student.load_state_dict(final.best_state)
        student.save(ckpt, extra={"step": final.best_step, "dev_score": final.best_score, "phase": final.phase})
        return student, final, audit

    def gaps(self, dev: MetricReport, test: MetricReport, split: str = "test") -> dict[str, GapReport]:
        if "teacher" not in self.baseline_reports or "student" not in self.baseline_reports:
            raise RuntimeError("baselines missing: fine-tune the teacher and the student first")
        idx = 0 if split == "dev" else 1
        T = self.baseline_reports["teacher"][idx]
        S = self.baseline_reports["student"][idx]
        KD = dev if split == "dev" else test
        return {m: gap_report(m, S.get(m), T.get(m), KD.get(m)) for m in REPORT_METRICS}

    def run_stage(self, stage: int, condition: str, seed: int = 0, init: Seq2SeqModel | None = None) -> StageOutcome:
        recipe = recipe_for(stage, condition)
        t0 = time.time()
        if stage <= 2:
            model, res = self.train_student_baseline(seed, recipe.model) if recipe.model != "student" else self.train_student_baseline(seed)
            audit = res.audit
        else:
            model, res, audit = self.distill(recipe, seed, name=f"stage{stage}_{condition}_seed{seed}", init=init)
        dev, test = self.report(model)
        gaps = self.gaps(dev, test) if {"teacher", "student"} <= set(self.baseline_reports) else {}
        out = StageOutcome(stage, condition, seed, dev, test, gaps, res.best_step, res.phase, audit, res.history,
                           time.time() - t0)
        self.path("reports", f"stage{stage}_{condition}_seed{seed}.json").write_text(json.dumps(out.to_dict(), indent=1))
        return out


# exposure-bias probe --------------------------------------------------------


@dataclass
class ProbeRow:
    checkpoint: str
    student_continuation: float
    teacher_continuation: float


def exposure_probe(teacher, checkpoints: Sequence[tuple[str, Seq2SeqModel]], examples: Sequence[ParallelExample],
                   codec: TextCodec, rho: float, max_len: int) -> list[ProbeRow]:
    """Student writes the first ``rho * max_len`` tokens; student and teacher each finish the output."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("prefix fraction must lie in (0, 1]")
    if len(checkpoints) < 2:
        raise ValueError("the probe needs at least two student checkpoints")
    refs = [ex.target for ex in examples]
    if any(r is None for r in refs):
        raise ValueError("the probe scores against references; examples must be labeled")
    srcs = [codec.encode_source(ex.source) for ex in examples]
    cut = int(round(rho * max_len))
    rows = []
    with no_grad():
        for name, student in checkpoints:
            prefixes = [p[:cut] for p in greedy(student, srcs, max_len)]
            s_out = greedy_continue(student, srcs, prefixes, max_len)
            t_out = greedy_continue(teacher, srcs, prefixes, max_len)
            rows.append(ProbeRow(name, bleu([codec.decode(t) for t in s_out], refs),
                                 bleu([codec.decode(t) for t in t_out], refs)))
    return rows


# reporting ---------------------------------------------------------------


def render_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text table; floats get four decimals."""
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out)


def gap_rows(reports: Sequence[dict]) -> list[dict]:
    """Flatten stage report dicts into table rows (one per stage, condition and seed)."""
    rows = []
    for r in reports:
        row = {"stage": r["stage"], "condition": r["condition"], "seed": r["seed"],
               "dev_bleu": r["dev"]["bleu"], "test_bleu": r["test"]["bleu"]}
        for m, g in (r.get("gaps") or {}).items():
            row[f"gap_{m}"] = g["closed_fraction"]
        rows.append(row)
    return rows
