"""Command-line entry point: ``kdlab <command> ...``.

Every command reads an optional YAML study config (``--config``) whose values
can be overridden with ``--set section.key=value`` (values parsed as YAML).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import data as data_mod
from .extreme import CONDITIONS, export_external, load_external, run_extreme, save_external
from .model import Seq2SeqModel
from .pipeline import STAGES, Study, StudyConfig, config_from_dict, exposure_probe, gap_rows, render_table
from .profiler import profile_model, theoretical_cost, write_csv
from .pseudo_targets import TEACHER
from .tokenize_align import BPELiteTokenizer, nw_align
from .training import evaluate

log = logging.getLogger("kdlab")

METRIC_COLUMNS = ("bleu", "rouge1_f1", "rouge2_f1", "rougeL_f1", "rouge_avg", "ppl")


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path: str | None, overrides: list[str], workdir: str | None = None) -> StudyConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    for item in overrides or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(val))
    if workdir:
        raw["workdir"] = workdir
    return config_from_dict(StudyConfig, raw)


def _study(args, fresh_ok: bool = False) -> Study:
    cfg = load_config(args.config, args.set, args.workdir)
    wd = Path(cfg.workdir)
    if (wd / "codec.json").exists():
        study = Study.from_workdir(cfg)
    elif fresh_ok:
        study = Study(cfg)
        study.save_base()
    else:
        raise SystemExit(f"{wd} holds no study; run `kdlab data gen` first")
    for role in ("teacher", "student"):
        p = wd / "reports" / f"baseline_{role}.json"
        if p.exists():
            from .metrics import MetricReport

            d = json.loads(p.read_text())
            study.baseline_reports[role] = (MetricReport(**d["dev"]), MetricReport(**d["test"]))
    return study


def _print_metrics(rows: list[dict]):
    print(render_table(rows, ("name",) + METRIC_COLUMNS))


# commands -----------------------------------------------------------------


def cmd_data(args):
    if args.action == "gen":
        cfg = load_config(args.config, args.set, args.workdir)
        study = Study(cfg)
        study.save_base()
        sizes = {k: len(v) for k, v in study.splits.items()}
        print(json.dumps({"workdir": cfg.workdir, "splits": sizes, "vocab": study.V}))
    else:
        splits = data_mod.load_splits(Path(args.path))
        problems = data_mod.validate_splits(splits)
        for p in problems:
            print(p)
        print("ok" if not problems else f"{len(problems)} problem(s)")
        return 0 if not problems else 1
    return 0


def _save_baseline(study: Study, role: str):
    dev, test = study.baseline_reports[role]
    study.path("reports", f"baseline_{role}.json").write_text(json.dumps({"dev": dev.to_dict(), "test": test.to_dict()}, indent=1))


def cmd_train(args):
    study = _study(args, fresh_ok=True)
    if args.role == "teacher":
        res = study.train_teacher(args.seed)
    else:
        _, res = study.train_student_baseline(args.seed)
    _save_baseline(study, args.role)
    dev, test = study.baseline_reports[args.role]
    _print_metrics([{"name": f"{args.role}/dev", **dev.to_dict()}, {"name": f"{args.role}/test", **test.to_dict()}])
    print(f"best dev {study.cfg.teacher_train.dev_metric} {res.best_score:.4f} at step {res.best_step}")
    return 0


def cmd_distill(args):
    study = _study(args)
    conditions = [args.condition] if args.condition else sorted(STAGES[args.stage])
    rows = []
    for cond in conditions:
        out = study.run_stage(args.stage, cond, args.seed)
        rows.append(out.to_dict())
    print(render_table(gap_rows(rows), ("stage", "condition", "seed", "dev_bleu", "test_bleu", "gap_bleu", "gap_rouge_avg", "gap_ppl")))
    return 0


def cmd_pts(args):
    study = _study(args)
    key = study.ensure_teacher_pts(args.method, args.single, args.unlabeled)
    n = sum(len(v) for k, v in study.pt_cache.entries.items() if k[1] == TEACHER and k[2] == key)
    print(f"{n} teacher PTs under method key {key!r} -> {study.path('pts', 'teacher.jsonl')}")
    return 0


def cmd_align(args):
    ops = nw_align(args.teacher.split(), args.student.split())
    for op in ops:
        print(f"{op.kind:8s} t={op.teacher_index!s:>4} s={op.student_index!s:>4}{'  prefix' if op.is_prefix_match else ''}")
    return 0


def cmd_eval(args):
    study = _study(args)
    model = Seq2SeqModel.load(args.model)
    examples = getattr(study.splits, args.split)
    rep = evaluate(model, examples, study.codec, study.max_target_len)
    _print_metrics([{"name": f"{Path(args.model).stem}/{args.split}", **rep.to_dict()}])
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=1))
    return 0


def cmd_profile(args):
    study = _study(args)
    reports = []
    src = study.codec.encode_source(study.splits.test[0].source)
    m = len(src)
    n = args.n or study.max_target_len
    for path in args.models:
        model = Seq2SeqModel.load(path)
        reports.append(profile_model(Path(path).stem, model, src, n, args.memory_budget, args.warmup, args.runs))
    write_csv(reports, args.out)
    print(Path(args.out).read_text(), end="")
    for r, path in zip(reports, args.models):
        print(f"{r.model}: cost units {theoretical_cost(Seq2SeqModel.load(path).config, m, n)}")
    return 0


def cmd_probe(args):
    study = _study(args)
    if study.teacher is None:
        raise SystemExit("missing teacher checkpoint")
    ckpts = [(Path(p).stem, Seq2SeqModel.load(p)) for p in args.checkpoints]
    rows = exposure_probe(study.teacher, ckpts, study.splits.dev[: args.limit], study.codec, args.rho, study.max_target_len)
    print(render_table([asdict(r) for r in rows], ("checkpoint", "student_continuation", "teacher_continuation")))
    return 0


def cmd_extreme(args):
    study = _study(args)
    if args.action == "export":
        if study.teacher is None:
            raise SystemExit("missing teacher checkpoint")
        texts = [ex.source for ex in study.splits.train_unlabeled]
        bpe = BPELiteTokenizer.train(texts[:2000], 64)
        pool = study.splits.train_unlabeled[: args.inputs] + study.splits.dev
        pts = export_external(study.teacher, study.codec, bpe, pool, args.pts, study.max_target_len, seed=args.seed)
        save_external(pts, args.external)
        print(f"wrote {len(pts)} PTs for {len(pool)} inputs to {args.external}")
        return 0
    external = load_external(args.external)
    cfg = study.cfg
    outs = run_extreme(external, lambda s: study.build_model("student", s), study.splits, study.codec,
                       cfg.kd_train, args.conditions or tuple(CONDITIONS), args.seed, max_len=study.max_target_len)
    rows = []
    for o in outs.values():
        rows.append({"condition": o.condition, "dev_bleu": o.dev.bleu, "pt_dev_bleu": o.pt_dev_score,
                     "gap_bleu": o.gap.closed_fraction if o.gap else None,
                     "labeled_consumed": o.audit["labeled_examples_consumed"]})
        study.path("reports", f"extreme_{o.condition}_seed{args.seed}.json").write_text(json.dumps(o.to_dict(), indent=1, default=str))
    print(render_table(rows, ("condition", "dev_bleu", "pt_dev_bleu", "gap_bleu", "labeled_consumed")))
    return 0


def cmd_report(args):
    cfg = load_config(args.config, args.set, args.workdir)
    rdir = Path(cfg.workdir) / "reports"
    reports = [json.loads(p.read_text()) for p in sorted(rdir.glob("stage*.json"))]
    if not reports:
        print(f"no stage reports under {rdir}")
        return 1
    rows = gap_rows(reports)
    print(render_table(rows, ("stage", "condition", "seed", "dev_bleu", "test_bleu", "gap_bleu", "gap_rouge_avg", "gap_ppl")))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML study config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--workdir", help="study directory (overrides config)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kdlab", description="Desk-scale seq2seq distillation study")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", parents=[common], help="generate or validate datasets")
    d.add_argument("action", choices=("gen", "validate"))
    d.add_argument("path", nargs="?", help="dataset directory (validate)")
    d.set_defaults(func=cmd_data)

    t = sub.add_parser("train", parents=[common], help="fine-tune the teacher or the student baseline")
    t.add_argument("--role", choices=("teacher", "student"), default="teacher")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("distill", parents=[common], help="run a KD stage")
    k.add_argument("--stage", type=int, required=True, choices=sorted(STAGES))
    k.add_argument("--condition", help="one condition of the stage (default: all)")
    k.set_defaults(func=cmd_distill)

    g = sub.add_parser("pts", parents=[common], help="pseudo-target generation")
    g.add_argument("action", choices=("generate",))
    g.add_argument("--method", choices=("beam", "sample", "h_sample"), default="beam")
    g.add_argument("--single", action="store_true", help="single mode-approximation PT")
    g.add_argument("--unlabeled", action="store_true", help="also cover the unlabeled inputs")
    g.set_defaults(func=cmd_pts)

    a = sub.add_parser("align", parents=[common], help="align two whitespace-separated token sequences")
    a.add_argument("--teacher", required=True)
    a.add_argument("--student", required=True)
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("dev", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", parents=[common], help="latency/throughput/cost CSV")
    pr.add_argument("--models", nargs="+", required=True)
    pr.add_argument("--n", type=int)
    pr.add_argument("--runs", type=int, default=100)
    pr.add_argument("--warmup", type=int, default=10)
    pr.add_argument("--memory-budget", type=int, default=64 << 20)
    pr.add_argument("--out", default="profile.csv")
    pr.set_defaults(func=cmd_profile)

    x = sub.add_parser("probe-exposure", parents=[common], help="student prefix, student vs teacher continuation")
    x.add_argument("--checkpoints", nargs="+", required=True)
    x.add_argument("--rho", type=float, default=0.5)
    x.add_argument("--limit", type=int, default=200)
    x.set_defaults(func=cmd_probe)

    ex = sub.add_parser("extreme", parents=[common], help="external-teacher setup")
    ex.add_argument("action", choices=("run", "export"))
    ex.add_argument("--external", required=True, help="external PT JSONL")
    ex.add_argument("--conditions", nargs="*", choices=tuple(CONDITIONS))
    ex.add_argument("--pts", type=int, default=5)
    ex.add_argument("--inputs", type=int, default=2000, help="unlabeled inputs to export")
    ex.set_defaults(func=cmd_extreme)

    r = sub.add_parser("report", parents=[common], help="gap tables from stage reports")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
