"""Command-line entry point: ``searchbound <command> [flags]``.

Every file is first written as ``<name>.partial`` and renamed once complete,
so an interrupted run never leaves a truncated file under its final name.
Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .environment import (
    ParametricProfile,
    Question,
    World,
    parametric_answerable,
)
from .experiment import RunConfig, Setup, build_setup, load_run_config, run_config_to_json
from .metrics import EvalRecord, MetricsReport, compute_report
from .optimizer import TrainResult, Variant, evaluate, train_run
from .policy import Env, PolicyParams, derive_seed
from .reward import REWARD_LOG_COLUMNS
from .trajectory import Mode, parse_transcript

SUMMARY_COLUMNS = ("variant", "seed", "step", "stage", "f1", "sc", "no_search_ratio", "redundant_search_ratio")
RUN_LOG_COLUMNS = SUMMARY_COLUMNS[2:]
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    """An expected failure with a short, user-facing message."""


class UsageError(CliError):
    pass


class SchemaError(CliError):
    pass


# --------------------------------------------------------------------------
# Output helpers


def write_text(path: Path, text: str) -> Path:
    partial = path.with_name(path.name + ".partial")
    with open(partial, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(partial, path)
    return path


def write_json(path: Path, data) -> Path:
    return write_text(path, json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    return write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in row])
    return write_text(path, buf.getvalue())


def write_metrics(out: Path, report: MetricsReport) -> list[Path]:
    """``<out>.json`` plus a one-row ``<out>.csv``; ``out`` may carry either suffix."""
    base = out.with_suffix("") if out.suffix in (".json", ".csv") else out
    base.parent.mkdir(parents=True, exist_ok=True)
    cols = ["acc", "sc", "qor", "sor", "records", "para_records", "total_searches", "redundant_searches"]
    row = [report.acc, report.sc, report.qor, report.sor] + [report.counts.get(c) for c in cols[4:]]
    return [
        write_json(base.with_suffix(".json"), report.to_json()),
        write_csv(base.with_suffix(".csv"), cols, [row]),
    ]


# --------------------------------------------------------------------------
# Input helpers


def _existing(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CliError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return out


def read_questions(path: Path) -> list[Question]:
    return [Question.from_json(d) for d in _read_jsonl(path)]


def load_env_files(directory: Path) -> tuple[Optional[World], Optional[ParametricProfile]]:
    """world.json and profile.json next to a questions file, if present."""
    wp, pp = directory / "world.json", directory / "profile.json"
    if not wp.is_file():
        return None, None
    world = World.from_json(json.loads(wp.read_text(encoding="utf-8")))
    profile = None
    if pp.is_file():
        profile = ParametricProfile.from_json(json.loads(pp.read_text(encoding="utf-8")), world)
    return world, profile


def _config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        _existing(args.config, "--config")
    return load_run_config(args.config)


def _csv_list(raw: Optional[str], what: str) -> list[str]:
    if raw is None:
        raise UsageError(f"{what} is required")
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise UsageError(f"{what} is empty")
    return items


# --------------------------------------------------------------------------
# Commands


def write_setup(out: Path, setup: Setup, questions_name: str = "questions.jsonl") -> None:
    write_json(out / "world.json", setup.world.to_json())
    write_json(out / "profile.json", setup.profile.to_json())
    write_jsonl(out / questions_name, (q.to_json() for q in list(setup.train) + list(setup.val)))


def cmd_gen_env(args: argparse.Namespace) -> None:
    cfg = _config(args)
    env = cfg.env if args.seed is None else replace(cfg.env, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_setup(out, build_setup(env))


def write_train_outputs(out: Path, cfg: RunConfig, setup: Setup, result: TrainResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "training_log.csv", result.log.to_csv())
    write_json(out / "checkpoint.json", result.params.to_json())
    write_jsonl(out / "boundary_log.jsonl", result.boundary_log)
    write_csv(out / "reward_log.csv", REWARD_LOG_COLUMNS, ([r[c] for c in REWARD_LOG_COLUMNS] for r in result.reward_log))
    write_json(out / "config.json", run_config_to_json(cfg))
    write_json(out / "world.json", setup.world.to_json())
    write_json(out / "profile.json", setup.profile.to_json())
    write_jsonl(out / "val_questions.jsonl", (q.to_json() for q in setup.val))
    write_metrics(out / "eval_report", result.final_report)
    write_json(
        out / "run.json",
        {
            "variant": cfg.train.variant.value,
            "seed": cfg.train.seed,
            "steps": cfg.train.steps,
            "switch_step": result.switch_step,
            "switch_report": result.switch_report.to_json() if result.switch_report else None,
            "final_report": result.final_report.to_json(),
        },
    )


def train_cell(cfg: RunConfig, out: Path) -> dict:
    setup = build_setup(cfg.env)
    result = train_run(cfg.train, setup.world, setup.train, setup.profile, setup.val, log_rewards=True)
    write_train_outputs(out, cfg, setup, result)
    return {
        "variant": cfg.train.variant.value,
        "seed": cfg.train.seed,
        "final_acc": result.final_report.acc,
        "final_sc": result.final_report.sc,
        "switch_step": result.switch_step,
        "switch_acc": result.switch_report.acc if result.switch_report else None,
        "switch_sc": result.switch_report.sc if result.switch_report else None,
    }


def cmd_train(args: argparse.Namespace) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    train_cell(cfg, Path(args.out))


def cmd_eval(args: argparse.Namespace) -> None:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    qpath = _existing(args.questions, "--questions")
    cfg = _config(args)
    params = PolicyParams.load(ckpt)
    questions = read_questions(qpath)
    if not questions:
        raise CliError(f"no questions in {qpath}")
    world, profile = load_env_files(qpath.parent)
    if world is None or profile is None:
        raise CliError(f"world.json and profile.json must sit next to {qpath}")
    for q in questions:
        for h in q.hops:
            world.validate_query(h)
    t = cfg.train
    seed = t.seed if args.seed is None else args.seed
    report, _ = evaluate(params, questions, Env(world, profile, t.k, t.p_miss), t.cap, t.eval_samples, derive_seed(seed, "eval"))
    write_metrics(Path(args.out), report)


def cmd_audit(args: argparse.Namespace) -> None:
    tpath = _existing(args.transcripts, "--transcripts")
    gpath = _existing(args.gold, "--gold")
    gold: dict[str, dict] = {}
    for d in _read_jsonl(gpath):
        qid = str(d.get("question_id", d.get("id")))
        if "gold" not in d:
            raise SchemaError(f"{gpath}: record {qid} has no 'gold' column")
        gold[qid] = d
    world, profile = load_env_files(gpath.parent)
    records = []
    for lineno, rec in enumerate(_read_jsonl(tpath), 1):
        for key in ("question_id", "mode", "transcript"):
            if key not in rec:
                raise SchemaError(f"{tpath}:{lineno}: missing column '{key}'")
        qid = str(rec["question_id"])
        if qid not in gold:
            raise CliError(f"{tpath}:{lineno}: no gold answer for question {qid}")
        traj = parse_transcript(rec["transcript"], qid, Mode(rec["mode"]))
        g = gold[qid]
        if "parametric_answerable" in g:
            para = bool(g["parametric_answerable"])
        elif profile is not None and "hops" in g:
            para = parametric_answerable(profile, Question.from_json(g))
        else:
            para = False
        records.append(EvalRecord(qid, traj, str(g["gold"]), para, tuple(rec["redundant"]) if "redundant" in rec else None))
    if not records:
        raise CliError(f"no transcripts in {tpath}")
    write_metrics(Path(args.out), compute_report(records, world, profile))


def _train_cell_job(job: tuple[RunConfig, str]) -> dict:
    cfg, out = job
    return train_cell(cfg, Path(out))


def cmd_ablate(args: argparse.Namespace) -> None:
    cfg = _config(args)
    variants = [Variant(v) for v in _csv_list(args.variants, "--variants")]
    try:
        seeds = [int(s) for s in _csv_list(args.seeds, "--seeds")]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        (replace(cfg, train=replace(cfg.train, variant=v, seed=s, workers=1)), str(out / v.value / f"seed_{s}"))
        for v in variants
        for s in seeds
    ]
    n_proc = max(1, min(len(jobs), os.cpu_count() or 1))
    if n_proc == 1:
        rows = [_train_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n_proc) as ex:
            rows = list(ex.map(_train_cell_job, jobs))

    run_cols = ("variant", "seed", "final_acc", "final_sc", "switch_step", "switch_acc", "switch_sc")
    write_csv(out / "runs.csv", run_cols, ([r[c] for c in run_cols] for r in rows))
    table = []
    for v in variants:
        mine = [r for r in rows if r["variant"] == v.value]
        n = len(mine)
        table.append((v.value, n, sum(r["final_acc"] for r in mine) / n, sum(r["final_sc"] for r in mine) / n))
    write_csv(out / "comparison.csv", ("variant", "seeds", "mean_final_acc", "mean_final_sc"), table)


def collect_run_logs(log_dir: Path) -> list[tuple[str, int, list[dict]]]:
    """Every ``training_log.csv`` under ``log_dir`` with the variant and seed
    from its sibling ``run.json``."""
    if not log_dir.is_dir():
        raise CliError(f"log directory not found: {log_dir}")
    runs = []
    for path in sorted(log_dir.rglob("training_log.csv")):
        meta_path = path.parent / "run.json"
        if not meta_path.is_file():
            raise SchemaError(f"{path}: no run.json alongside (needs 'variant' and 'seed')")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        for key in ("variant", "seed"):
            if key not in meta:
                raise SchemaError(f"{meta_path}: missing column '{key}'")
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in RUN_LOG_COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing column '{missing[0]}'")
            rows = list(reader)
        runs.append((str(meta["variant"]), int(meta["seed"]), rows))
    if not runs:
        raise CliError(f"no training_log.csv found under {log_dir}")
    return runs


def write_summary(log_dir: Path, out: Path) -> Path:
    runs = collect_run_logs(log_dir)
    keyed = {}
    for variant, seed, rows in runs:
        for r in rows:
            key = (variant, seed, int(r["step"]))
            if key in keyed:
                raise SchemaError(f"duplicate (variant, seed, step) {key} under {log_dir}")
            keyed[key] = [variant, seed, int(r["step"])] + [r[c] for c in RUN_LOG_COLUMNS[1:]]
    out.parent.mkdir(parents=True, exist_ok=True)
    return write_csv(out, SUMMARY_COLUMNS, (keyed[k] for k in sorted(keyed)))


def cmd_report(args: argparse.Namespace) -> None:
    log_dir = Path(args.log_dir)
    out = Path(args.out) if args.out else log_dir / "summary.csv"
    write_summary(log_dir, out)


# --------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="searchbound", description="Boundary-aware search-efficiency training on a synthetic QA world.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="write world.json, questions.jsonl and profile.json")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, help="override the environment seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a question file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--questions", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="score a transcript file against gold answers")
    a.add_argument("--transcripts", required=True)
    a.add_argument("--gold", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit)

    ab = sub.add_parser("ablate", help="train every (variant, seed) pair and compare")
    ab.add_argument("--config")
    ab.add_argument("--variants", default=",".join(v.value for v in Variant))
    ab.add_argument("--seeds", default="1,2,3,4,5")
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="merge training logs into one per-step CSV")
    r.add_argument("log_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_USAGE)
    except KeyboardInterrupt:
        return _fail("Interrupted", "interrupted; incomplete files end in .partial", EXIT_FAILURE)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
