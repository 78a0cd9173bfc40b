from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from searchbound.cli import main
from searchbound.experiment import load_run_config, parse_run_config
from searchbound.policy import Env, PolicyParams, rollout
from searchbound.trajectory import Mode, trajectory_record

TINY = """
env_seed = 2

[world]
entity_count = 30
relation_count = 6

[questions]
train = 40
validation = 12

[train]
steps = 6
questions_per_step = 4
eval_interval = 3
val_samples = 1
eval_samples = 1
"""


@pytest.fixture
def cfg(tmp_path) -> Path:
    p = tmp_path / "run.toml"
    p.write_text(TINY)
    return p


def error_line(capsys) -> dict:
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestGenEnv:
    def test_writes_three_files_reproducibly(self, tmp_path, cfg):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-env", "--config", str(cfg), "--out", str(a)]) == 0
        assert main(["gen-env", "--config", str(cfg), "--out", str(b)]) == 0
        names = {"world.json", "questions.jsonl", "profile.json"}
        assert {p.name for p in a.iterdir()} == names
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()
        assert len((a / "questions.jsonl").read_text().splitlines()) == 52

    def test_seed_override(self, tmp_path, cfg):
        main(["gen-env", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["gen-env", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "world.json").read_text() != (tmp_path / "b" / "world.json").read_text()

    def test_missing_config(self, tmp_path, capsys):
        assert main(["gen-env", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 1
        assert error_line(capsys)["error"] == "CliError"

    def test_bad_config_key(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text("[train]\nbogus = 1\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
        assert "bogus" in error_line(capsys)["message"]


class TestTrainEvalReport:
    def test_pipeline(self, tmp_path, cfg, capsys):
        out = tmp_path / "runs"
        for seed in ("7", "8"):
            assert main(["train", "--config", str(cfg), "--seed", seed, "--out", str(out / f"s{seed}")]) == 0
        run = out / "s7"
        for name in ("training_log.csv", "checkpoint.json", "boundary_log.jsonl", "reward_log.csv", "eval_report.json"):
            assert (run / name).is_file()
        assert not list(out.rglob("*.partial"))

        again = tmp_path / "again"
        main(["train", "--config", str(cfg), "--seed", "7", "--out", str(again)])
        assert (again / "training_log.csv").read_bytes() == (run / "training_log.csv").read_bytes()

        boundary = [json.loads(l) for l in (run / "boundary_log.jsonl").read_text().splitlines()]
        assert set(boundary[0]) == {"step", "question_id", "n_d", "n_e", "delta", "label", "n_min"}

        assert main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--questions", str(run / "val_questions.jsonl"), "--out", str(tmp_path / "ev")]) == 0
        report = json.loads((tmp_path / "ev.json").read_text())
        assert report["counts"]["records"] == 12 * 4

        assert main(["report", str(out), "--out", str(tmp_path / "summary.csv")]) == 0
        rows = read_csv(tmp_path / "summary.csv")
        assert list(rows[0]) == ["variant", "seed", "step", "stage", "f1", "sc", "no_search_ratio", "redundant_search_ratio"]
        assert len(rows) == 2 * 6
        assert [(r["seed"], r["step"]) for r in rows[:2]] == [("7", "0"), ("7", "1")]

    def test_eval_needs_world_files(self, tmp_path, cfg, capsys):
        ck = tmp_path / "c.json"
        PolicyParams.zeros().save(ck)
        q = tmp_path / "q" / "questions.jsonl"
        q.parent.mkdir()
        q.write_text('{"id": "q1", "text": "t", "hops": [["a", "r"]], "gold": "b", "hop_count": 1}\n')
        assert main(["eval", "--checkpoint", str(ck), "--questions", str(q), "--out", str(tmp_path / "e")]) == 1
        assert "world.json" in error_line(capsys)["message"]


class TestReport:
    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["report", str(tmp_path / "empty")]) == 1
        assert "no training_log.csv" in error_line(capsys)["message"]

    def test_schema_mismatch_names_column(self, tmp_path, capsys):
        run = tmp_path / "r"
        run.mkdir()
        (run / "run.json").write_text('{"variant": "saas", "seed": 1}')
        (run / "training_log.csv").write_text("step,stage,f1,sc,no_search_ratio\n0,I,0.5,1.0,0.2\n")
        assert main(["report", str(tmp_path)]) == 1
        err = error_line(capsys)
        assert err["error"] == "SchemaError" and "redundant_search_ratio" in err["message"]


class TestAudit:
    def test_audit_structured_and_annotated(self, tmp_path, cfg, world, profile, questions):
        env_dir = tmp_path / "env"
        main(["gen-env", "--out", str(env_dir)])  # default config matches the session fixtures
        env = Env(world, profile)
        recs = []
        for i, q in enumerate(questions[:10]):
            t = rollout(PolicyParams.zeros(), q, Mode.SEARCH_ENABLED, env, seed=i)
            recs.append(trajectory_record(t))
        recs.append({"question_id": questions[0].id, "mode": "search_enabled",
                     "transcript": "<search>who</search><information>doc</information><answer>x</answer>",
                     "redundant": [True]})
        tp = tmp_path / "t.jsonl"
        tp.write_text("".join(json.dumps(r) + "\n" for r in recs))
        assert main(["audit", "--transcripts", str(tp), "--gold", str(env_dir / "questions.jsonl"), "--out", str(tmp_path / "audit")]) == 0
        report = json.loads((tmp_path / "audit.json").read_text())
        assert report["counts"]["records"] == 11

    def test_raw_query_without_annotation(self, tmp_path, capsys):
        g = tmp_path / "gold.jsonl"
        g.write_text('{"id": "q1", "gold": "Paris"}\n')
        tp = tmp_path / "t.jsonl"
        tp.write_text(json.dumps({"question_id": "q1", "mode": "search_enabled",
                                  "transcript": "<search>x</search><information>y</information><answer>Paris</answer>"}) + "\n")
        assert main(["audit", "--transcripts", str(tp), "--gold", str(g), "--out", str(tmp_path / "a")]) == 1
        assert error_line(capsys)["error"] == "MetricsError"

    def test_malformed_transcript(self, tmp_path, capsys):
        g = tmp_path / "gold.jsonl"
        g.write_text('{"id": "q1", "gold": "Paris"}\n')
        tp = tmp_path / "t.jsonl"
        tp.write_text(json.dumps({"question_id": "q1", "mode": "search_enabled", "transcript": "<answer>a</answer><think>"}) + "\n")
        assert main(["audit", "--transcripts", str(tp), "--gold", str(g), "--out", str(tmp_path / "a")]) == 1
        assert "byte offset" in error_line(capsys)["message"]


class TestAblate:
    def test_comparison_matches_run_logs(self, tmp_path, cfg):
        out = tmp_path / "ab"
        assert main(["ablate", "--config", str(cfg), "--variants", "outcome_only,saas", "--seeds", "1,2", "--out", str(out)]) == 0
        comp = {r["variant"]: r for r in read_csv(out / "comparison.csv")}
        for v in ("outcome_only", "saas"):
            accs = [json.loads((out / v / f"seed_{s}" / "run.json").read_text())["final_report"]["acc"] for s in (1, 2)]
            assert float(comp[v]["mean_final_acc"]) == pytest.approx(sum(accs) / 2, abs=1e-6)
            assert comp[v]["seeds"] == "2"

    def test_bad_variant(self, tmp_path, capsys):
        assert main(["ablate", "--variants", "nope", "--seeds", "1", "--out", str(tmp_path)]) == 1
        assert "nope" in error_line(capsys)["message"]

    def test_bad_seeds(self, tmp_path, capsys):
        assert main(["ablate", "--seeds", "1,x", "--out", str(tmp_path)]) == 2
        assert error_line(capsys)["error"] == "UsageError"


def test_usage_error_is_one_line(capsys):
    assert main(["train"]) == 2
    assert error_line(capsys)["error"] == "UsageError"


def test_config_parsing(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"profile": {"coverage": 0.7}, "train": {"variant": "outcome_only", "lr": 0.1}}))
    cfg = load_run_config(p)
    assert cfg.env.coverage == 0.7 and cfg.train.lr == 0.1 and cfg.train.variant.value == "outcome_only"
    with pytest.raises(ValueError):
        parse_run_config({"nonsense": {}})
