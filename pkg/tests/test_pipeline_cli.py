import hashlib
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from probesql.bench import casestudy
from probesql.bench.smoke import TASKS
from probesql.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from probesql.schema import ColumnRef


def invoke(*args, input=None):
    return CliRunner().invoke(main, [str(a) for a in args], input=input, catch_exceptions=False)


def tree_digest(root: Path, skip=("config.json",)) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip and p.suffix != ".png"}


def subset_dataset(bench, lines, name):
    """A jsonl next to the smoke databases so relative db paths still resolve."""
    path = bench["smoke_dataset"].parent / name
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n", encoding="utf-8")
    return path


def smoke_lines(bench):
    return [json.loads(x) for x in bench["smoke_dataset"].read_text().splitlines() if x]


def test_smoke_run_is_reproducible(bench, tmp_path):
    digests = []
    for _ in range(2):
        res = invoke("run", "--config", bench["smoke_config"], "--out", tmp_path, "--run-id", "smoke")
        assert res.exit_code == EXIT_OK, res.output
        digests.append(tree_digest(tmp_path / "smoke"))
    assert digests[0] == digests[1]
    report = json.loads((tmp_path / "smoke" / "reports" / "eval.json").read_text())
    agg = report["aggregate"]
    assert agg["EX"] == 1.0 and agg["SRR"] == 1.0 and agg["generation_examples"] == len(TASKS)
    assert report["mode"] == "strict"
    assert (tmp_path / "smoke" / "figures").is_dir()
    assert "EX" in res.output and "tokens_per_query" in res.output


def test_link_two_tasks_reports_aggregate(bench, tmp_path):
    path = subset_dataset(bench, smoke_lines(bench)[:2], "two.jsonl")
    res = invoke("link", "--dataset", path, "--replay", bench["smoke_replay"], "--out", tmp_path, "--run-id", "l")
    assert res.exit_code == EXIT_OK, res.output
    agg = json.loads((tmp_path / "l" / "reports" / "link_aggregate.json").read_text())
    assert agg["examples"] == 2 and agg["SRR"] == 1.0
    assert "over 2 tasks" in res.output


def test_missing_database_fails_only_that_task(bench, tmp_path):
    lines = smoke_lines(bench)[:2]
    lines[1]["db_path"] = "dbs/absent.sqlite"
    path = subset_dataset(bench, lines, "missing.jsonl")
    res = invoke("link", "--dataset", path, "--replay", bench["smoke_replay"], "--out", tmp_path, "--run-id", "m")
    assert res.exit_code == EXIT_PARTIAL
    assert "smoke_02 failed" in res.output and "database not found" in res.output
    assert (tmp_path / "m" / "reports" / "link" / "smoke_01.json").is_file()
    assert not (tmp_path / "m" / "reports" / "link" / "smoke_02.json").exists()


def test_link_then_generate_then_eval(bench, tmp_path):
    path = subset_dataset(bench, smoke_lines(bench)[:3], "three.jsonl")
    common = ["--dataset", path, "--out", tmp_path, "--run-id", "g"]
    assert invoke("link", "--replay", bench["smoke_replay"], *common).exit_code == EXIT_OK
    assert invoke("generate", "--replay", bench["smoke_replay"], "--n", 3, *common).exit_code == EXIT_OK
    res = invoke("eval", *common)
    assert res.exit_code == EXIT_OK, res.output
    agg = json.loads((tmp_path / "g" / "reports" / "eval.json").read_text())["aggregate"]
    assert agg["EX"] == 1.0 and agg["SRR"] == 1.0 and agg["linking_examples"] == 3
    tsv = (tmp_path / "g" / "reports" / "eval.tsv").read_text().splitlines()
    assert tsv[0].startswith("question_id\tex") and len(tsv) == 4


def test_oracle_schema_uses_gold_columns(bench, tmp_path):
    path = subset_dataset(bench, smoke_lines(bench)[1:2], "oracle.jsonl")
    res = invoke("generate", "--oracle-schema", "--n", 3, "--dataset", path, "--replay", bench["smoke_replay"],
                 "--out", tmp_path, "--run-id", "o")
    assert res.exit_code == EXIT_OK, res.output
    report = json.loads((tmp_path / "o" / "reports" / "generate" / "smoke_02.json").read_text())
    assert {ColumnRef.parse(c) for c in report["d_star"]} == {ColumnRef.parse(c) for c in TASKS[1].gold_columns}
    assert not (tmp_path / "o" / "reports" / "link").exists()


def test_single_sample_vote_is_degenerate(bench, tmp_path):
    res = invoke("run", "--config", bench["smoke_config"], "--n", 1, "--out", tmp_path, "--run-id", "n1")
    assert res.exit_code == EXIT_OK, res.output
    for task in TASKS:
        report = json.loads((tmp_path / "n1" / "reports" / "generate" / f"{task.qid}.json").read_text())
        assert len(report["candidates"]) == 1
        assert report["selected"] == 0 and not report["tie_break"]
        assert report["final_sql"] == report["candidates"][0]["final_sql"]


def _fake_run(root: Path, qid: str, sql: str) -> None:
    report = {"question_id": qid, "selected": 0, "unselectable": False, "candidates": [
        {"final_sql": sql, "succeeded": True, "confirmed": True, "rounds": 1, "queries": 2, "actions": 4,
         "tokens": 100}], "token_usage": {"total": 100}}
    path = root / "reports" / "generate" / f"{qid}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report))


@pytest.mark.parametrize("sql_of, mode, ex", [
    (lambda gold: gold, "strict", 1),
    (lambda gold: f"SELECT *, 'extra' FROM ({gold})", "relaxed", 1),
    (lambda gold: f"SELECT *, 'extra' FROM ({gold})", "strict", 0),
])
def test_eval_scores_saved_answers(bench, tmp_path, sql_of, mode, ex):
    task = TASKS[2]
    path = subset_dataset(bench, [x for x in smoke_lines(bench) if x["question_id"] == task.qid], "eval.jsonl")
    _fake_run(tmp_path / "e", task.qid, sql_of(task.gold_sql))
    res = invoke("eval", "--dataset", path, "--out", tmp_path, "--run-id", "e", "--mode", mode)
    assert res.exit_code == EXIT_OK, res.output
    row = json.loads((tmp_path / "e" / "reports" / "eval.json").read_text())["per_example"][0]
    assert row["ex"] == ex and row["mode"] == mode


def test_eval_without_run_directory_is_a_config_error(bench, tmp_path):
    res = invoke("eval", "--dataset", bench["smoke_dataset"], "--out", tmp_path, "--run-id", "none")
    assert res.exit_code == EXIT_CONFIG


def test_config_errors_exit_with_code_1(bench, tmp_path):
    assert invoke("run", "--dataset", bench["smoke_dataset"], "--out", tmp_path).exit_code == EXIT_CONFIG
    assert invoke("run", "--replay", bench["smoke_replay"], "--out", tmp_path).exit_code == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert invoke("run", "--config", bad).exit_code == EXIT_CONFIG
    res = invoke("run", "--config", bench["smoke_config"], "--dataset", tmp_path / "nope.jsonl", "--out", tmp_path)
    assert res.exit_code == EXIT_CONFIG


def test_repl_answers_the_case_study(bench, tmp_path):
    script = f"{casestudy.QUESTION}\n:trace\n:quit\nnever asked\n"
    res = invoke("repl", "--db", bench["case_db"], "--replay", bench["case_replay"], "--out", tmp_path,
                 input=script)
    assert res.exit_code == EXIT_OK, res.output
    out = res.output
    for name, version in casestudy.brute_force_top8(bench["case_db"]):
        assert name in out and version in out
    assert "[confirmed]" in out
    kinds = [line.split(". ", 1)[1] for line in out.splitlines() if line[:3].strip().rstrip(".").isdigit()]
    assert kinds == ["EXPLORE", "REFINE"] * 3 + ["SQL", "CONFIRM"]
    assert "never asked" not in out


def test_repl_trace_before_any_question(bench, tmp_path):
    res = invoke("repl", "--db", bench["case_db"], "--replay", bench["case_replay"], "--out", tmp_path,
                 input=":trace\n")
    assert res.exit_code == EXIT_OK and "(no episode yet)" in res.output


def test_bench_build(tmp_path):
    res = invoke("bench", "build", "--out", tmp_path)
    assert res.exit_code == EXIT_OK
    for key in ("smoke_dataset", "smoke_replay", "smoke_config", "case_dataset", "case_db"):
        assert f"{key}: " in res.output
    assert (tmp_path / "casestudy" / casestudy.QID / "task.json").is_file()
