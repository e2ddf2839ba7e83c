"""Acceptance suite: one test per primary criterion, each checked against its own time limit.

The terminal summary (see conftest.py) prints one PASS/FAIL/SKIP line per criterion.
"""

import hashlib
import json
import os
import random
import re
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from helpers import ScriptedBackend, sql
from oracles import (
    UNIVERSAL,
    brute_generation,
    brute_linking,
    build_corpus,
    fixture_inputs,
    reference_bullets,
    reference_tips,
    sqlite_column_stats,
)
from probesql import prompts
from probesql.agent import AgentState, Entry, EpisodeResult, run_episode
from probesql.bench import casestudy
from probesql.bench.fixtures import build_schools
from probesql.bench.smoke import TASKS
from probesql.cli import EXIT_OK, main
from probesql.guidance import GuidanceEngine
from probesql.linking import PruneDecision, fuse_pruned
from probesql.llm import Gateway
from probesql.metrics import GenerationScore, aggregate_linking, score_generation, score_linking
from probesql.schema import (
    Column,
    ColumnRef,
    DatabaseSchema,
    SchemaSubset,
    Table,
    introspect_sqlite,
    merge_identical_tables,
    partition_batches,
)
from probesql.selection import CandidateBundle, vote
from probesql.sqlexec import ExecError, ResultSet, ResultSummary, canonicalize, compare, execute, summarize

CRITERIA = {
    "test_rule_engine_oracle": "rule engine matches the reference matcher on 200 fixtures (< 5s)",
    "test_pruning_algebra": "pruning fusion keeps exactly (batch - del) | keep over 10,000 triples (< 10s)",
    "test_budget_enforcement": "20 adversarial scripts stay within 40 actions / 56k tokens, forced at step 39",
    "test_sigma_compression": "result compression matches brute-force statistics on 1,000 cases (< 5s)",
    "test_metric_oracle": "linking and generation metrics match brute force on 50 bundles (1e-12)",
    "test_comparator_laws": "strict implies relaxed; canonical key is permutation invariant",
    "test_smoke_benchmark": "smoke benchmark: EX=1.0 strict, SRR=1.0, byte-identical traces (< 60s)",
    "test_case_study_replay": "sf_bq028 replay: NULL timestamps found, ordinal plan, brute-force top 8, EX=1",
    "test_read_only_safety": "database unchanged by a smoke run; 30 write statements rejected",
    "test_live_backend": "live backend: 5 BIRD-dev tasks within budget, tokens_per_query reported",
}


def cli(*args, input=None):
    return CliRunner().invoke(main, [str(a) for a in args], input=input, catch_exceptions=False)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- 1 ----------------------------------------------------------------------


def test_rule_engine_oracle():
    start = time.perf_counter()
    corpus = build_corpus(200)
    engine = GuidanceEngine.default()
    positives = {r.id: 0 for r in engine.rules}
    negatives = dict(positives)
    for fx in corpus:
        q, e, plan, schema = fixture_inputs(fx)
        got = {t.id for t in engine.retrieve(q, e, plan, schema)}
        assert got == reference_tips(fx), fx
        assert UNIVERSAL <= got
        fired = set(engine.fired_rules(engine.context(q, e, plan, schema)))
        expected = reference_bullets(fx)
        assert fired == {k for k, v in expected.items() if v}, fx
        for rid in positives:
            if rid in fired:
                positives[rid] += 1
            else:
                negatives[rid] += 1
    assert len(corpus) == 200
    assert all(positives.values()), [r for r, n in positives.items() if not n]
    assert all(negatives.values()), [r for r, n in negatives.items() if not n]
    assert time.perf_counter() - start < 5


# -- 2 ----------------------------------------------------------------------


def _random_schema(rng: random.Random, i: int) -> DatabaseSchema:
    tables = []
    for t in range(rng.randint(1, 6)):
        cols = tuple(Column(f"c{j}", rng.choice(["INTEGER", "TEXT", "REAL"])) for j in range(rng.randint(1, 8)))
        tables.append(Table(f"t{i}_{t}", cols))
    return DatabaseSchema(f"s{i}", tuple(tables))


def test_pruning_algebra():
    start = time.perf_counter()
    rng = random.Random(2024)
    layouts = []
    for i in range(40):
        schema = _random_schema(rng, i)
        batches = partition_batches(merge_identical_tables(schema), 5, rng.choice([20, 40, 400]))
        layouts.append((schema, batches))
    overlaps = 0
    for _ in range(10_000):
        schema, batches = rng.choice(layouts)
        decisions, expected = [], set()
        for b, batch in enumerate(batches):
            cols = sorted(batch.columns())
            dele = {c for c in cols if rng.random() < 0.5}
            keep = {c for c in cols if rng.random() < 0.3}
            if dele and rng.random() < 0.5:
                keep.add(rng.choice(sorted(dele)))  # the same column in both sets
            overlaps += bool(dele & keep)
            decisions.append(PruneDecision(b, frozenset(dele), frozenset(keep)))
            expected |= (set(cols) - dele) | keep
        rng.shuffle(decisions)
        assert fuse_pruned(schema, batches, decisions).refs == expected
    assert overlaps > 1000
    assert time.perf_counter() - start < 10


# -- 3 ----------------------------------------------------------------------

COUNT = "SELECT COUNT(*) FROM schools WHERE County = 'Alameda'"
# never-confirm mixes: a valid query may run, but nothing ever confirms it
MENU = [
    sql("EXPLORE", "SELECT County FROM schools LIMIT 3"),
    sql("SQL", "SELECT nope FROM schools"),
    sql("SQL", COUNT),
    "[REFINE]\nkeep going",
    "I think the answer is 5.",
    ("[EXPLORE] SELECT", True),
    "",
    "[ANSWER] 5",
]


def _mix(seed, menu=MENU):
    rng = random.Random(seed)
    return lambda i, r: rng.choice(menu)


def _big(n):
    return "x" * n


ADVERSARIES = {
    "never_confirm_valid_sql": lambda i, r: sql("SQL", COUNT),
    "never_confirm_broken_sql": lambda i, r: sql("SQL", "SELECT missing FROM schools"),
    "always_explore": lambda i, r: sql("EXPLORE", "SELECT DISTINCT County FROM schools"),
    "always_explore_many_statements": lambda i, r: sql("EXPLORE", *["SELECT COUNT(*) FROM frpm"] * 6),
    "always_refine": lambda i, r: "[REFINE]\nstill thinking",
    "garbage_prose": lambda i, r: "Sure! Here is what I think about the schools table.",
    "empty_output": lambda i, r: "",
    "always_truncated": lambda i, r: ("[SQL]\n```sql\nSELECT", True),
    "confirm_without_sql": lambda i, r: "[CONFIRM]",
    "write_attempts": lambda i, r: sql("SQL", "DELETE FROM schools"),
    "unknown_tag": lambda i, r: "[ANSWER] 5",
    "explore_refine_loop": lambda i, r: sql("EXPLORE", "SELECT 1") if i % 2 == 0 else "[REFINE]\nagain",
    "random_mix_a": _mix(1),
    "random_mix_b": _mix(2),
    "huge_garbage": lambda i, r: _big(24_000),
    "huge_observations": lambda i, r: sql("EXPLORE", "SELECT hex(zeroblob(12000))"),
    "huge_refine": lambda i, r: "[REFINE]\n" + _big(16_000),
    "huge_sql_text": lambda i, r: sql("SQL", "SELECT 1 /* " + _big(20_000) + " */"),
    "random_mix_huge": _mix(3, MENU + [_big(30_000), sql("EXPLORE", "SELECT hex(zeroblob(9000))")]),
    "ignore_forced_directive": lambda i, r: (
        "[REFINE]\nno" if prompts.FORCED_SYNTHESIS in r.text() else sql("SQL", "SELECT bad")),
}


def test_budget_enforcement(tmp_path):
    db = build_schools(tmp_path / "schools.sqlite")
    schema = introspect_sqlite(db)
    d_star = SchemaSubset(schema, frozenset({ColumnRef("schools", "County"), ColumnRef("frpm", "CDSCode")}))
    assert len(ADVERSARIES) == 20
    action_bound = token_bound = 0
    for name, policy in ADVERSARIES.items():
        backend = ScriptedBackend(policy)
        res = run_episode("How many schools are in Alameda?", "", d_star, "", db, Gateway(backend))
        steps = [t["tokens"] for t in res.trace]
        assert res.action_count <= 40, name
        assert sum(steps) == res.token_count
        # the loop stops before a step once 56k is reached, so only the last response can cross it
        assert res.token_count - steps[-1] < 56_000, name
        assert not res.confirmed, name
        before = 0
        for i, req in enumerate(backend.requests):
            forced = i >= 38 or before >= 52_000
            assert (prompts.FORCED_SYNTHESIS in req.text()) == forced, (name, i)
            if forced:
                rec = res.trace[i]
                assert not (rec["kind"] in ("EXPLORE", "REFINE") and rec["honored"]), (name, i)
            before += steps[i]
        # without a confirmation the episode only ends on one of the two hard limits
        assert res.action_count == 40 or res.token_count >= 56_000, name
        if len(steps) >= 39 and sum(steps[:38]) < 52_000:
            action_bound += 1
            assert res.first_forced_prompt == 39, name
            assert prompts.FORCED_SYNTHESIS in backend.requests[38].text()
            assert prompts.FORCED_SYNTHESIS not in backend.requests[37].text()
        else:
            token_bound += 1
            # one large step may jump over the forced window; the per-request check above covers the rest
            assert res.token_count >= 52_000, name
    assert action_bound >= 10 and token_bound >= 4, (action_bound, token_bound)


# -- 4 ----------------------------------------------------------------------


def _random_value(rng: random.Random, kind: str):
    if rng.random() < 0.2:
        return None
    if kind == "mixed":
        kind = rng.choice(["integer", "real", "text"])
    if kind == "integer":
        return rng.randint(-50, 50)
    if kind == "real":
        return rng.choice([rng.uniform(-1e6, 1e6), float(rng.randint(-5, 5)), rng.random()])
    if kind == "numeric":
        return rng.choice([rng.randint(-9, 9), rng.random() * 10])
    return "".join(rng.choice("abAB é_") for _ in range(rng.randint(0, 4)))


def test_sigma_compression():
    start = time.perf_counter()
    rng = random.Random(99)
    compressed = 0
    for _ in range(1000):
        n_rows = rng.choice([0, 1, 29, 30, 31, 32, rng.randint(0, 120)])
        kinds = [rng.choice(["integer", "real", "text", "mixed", "numeric", "null"]) for _ in range(rng.randint(1, 4))]
        rows = [tuple(None if k == "null" else _random_value(rng, k) for k in kinds) for _ in range(n_rows)]
        rs = ResultSet.from_rows([f"c{i}" for i in range(len(kinds))], rows)
        out = summarize(rs)
        if n_rows <= 30:
            assert out is rs
            continue
        compressed += 1
        assert isinstance(out, ResultSummary)
        assert out.row_count == n_rows and out.head_rows == rs.rows[:10]
        for i, stats in enumerate(out.stats):
            ref = sqlite_column_stats([r[i] for r in rows])
            assert stats.null_ratio == ref["null_ratio"]
            assert stats.distinct_count == ref["distinct"]
            assert (stats.min_value, stats.max_value) == (ref["min"], ref["max"])
            assert stats.inferred_type == ref["type"]
    assert compressed > 200
    assert time.perf_counter() - start < 5


# -- 5 ----------------------------------------------------------------------

CELLS = [None, -2, -1, 0, 1, 2, 3, 0.5, 1.25, 2.0, "a", "b", " a", "zz"]


def _random_result(rng, ncols):
    return [f"c{i}" for i in range(ncols)], [tuple(rng.choice(CELLS) for _ in range(ncols))
                                             for _ in range(rng.randint(0, 4))]


def _shuffled(rng, result):
    cols, rows = result
    perm = list(range(len(cols)))
    rng.shuffle(perm)
    rows = [tuple(r[i] for i in perm) for r in rows]
    rng.shuffle(rows)
    return [cols[i] for i in perm], rows


def _random_actions(rng):
    kinds = ["EXPLORE", "REFINE", "SQL", "CONFIRM", "INVALID"]
    return [(rng.choice(kinds), rng.random() < 0.8, rng.randint(1, 4)) for _ in range(rng.randint(0, 12))]


def test_metric_oracle():
    rng = random.Random(5)
    bundles, raw = {"strict": [], "relaxed": []}, []
    golds, selections = {"strict": [], "relaxed": []}, {"strict": [], "relaxed": []}
    link_entries, link_brute = [], []
    for _ in range(50):
        mode = rng.choice(["strict", "relaxed"])
        ncols = rng.randint(1, 3)
        pool = [_random_result(rng, ncols) for _ in range(3)]
        gold = rng.choice(pool)
        if mode == "relaxed" and rng.random() < 0.5:
            # candidates carry one extra column
            pool = [(c + ["extra"], [r + (rng.choice(CELLS),) for r in rows]) for c, rows in pool]
            gold = (pool[0][0][:-1], [r[:-1] for r in pool[0][1]])
        results, episodes, actions = [], [], []
        for _ in range(8):
            res = None if rng.random() < 0.15 else _shuffled(rng, rng.choice(pool))
            acts = _random_actions(rng)
            state = AgentState(history=[Entry(i + 1, k, "", honored=h, statements=(("q", "o"),) * n)
                                        for i, (k, h, n) in enumerate(acts)])
            rs = None if res is None else ResultSet.from_rows(*res)
            episodes.append(EpisodeResult("q", rs, state.rounds, state.query_count, True, rs is None, len(acts), 0))
            results.append(res)
            actions.append(acts)
        gold_failed = rng.random() < 0.1
        bundle = CandidateBundle.from_episodes(episodes)
        bundles[mode].append(bundle)
        selections[mode].append(vote(bundle))
        golds[mode].append(ExecError("syntax", "x") if gold_failed else ResultSet.from_rows(*gold))
        raw.append({"results": results, "gold": None if gold_failed else gold, "mode": mode, "actions": actions})

        universe = [(f"t{t}", f"c{c}") for t in range(3) for c in range(4)]
        g = rng.sample(universe, rng.randint(1, 5))
        p = rng.sample(universe, rng.randint(0, 8))
        link_entries.append(score_linking([ColumnRef(*x) for x in p], [ColumnRef(*x) for x in g]))
        link_brute.append(brute_linking(p, g))

    scores = [score_generation(bundles[m], golds[m], selections[m], m) for m in ("strict", "relaxed")]
    got = GenerationScore(scores[0].entries + scores[1].entries).aggregate()
    want = brute_generation(raw)
    assert got["examples"] == want["examples"]
    for key in ("EX", "Pass@k", "EX@k", "R", "Q"):
        assert abs(got[key] - want[key]) <= 1e-12, key

    agg = aggregate_linking(link_entries)
    for i, key in enumerate(("NSR", "NSP", "NSF")):
        assert abs(agg[key] - sum(b[i] for b in link_brute) / 50) <= 1e-12, key
    assert abs(agg["SRR"] - sum(b[3] for b in link_brute) / 50) <= 1e-12


# -- 6 ----------------------------------------------------------------------


def test_comparator_laws():
    rng = random.Random(11)
    violations = 0
    for _ in range(500):
        ncols = rng.randint(1, 3)
        gold = _random_result(rng, ncols)
        pred = _shuffled(rng, gold) if rng.random() < 0.6 else _random_result(rng, ncols)
        if rng.random() < 0.3:
            pred = (pred[0] + ["x"], [r + (rng.choice(CELLS),) for r in pred[1]])
        p, g = ResultSet.from_rows(*pred), ResultSet.from_rows(*gold)
        if compare(p, g, "strict") and not compare(p, g, "relaxed"):
            violations += 1
    for _ in range(1000):
        result = _random_result(rng, rng.randint(1, 4))
        if canonicalize(ResultSet.from_rows(*_shuffled(rng, result))) != canonicalize(ResultSet.from_rows(*result)):
            violations += 1
    assert violations == 0


# -- 7 ----------------------------------------------------------------------


def _tree(root: Path, sub: str) -> dict[str, bytes]:
    base = root / sub
    return {str(p.relative_to(base)): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}


def test_smoke_benchmark(bench, tmp_path):
    start = time.perf_counter()
    snapshots = []
    for k in range(3):
        res = cli("run", "--config", bench["smoke_config"], "--out", tmp_path, "--run-id", f"r{k}")
        assert res.exit_code == EXIT_OK, res.output
        run_dir = tmp_path / f"r{k}"
        snapshots.append((_tree(run_dir, "traces"), _tree(run_dir, "reports"), _tree(run_dir, "answers")))
        report = json.loads((run_dir / "reports" / "eval.json").read_text())
        agg = report["aggregate"]
        assert report["mode"] == "strict"
        assert agg["EX"] == 1.0 and agg["SRR"] == 1.0
        assert agg["generation_examples"] == 10 == len(TASKS) and agg["linking_examples"] == 10
    assert snapshots[0] == snapshots[1] == snapshots[2]
    assert len(snapshots[0][0]) >= 40  # gateway traces plus three episode traces per task
    assert time.perf_counter() - start < 60


# -- 8 ----------------------------------------------------------------------


def test_case_study_replay(bench, tmp_path):
    res = cli("run", "--config", bench["case_config"], "--out", tmp_path, "--run-id", "case")
    assert res.exit_code == EXIT_OK, res.output
    run_dir = tmp_path / "case"
    qid = casestudy.QID
    trace = [json.loads(x) for x in (run_dir / "traces" / qid / "episode_0.jsonl").read_text().splitlines() if x]

    # exploration reveals that release rows carry NULL upstream timestamps
    first_sql = next(i for i, t in enumerate(trace) if t["kind"] == "SQL")
    explores = [t for t in trace[:first_sql] if t["kind"] == "EXPLORE" and t["honored"]]
    assert explores and "UpstreamPublishedAt" in explores[0]["body"]
    assert re.search(r"\|\s*NULL\b|^NULL\b", explores[0]["observation"], re.M)
    nulls = execute('SELECT COUNT(*) FROM PACKAGEVERSIONS WHERE System = \'NPM\' AND UpstreamPublishedAt IS NULL',
                    bench["case_db"])
    assert nulls.rows[0][0] > 0

    # the refined plan switches to the VersionInfo ordinal, and so does the final query
    refines = [t for t in trace[:first_sql] if t["kind"] == "REFINE" and t["honored"]]
    assert refines and "VersionInfo Ordinal" in refines[0]["body"]
    report = json.loads((run_dir / "reports" / "generate" / f"{qid}.json").read_text())
    final_sql = report["final_sql"]
    assert re.search(r"ORDER BY json_extract\(\"VersionInfo\", '\$\.Ordinal'\) DESC", final_sql)
    assert "UpstreamPublishedAt" not in final_sql

    # the final result is the brute-force top 8
    final = execute(final_sql, bench["case_db"])
    top8 = casestudy.brute_force_top8(bench["case_db"])
    assert sorted((r[0], r[1]) for r in final.rows) == sorted(top8)
    stars = [r[2] for r in final.rows]
    assert stars == sorted(stars, reverse=True)

    ev = json.loads((run_dir / "reports" / "eval.json").read_text())
    row = ev["per_example"][0]
    assert row["mode"] == "relaxed" and row["ex"] is True


# -- 9 ----------------------------------------------------------------------

WRITES = [
    "INSERT INTO schools (CDSCode) VALUES ('x')",
    "UPDATE schools SET County = 'X'",
    "DELETE FROM schools",
    "DROP TABLE schools",
    "CREATE TABLE evil (a)",
    "ALTER TABLE schools ADD COLUMN evil TEXT",
    "ALTER TABLE schools RENAME TO s2",
    "REPLACE INTO schools (CDSCode) VALUES ('x')",
    "INSERT OR REPLACE INTO schools (CDSCode) VALUES ('x')",
    "ATTACH DATABASE 'other.sqlite' AS other",
    "DETACH DATABASE main",
    "PRAGMA writable_schema = 1",
    "PRAGMA user_version = 7",
    "PRAGMA journal_mode = DELETE",
    "VACUUM",
    "REINDEX",
    "ANALYZE",
    "CREATE INDEX ix ON schools (County)",
    "CREATE VIEW v AS SELECT 1",
    "CREATE TRIGGER t AFTER INSERT ON schools BEGIN SELECT 1; END",
    "CREATE TEMP TABLE tmp (a)",
    "WITH x AS (SELECT 1) DELETE FROM schools",
    "WITH x AS (SELECT 1) INSERT INTO schools (CDSCode) SELECT * FROM x",
    "SELECT 1; DROP TABLE schools",
    "/* harmless */ DELETE FROM schools",
    "-- comment\nUPDATE schools SET County = NULL",
    "  delete from schools",
    "BEGIN; DELETE FROM schools; COMMIT",
    "SAVEPOINT s1",
    "DROP VIEW IF EXISTS v",
]


def test_read_only_safety(bench, tmp_path):
    dbs = sorted((bench["smoke_dataset"].parent / "dbs").glob("*.sqlite"))
    before = {p.name: sha256(p) for p in dbs}
    res = cli("run", "--config", bench["smoke_config"], "--out", tmp_path, "--run-id", "ro")
    assert res.exit_code == EXIT_OK, res.output
    assert {p.name: sha256(p) for p in dbs} == before

    db = build_schools(tmp_path / "schools.sqlite")
    digest = sha256(db)
    assert len(WRITES) == 30
    outcomes = [execute(w, db, mode="read_only") for w in WRITES]
    assert all(isinstance(o, ExecError) and o.kind == "write_rejected" for o in outcomes)
    assert sha256(db) == digest
    assert not (tmp_path / "other.sqlite").exists()


# -- 10 ---------------------------------------------------------------------


@pytest.mark.live
def test_live_backend(tmp_path):
    if not os.environ.get("APEX_BASE_URL"):
        pytest.skip("APEX_BASE_URL is not set")
    dataset = os.environ.get("APEX_BIRD_DEV")
    if not dataset:
        pytest.skip("APEX_BIRD_DEV (path to the BIRD dev folder) is not set")
    from probesql.config import apply_env, config_from_dict
    from probesql.datasets import load_tasks
    from probesql.pipeline import Run, evaluate_run

    _, tasks = load_tasks(dataset, "bird")
    tasks = tasks[:5]
    cfg = apply_env(config_from_dict({"backend": {"kind": "http"}, "sampling": {"n": 1}, "workers": 1}))
    run = Run.open(cfg, tmp_path / "live")
    results = run.run_tasks(tasks, "run")
    assert not [r for r in results if "error" in r], results
    for task in tasks:
        report = json.loads(run.generate_report_path(task.question_id).read_text())
        for cand in report["candidates"]:
            assert cand["actions"] <= 40
            path = tmp_path / "live" / "traces" / task.question_id / f"episode_{cand['index']}.jsonl"
            steps = [json.loads(x)["tokens"] for x in path.read_text().splitlines() if x]
            assert sum(steps) - steps[-1] < 56_000
    agg = evaluate_run(run, tasks, "bird").aggregate
    assert agg["tokens_per_query"] > 0
    print(f"tokens_per_query={agg['tokens_per_query']:.1f} EX={agg['EX']:.3f}")
