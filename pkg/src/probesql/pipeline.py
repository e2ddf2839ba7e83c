"""Per-task orchestration of linking, generation and evaluation, and run artifacts.

Run directory layout::

    <out>/<run_id>/config.json
    <out>/<run_id>/traces/<qid>.<stage>.jsonl        gateway calls
    <out>/<run_id>/traces/<qid>/episode_<j>.jsonl     agent actions
    <out>/<run_id>/reports/link/<qid>.json
    <out>/<run_id>/reports/generate/<qid>.json
    <out>/<run_id>/answers/<qid>.sql
    <out>/<run_id>/reports/eval.json, eval.tsv, figures/*.png
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .agent import EpisodeResult, prefilter_evidence, run_episode
from .config import RunConfig
from .datasets import DEFAULT_MODE, TaskRecord
from .errors import ConfigError, GoldExecutionFailure, ParseFailure
from .guidance import GuidanceEngine, realize_plan, render_guidance, retrieve_tips
from .linking import LinkResult, LogicalPlan, aggregate_plans, generate_plans, link_schema
from .llm import Gateway, HttpBackend, LogicalClock, ReplayBackend, ReplayScript, TraceLog, load_replay_document
from .metrics import (
    GenerationScore,
    LinkingEntry,
    aggregate_linking,
    extract_gold_columns,
    score_example,
    score_linking,
)
from .schema import ColumnRef, DatabaseSchema, SchemaSubset, introspect_sqlite, load_schema, serialize_for_prompt
from .selection import Candidate, CandidateBundle, MajorityVote, Selection
from .sqlexec import Database, ExecError, ResultSet, canonicalize, execute

logger = logging.getLogger(__name__)


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class Run:
    cfg: RunConfig
    run_dir: Path
    engine: GuidanceEngine
    replay_doc: dict | None = None
    shared_script: ReplayScript | None = None
    _http: HttpBackend | None = field(default=None, repr=False)

    @classmethod
    def open(cls, cfg: RunConfig, run_dir: str | Path, shared_replay: bool = False, scoring_only: bool = False) -> "Run":
        """``shared_replay`` serves every task from one script (per-task sections concatenated).

        ``scoring_only`` opens an existing run for evaluation: no backend, config snapshot untouched.
        """
        cfg.validate(check_backend=not scoring_only)
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if not scoring_only:
            _dump(run_dir / "config.json", cfg.snapshot())
        engine = GuidanceEngine.from_files(cfg.tips_path, cfg.rules_path)
        doc = None
        shared = None
        if cfg.backend.kind == "replay" and not scoring_only:
            try:
                doc = load_replay_document(cfg.backend.replay)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read replay script {cfg.backend.replay}: {exc}") from exc
            if "tasks" not in doc:
                shared = ReplayScript.from_list(doc.get("entries", []))
            elif shared_replay:
                shared = ReplayScript.from_list([e for t in doc["tasks"].values() for e in t.get("entries", [])])
        return cls(cfg, run_dir, engine, doc, shared)

    # -- infrastructure ---------------------------------------------------

    def backend(self, qid: str):
        if self.cfg.backend.kind == "http":
            if self._http is None:
                b = self.cfg.backend
                self._http = HttpBackend(b.base_url, b.model, self.cfg.api_key(), timeout=b.timeout)
            return self._http
        if self.shared_script is not None:
            return ReplayBackend(self.shared_script)
        entries = self.replay_doc["tasks"].get(qid, {}).get("entries", [])
        return ReplayBackend(entries)

    def gateway(self, qid: str, stage: str) -> Gateway:
        path = self.run_dir / "traces" / f"{qid}.{stage}.jsonl"
        if path.exists():
            path.unlink()
        clock = LogicalClock() if self.cfg.backend.kind == "replay" else time.time
        return Gateway(self.backend(qid), trace=TraceLog(path, clock))

    def schema_for(self, task: TaskRecord) -> DatabaseSchema:
        if task.schema_path:
            return load_schema(task.schema_path)
        return introspect_sqlite(task.db_path)

    def check_task(self, task: TaskRecord) -> None:
        if not task.db_exists:
            raise FileNotFoundError(f"database not found: {task.db_path}")

    def link_report_path(self, qid: str) -> Path:
        return self.run_dir / "reports" / "link" / f"{qid}.json"

    def generate_report_path(self, qid: str) -> Path:
        return self.run_dir / "reports" / "generate" / f"{qid}.json"

    # -- stages -------------------------------------------------------------

    def link(self, task: TaskRecord, gw: Gateway | None = None) -> tuple[dict, LinkResult]:
        self.check_task(task)
        gw = gw or self.gateway(task.question_id, "link")
        schema = self.schema_for(task)
        evidence = self.evidence_for(task, gw)
        result = link_schema(gw, task.question, evidence, schema, Database(task.db_path), self._link_config())
        report = result.report(task.question_id)
        _dump(self.link_report_path(task.question_id), report)
        return report, result

    def _link_config(self):
        lc = self.cfg.linking
        lc.exec_timeout = self.cfg.exec_timeout
        return lc

    def evidence_for(self, task: TaskRecord, gw: Gateway) -> str:
        if task.knowledge:
            filtered = prefilter_evidence(gw, task.question, task.knowledge, task.knowledge_name,
                                          self.cfg.evidence_filter_min_tokens)
            return "\n\n".join(x for x in (task.evidence, filtered) if x)
        return task.evidence

    def generate(
        self,
        task: TaskRecord,
        d_star: SchemaSubset,
        plan: LogicalPlan | None,
        gw: Gateway | None = None,
        evidence: str | None = None,
        n: int | None = None,
        includes_linking: bool = False,
    ) -> dict:
        self.check_task(task)
        gw = gw or self.gateway(task.question_id, "generate")
        cfg = self.cfg
        n = n or cfg.sampling.n
        if evidence is None:
            evidence = self.evidence_for(task, gw)
        if plan is None:
            candidates = generate_plans(gw, task.question, evidence, cfg.linking.n_plans, cfg.linking.t_sample)
            plan = aggregate_plans(gw, task.question, candidates, cfg.linking.t_agg)
        realized = realize_plan(gw, task.question, evidence, d_star, plan, cfg.linking.t_stage)
        tips = retrieve_tips(task.question, evidence, realized, d_star, self.engine)
        guidance = render_guidance(tips)
        db = Database(task.db_path)

        children = [gw.fork() for _ in range(n)]

        def sample(j: int) -> EpisodeResult:
            return run_episode(
                task.question, evidence, d_star, guidance, db, children[j], cfg.budget,
                tag=f"sql_agent_step.s{j}", exec_timeout=cfg.exec_timeout, allow_writes=cfg.allow_writes,
                temperature=cfg.sampling.t_agent,
            )

        episodes, error = _gather(sample, n, min(n, 8))
        for child in children:
            gw.absorb(child)
        if error is not None:
            raise error

        bundle = CandidateBundle.from_episodes(episodes)
        selector = MajorityVote(gw, task.question, serialize_for_prompt(d_star))
        selection = selector.select(bundle)
        for j, ep in enumerate(episodes):
            ep.write_trace(self.run_dir / "traces" / task.question_id / f"episode_{j}.jsonl")
        final_sql = selection.candidate.episode.final_sql
        answer = self.run_dir / "answers" / f"{task.question_id}.sql"
        answer.parent.mkdir(parents=True, exist_ok=True)
        answer.write_text((final_sql or "") + "\n", encoding="utf-8")
        report = {
            "question_id": task.question_id,
            "plan": list(plan.steps),
            "tips": [t.id for t in tips],
            "realized_steps": len(realized.steps),
            "d_star": [str(r) for r in sorted(d_star.refs)],
            "candidates": [
                {
                    "index": c.index,
                    "final_sql": c.episode.final_sql,
                    "confirmed": c.episode.confirmed,
                    "failed": c.episode.failed,
                    "succeeded": c.episode.succeeded,
                    "key": c.key,
                    "rounds": c.episode.rounds,
                    "queries": c.episode.query_count,
                    "actions": c.episode.action_count,
                    "tokens": c.episode.token_count,
                    "first_forced_prompt": c.episode.first_forced_prompt,
                }
                for c in bundle.candidates
            ],
            "selected": selection.index,
            "unselectable": selection.unselectable,
            "tie_break": selection.tie_break,
            "tally": selection.tally,
            "final_sql": final_sql,
            "token_usage": gw.ledger.to_dict(),
            "includes_linking": includes_linking,
        }
        _dump(self.generate_report_path(task.question_id), report)
        return report

    def run_task(self, task: TaskRecord, stage: str, oracle: bool = False, n: int | None = None) -> dict:
        """One task through ``link``, ``generate`` or ``run`` (both)."""
        qid = task.question_id
        if stage == "link":
            report, _ = self.link(task)
            return report
        if stage == "generate":
            if oracle:
                return self.generate(task, self.oracle_subset(task), None, n=n)
            link = json.loads(self.link_report_path(qid).read_text(encoding="utf-8"))
            schema = self.schema_for(task)
            refs = [ColumnRef(c["table"], c["column"]) for c in link["final_columns"]]
            d_star = SchemaSubset(schema, frozenset(refs))
            return self.generate(task, d_star, LogicalPlan(tuple(link["plan"])), n=n)
        gw = self.gateway(qid, "run")
        if oracle:
            return self.generate(task, self.oracle_subset(task), None, gw=gw, n=n)
        self.check_task(task)
        schema = self.schema_for(task)
        evidence = self.evidence_for(task, gw)
        result = link_schema(gw, task.question, evidence, schema, Database(task.db_path), self._link_config())
        _dump(self.link_report_path(qid), result.report(qid))
        return self.generate(task, result.d_star, result.plan, gw=gw, evidence=evidence, n=n, includes_linking=True)

    def oracle_subset(self, task: TaskRecord) -> SchemaSubset:
        schema = self.schema_for(task)
        refs = gold_refs(task, schema)
        if not refs:
            raise ConfigError(f"task {task.question_id}: no gold columns for the oracle schema")
        return SchemaSubset(schema, frozenset(refs))

    def run_tasks(self, tasks: Sequence[TaskRecord], stage: str, oracle: bool = False, n: int | None = None) -> list[dict]:
        def one(i: int) -> dict:
            task = tasks[i]
            try:
                return self.run_task(task, stage, oracle, n)
            except Exception as exc:  # isolate task failures
                logger.exception("task %s failed", task.question_id)
                return {"question_id": task.question_id, "error": f"{type(exc).__name__}: {exc}"}

        results, _ = _gather(one, len(tasks), self.cfg.workers)
        return results


def _gather(fn: Callable[[int], object], n: int, workers: int):
    """Run fn(0..n-1) on a pool; results in index order plus the first exception."""
    if n == 0:
        return [], None
    with ThreadPoolExecutor(max_workers=max(1, min(workers, n))) as pool:
        futures = [pool.submit(fn, i) for i in range(n)]
        out, error = [], None
        for f in futures:
            try:
                out.append(f.result())
            except BaseException as exc:
                error = error or exc
                out.append(None)
    return out, error


def gold_refs(task: TaskRecord, schema: DatabaseSchema) -> set[ColumnRef] | None:
    refs = task.gold_refs()
    if refs is not None:
        return refs
    if task.gold_sql:
        try:
            return set(extract_gold_columns(task.gold_sql, schema).refs)
        except ParseFailure:
            logger.warning("cannot parse gold SQL of %s", task.question_id)
    return None


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    dataset: str
    mode: str
    per_example: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "mode": self.mode, "notes": self.notes,
                "per_example": self.per_example, "aggregate": self.aggregate}


def _rebuild_episode(cand: dict, db: Database, timeout: float) -> EpisodeResult:
    result = None
    if cand.get("succeeded") and cand.get("final_sql"):
        outcome = execute(cand["final_sql"], db, mode="read_only", timeout=timeout)
        result = outcome if isinstance(outcome, ResultSet) else None
    return EpisodeResult(
        final_sql=cand.get("final_sql"), final_result=result, rounds=int(cand.get("rounds", 0)),
        query_count=int(cand.get("queries", 0)), confirmed=bool(cand.get("confirmed")),
        failed=result is None, action_count=int(cand.get("actions", 0)), token_count=int(cand.get("tokens", 0)),
    )


def execute_gold(task: TaskRecord, db: Database, timeout: float) -> ResultSet:
    if not task.gold_sql:
        raise GoldExecutionFailure(f"task {task.question_id} has no gold SQL")
    outcome = execute(task.gold_sql, db, mode="read_only", timeout=timeout)
    if isinstance(outcome, ExecError):
        raise GoldExecutionFailure(f"gold SQL of {task.question_id} failed: {outcome.render()}")
    return outcome


def evaluate_run(run: Run, tasks: Sequence[TaskRecord], dataset_kind: str, mode: str | None = None) -> EvalReport:
    forced_mode = mode or run.cfg.mode
    report = EvalReport(dataset_kind, forced_mode or DEFAULT_MODE.get(dataset_kind, "strict"), notes=[
        "NSF is the macro average of per-example F1.",
        "R and Q are pooled means over every sampled candidate.",
        "Examples whose gold SQL fails are excluded from generation aggregates.",
    ])
    link_entries: list[LinkingEntry] = []
    gen_entries = []
    tokens = []
    for task in tasks:
        row: dict = {"question_id": task.question_id}
        report.per_example.append(row)
        task_mode = forced_mode or task.mode or report.mode
        try:
            run.check_task(task)
            db = Database(task.db_path)
            schema = run.schema_for(task)
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            continue
        task_tokens = 0
        link_path = run.link_report_path(task.question_id)
        gold = gold_refs(task, schema)
        if link_path.exists():
            link = json.loads(link_path.read_text(encoding="utf-8"))
            task_tokens += int(link.get("token_usage", {}).get("total", 0))
            if gold:
                pred = [ColumnRef(c["table"], c["column"]) for c in link["final_columns"]]
                e = score_linking(pred, gold)
                link_entries.append(e)
                row["linking"] = {"recall": e.recall, "precision": e.precision, "f1": e.f1,
                                  "covered": e.covered, "retained": e.retained}
        if task.gold_sql:
            try:
                g = extract_gold_columns(task.gold_sql, schema)
                if g.ambiguous or g.unresolved:
                    row["gold_column_flags"] = {"ambiguous": g.ambiguous, "unresolved": g.unresolved}
            except ParseFailure as exc:
                row["gold_column_flags"] = {"parse_error": str(exc)}
        gen_path = run.generate_report_path(task.question_id)
        if not gen_path.exists():
            row["error"] = row.get("error") or "no generation report"
            tokens.append(task_tokens)
            continue
        gen = json.loads(gen_path.read_text(encoding="utf-8"))
        usage = gen.get("token_usage", {})
        # a combined run records linking calls in the same ledger
        if gen.get("includes_linking"):
            task_tokens = int(usage.get("total", 0))
        else:
            task_tokens += int(usage.get("total", 0))
        tokens.append(task_tokens)
        try:
            gold_result = execute_gold(task, db, run.cfg.exec_timeout)
        except GoldExecutionFailure as exc:
            row["gold_error"] = str(exc)
            continue
        episodes = [_rebuild_episode(c, db, run.cfg.exec_timeout) for c in gen["candidates"]]
        bundle = CandidateBundle([Candidate(i, ep, canonicalize(ep.final_result) if ep.final_result else None)
                                  for i, ep in enumerate(episodes)])
        sel_index = int(gen["selected"])
        selection = Selection(sel_index, bundle.candidates[sel_index], unselectable=bool(gen.get("unselectable")))
        entry = score_example(bundle, selection, gold_result, task_mode)
        gen_entries.append(entry)
        row.update({"ex": entry.ex, "pass_at_k": entry.pass_at_k, "ex_at_k": entry.ex_at_k,
                    "correct": list(entry.correct), "rounds": list(entry.rounds), "queries": list(entry.queries),
                    "tokens": task_tokens, "mode": task_mode})
    agg = aggregate_linking(link_entries) if link_entries else {}
    agg = {k: v for k, v in agg.items() if k != "examples"}
    if link_entries:
        agg["linking_examples"] = len(link_entries)
    gs = GenerationScore(gen_entries).aggregate()
    agg.update({k: gs[k] for k in ("EX", "Pass@k", "EX@k", "R", "Q")})
    agg["generation_examples"] = gs["examples"]
    agg["gold_failures"] = sum(1 for r in report.per_example if "gold_error" in r)
    agg["task_errors"] = sum(1 for r in report.per_example if "error" in r)
    agg["tokens_per_query"] = sum(tokens) / len(tokens) if tokens else 0.0
    report.aggregate = agg
    return report


TSV_COLUMNS = ("question_id", "ex", "pass_at_k", "ex_at_k", "recall", "precision", "covered", "rounds", "queries", "tokens", "error")


def write_eval(report: EvalReport, run_dir: Path) -> list[Path]:
    out = run_dir / "reports"
    _dump(out / "eval.json", report.to_dict())
    tsv = out / "eval.tsv"
    with tsv.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TSV_COLUMNS)
        for row in report.per_example:
            link = row.get("linking", {})
            w.writerow([
                row["question_id"], _fmt(row.get("ex")), _fmt(row.get("pass_at_k")), _fmt(row.get("ex_at_k")),
                _fmt(link.get("recall")), _fmt(link.get("precision")), _fmt(link.get("covered")),
                " ".join(map(str, row.get("rounds", []))), " ".join(map(str, row.get("queries", []))),
                _fmt(row.get("tokens")), row.get("error") or row.get("gold_error") or "",
            ])
    return [out / "eval.json", tsv]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_aggregate(report: EvalReport) -> str:
    agg = report.aggregate
    keys = ["SRR", "NSR", "NSP", "NSF", "C", "EX", "Pass@k", "EX@k", "R", "Q", "tokens_per_query"]
    width = max(len(k) for k in keys)
    lines = [f"dataset: {report.dataset}   mode: {report.mode}"]
    for k in keys:
        if k in agg:
            v = agg[k]
            lines.append(f"{k.ljust(width)}  {v:.4f}" if isinstance(v, float) else f"{k.ljust(width)}  {v}")
    for k in ("generation_examples", "linking_examples", "gold_failures", "task_errors"):
        if k in agg:
            lines.append(f"{k.ljust(width)}  {agg[k]}")
    return "\n".join(lines)
