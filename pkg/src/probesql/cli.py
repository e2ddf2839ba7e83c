"""Command-line entry point: ``probesql {link,generate,run,eval,repl,bench}``."""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from .config import RunConfig, load_config
from .datasets import TaskRecord, load_tasks
from .errors import ConfigError, ProbeSQLError
from .metrics import aggregate_linking, score_linking
from .pipeline import Run, evaluate_run, gold_refs, render_aggregate, write_eval
from .plots import render_figures
from .schema import ColumnRef
from .sqlexec import ExecError, execute

logger = logging.getLogger("probesql")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _common(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML or JSON run config.")
    @click.option("--replay", type=click.Path(dir_okay=False), help="Replay script; selects the scripted backend.")
    @click.option("--out", type=click.Path(file_okay=False), help="Output root directory.")
    @click.option("--run-id", help="Run directory name (default: derived from config and tasks).")
    @click.option("--workers", type=int, help="Task-level parallelism.")
    @click.option("--tips", "tips_path", type=click.Path(dir_okay=False), help="Override tip library JSON.")
    @click.option("--rules", "rules_path", type=click.Path(dir_okay=False), help="Override retrieval rules JSON.")
    @click.option("-v", "--verbose", count=True)
    @functools.wraps(fn)
    def wrapper(*args, **kw):
        return fn(*args, **kw)

    return wrapper


def _dataset_opts(fn):
    @click.option("--dataset", type=click.Path(), help="Dataset file or folder.")
    @click.option("--dataset-kind", type=click.Choice(["native", "bird", "spider"]))
    @functools.wraps(fn)
    def wrapper(*args, **kw):
        return fn(*args, **kw)

    return wrapper


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_config(config_path=None, replay=None, out=None, workers=None, tips_path=None, rules_path=None,
                 dataset=None, dataset_kind=None, n=None, mode=None, check_backend=True) -> RunConfig:
    cfg = load_config(config_path)
    if replay:
        cfg.backend = replace(cfg.backend, replay=str(Path(replay).resolve()))
    if out:
        cfg.out_dir = str(Path(out).resolve())
    if workers is not None:
        cfg.workers = workers
    if tips_path:
        cfg.tips_path = str(Path(tips_path).resolve())
    if rules_path:
        cfg.rules_path = str(Path(rules_path).resolve())
    if dataset:
        cfg.dataset = str(Path(dataset).resolve())
    if dataset_kind:
        cfg.dataset_kind = dataset_kind
    if n is not None:
        cfg.sampling.n = n
    if mode:
        cfg.mode = mode
    return cfg.validate(check_backend)


def run_id_for(cfg: RunConfig, tasks: list[TaskRecord]) -> str:
    """Stable across link/generate/eval invocations over the same dataset."""
    h = hashlib.sha256()
    h.update(str(cfg.dataset).encode() + b"\0")
    for t in tasks:
        h.update(t.question_id.encode() + b"\0")
    return "run-" + h.hexdigest()[:12]


def _prepare(ctx_kw: dict):
    _setup_logging(ctx_kw.pop("verbose", 0))
    run_id = ctx_kw.pop("run_id", None)
    cfg = build_config(**ctx_kw)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or [run].dataset)")
    kind, tasks = load_tasks(cfg.dataset, cfg.dataset_kind)
    cfg.dataset_kind = kind
    run_dir = Path(cfg.out_dir) / (run_id or run_id_for(cfg, tasks))
    return cfg, kind, tasks, run_dir


def _guard(fn):
    """Map configuration and IO problems to exit code 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kw):
        try:
            return fn(*args, **kw)
        except (ConfigError, OSError, ProbeSQLError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


def _finish(results: list[dict], run_dir: Path) -> None:
    failed = [r for r in results if "error" in r]
    for r in failed:
        click.echo(f"task {r['question_id']} failed: {r['error']}", err=True)
    click.echo(f"run directory: {run_dir}")
    sys.exit(EXIT_PARTIAL if failed else EXIT_OK)


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Agentic text-to-SQL: schema linking, guided generation and evaluation."""


@main.command()
@_common
@_dataset_opts
@_guard
def link(**kw):
    """Schema linking per task; writes reports/link/<qid>.json."""
    cfg, kind, tasks, run_dir = _prepare(kw)
    run = Run.open(cfg, run_dir)
    results = run.run_tasks(tasks, "link")
    entries = []
    for task, res in zip(tasks, results):
        if "error" in res:
            continue
        gold = gold_refs(task, run.schema_for(task))
        if gold:
            pred = [ColumnRef(c["table"], c["column"]) for c in res["final_columns"]]
            entries.append(score_linking(pred, gold))
    if entries:
        agg = aggregate_linking(entries)
        path = run_dir / "reports" / "link_aggregate.json"
        path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"SRR {agg['SRR']:.4f}  NSR {agg['NSR']:.4f}  NSP {agg['NSP']:.4f}  NSF {agg['NSF']:.4f}  "
                   f"C {agg['C']:.2f}  over {agg['examples']} tasks")
    _finish(results, run_dir)


@main.command()
@_common
@_dataset_opts
@click.option("--oracle-schema", is_flag=True, help="Use gold columns as D* and skip linking.")
@click.option("--n", type=int, help="Sampled episodes per task.")
@_guard
def generate(oracle_schema, n, **kw):
    """Guided generation and voting over D* from a previous link run (or the oracle schema)."""
    cfg, kind, tasks, run_dir = _prepare({**kw, "n": n})
    run = Run.open(cfg, run_dir)
    _finish(run.run_tasks(tasks, "generate", oracle=oracle_schema), run_dir)


@main.command()
@_common
@_dataset_opts
@click.option("--oracle-schema", is_flag=True, help="Use gold columns as D* and skip linking.")
@click.option("--n", type=int, help="Sampled episodes per task.")
@click.option("--mode", type=click.Choice(["strict", "relaxed"]), help="Comparison mode for the eval step.")
@_guard
def run(oracle_schema, n, mode, **kw):
    """Linking, generation and evaluation in one go."""
    cfg, kind, tasks, run_dir = _prepare({**kw, "n": n, "mode": mode})
    r = Run.open(cfg, run_dir)
    results = r.run_tasks(tasks, "run", oracle=oracle_schema)
    _evaluate(r, tasks, kind, mode)
    _finish(results, run_dir)


@main.command("eval")
@_common
@_dataset_opts
@click.option("--mode", type=click.Choice(["strict", "relaxed"]))
@_guard
def eval_cmd(mode, **kw):
    """Score saved answers against gold SQL; writes reports/eval.{json,tsv} and figures."""
    cfg, kind, tasks, run_dir = _prepare({**kw, "mode": mode, "check_backend": False})
    if not run_dir.is_dir():
        raise ConfigError(f"no run directory at {run_dir}")
    report = _evaluate(Run.open(cfg, run_dir, scoring_only=True), tasks, kind, mode)
    failed = [r for r in report.per_example if "error" in r]
    sys.exit(EXIT_PARTIAL if failed else EXIT_OK)


def _evaluate(run: Run, tasks, kind, mode):
    report = evaluate_run(run, tasks, kind, mode)
    write_eval(report, run.run_dir)
    render_figures(report.to_dict(), run.run_dir / "figures")
    click.echo(render_aggregate(report))
    return report


# --------------------------------------------------------------------------
# interactive session


class Session:
    """State kept across repl questions: one run directory, schema cache, last episode."""

    def __init__(self, run: Run, db_path: str, evidence: str = ""):
        self.run = run
        self.db_path = db_path
        self.evidence = evidence
        self.count = 0
        self.last_trace: list[dict] | None = None
        self._schema = None
        original = run.schema_for

        def cached(task):
            if self._schema is None:
                self._schema = original(task)
            return self._schema

        run.schema_for = cached

    def ask(self, question: str) -> str:
        self.count += 1
        qid = f"q{self.count}"
        task = TaskRecord(qid, question, self.db_path, evidence=self.evidence)
        report = self.run.run_task(task, "run", n=1)
        cand = report["candidates"][report["selected"]]
        trace_path = self.run.run_dir / "traces" / qid / "episode_0.jsonl"
        self.last_trace = [json.loads(x) for x in trace_path.read_text(encoding="utf-8").splitlines() if x]
        lines = []
        sql = report["final_sql"]
        lines.append("SQL:\n" + (sql or "(none)"))
        if sql:
            outcome = execute(sql, self.db_path, mode="read_only", timeout=self.run.cfg.exec_timeout)
            if isinstance(outcome, ExecError):
                lines.append(outcome.render())
            else:
                lines.append(outcome.render())
        status = "confirmed" if cand["confirmed"] else ("failed" if cand["failed"] else "unconfirmed")
        lines.append(f"[{status}] rounds={cand['rounds']} explore_queries={cand['queries']} "
                     f"actions={cand['actions']} tokens={cand['tokens']}")
        return "\n".join(lines)

    def trace(self) -> str:
        if not self.last_trace:
            return "(no episode yet)"
        return "\n".join(
            f"{r['step']:>2}. {r['kind']}" + ("" if r.get("honored", True) else " (rejected)")
            for r in self.last_trace
        )


@main.command()
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False), help="SQLite database.")
@click.option("--evidence", default="", help="Evidence text attached to every question.")
@_common
@_guard
def repl(db_path, evidence, **kw):
    """Ask questions against one database. ':trace' shows the last action sequence, ':quit' exits."""
    _setup_logging(kw.pop("verbose", 0))
    run_id = kw.pop("run_id", None) or "repl"
    cfg = build_config(**kw)
    cfg.sampling.n = 1
    out = Path(cfg.out_dir) / run_id
    session = Session(Run.open(cfg, out, shared_replay=True), str(Path(db_path).resolve()), evidence)
    interactive = sys.stdin.isatty()
    while True:
        if interactive:
            click.echo("sql> ", nl=False)
        line = sys.stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":trace":
            click.echo(session.trace())
            continue
        try:
            click.echo(session.ask(line))
        except Exception as exc:  # the session outlives a failed question
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)


# --------------------------------------------------------------------------
# fixtures


@main.group()
def bench() -> None:
    """Bundled fixture benchmarks."""


@bench.command("build")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def bench_build(out):
    """Write the smoke benchmark and the case-study fixture (databases, tasks, replay scripts)."""
    from .bench import build_all

    paths = build_all(Path(out))
    for name, p in paths.items():
        click.echo(f"{name}: {p}")


if __name__ == "__main__":  # pragma: no cover
    main()
