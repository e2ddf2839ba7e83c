"""Schema linking: plan, prune, profile and synthesize a sufficient column set.

Every stage fails toward recall. An unparseable deletion pass deletes nothing,
an unparseable profiling verdict keeps the whole table, and a synthesis that
never yields a schema falls back to everything profiling marked relevant.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import prompts
from .errors import ParseFailure
from .llm import ChatRequest, Gateway, Message, parse_json_object, parse_sql_blocks
from .schema import (
    DEFAULT_MAX_BATCH_TOKENS,
    DEFAULT_MIN_BATCH_TOKENS,
    ColumnRef,
    DatabaseSchema,
    SchemaBatch,
    SchemaSubset,
    Table,
    merge_identical_tables,
    normalize_identifier,
    partition_batches,
    serialize_for_prompt,
)
from .sqlexec import execute, render_outcome, summarize

logger = logging.getLogger(__name__)

UNKNOWN_ROLE = "unknown"


@dataclass
class LinkConfig:
    n_plans: int = 2
    t_sample: float = 0.8
    t_agg: float = 0.2
    t_stage: float = 0.0
    min_batch_tokens: int = DEFAULT_MIN_BATCH_TOKENS
    max_batch_tokens: int = DEFAULT_MAX_BATCH_TOKENS
    profile_query_cap: int = 8
    max_rounds: int = 3
    parallelism: int = 8
    critical_rules: str = ""
    exec_timeout: float = 30.0


@dataclass(frozen=True)
class LogicalPlan:
    steps: tuple[str, ...]
    source: str = "master"

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.source == "master" and not self.steps:
            raise ValueError("a master plan needs at least one step")

    def render(self) -> str:
        return "\n".join(f"{i}. {s}" for i, s in enumerate(self.steps, 1))


@dataclass(frozen=True)
class RoleAnalysis:
    database_structure: str
    content_analysis: str
    table_roles: Mapping[str, str]
    parsed: bool = True


@dataclass(frozen=True)
class ColumnFinding:
    column: str
    reason: str = ""
    observations: str = ""


@dataclass(frozen=True)
class TableObservation:
    table: str
    relevant: bool
    relevant_columns: tuple[ColumnFinding, ...]
    table_summary: str
    executed_queries: tuple[tuple[str, str], ...] = ()

    def refs(self) -> list[ColumnRef]:
        return [ColumnRef(self.table, f.column) for f in self.relevant_columns]


@dataclass(frozen=True)
class PruneDecision:
    batch_id: int
    deletion_set: frozenset[ColumnRef]
    preservation_set: frozenset[ColumnRef]


@dataclass
class SynthesisResult:
    subset: SchemaSubset
    rejected: dict[ColumnRef, str]
    rounds: int
    confirmed: bool
    fallback: bool = False


@dataclass
class LinkResult:
    d_star: SchemaSubset
    plan: LogicalPlan
    candidates: list[LogicalPlan]
    pruned: SchemaSubset
    roles: RoleAnalysis
    observations: list[TableObservation]
    synthesis: SynthesisResult
    token_usage: dict = field(default_factory=dict)

    def report(self, question_id: str) -> dict:
        return {
            "question_id": question_id,
            "plan": list(self.plan.steps),
            "pruned_count": len(self.pruned),
            "final_columns": [
                {"table": r.table, "column": r.column,
                 "reason": self.d_star.annotations.get(r, {}).get("reason", "")}
                for r in sorted(self.d_star.refs)
            ],
            "rejected": [
                {"table": r.table, "column": r.column, "reason": why}
                for r, why in sorted(self.synthesis.rejected.items())
            ],
            "rounds": self.synthesis.rounds,
            "token_usage": self.token_usage,
        }


# --------------------------------------------------------------------------
# planning

_NUMBERED = re.compile(r"^\s*(?:step\s*)?(\d+)\s*[.):]\s*(.+?)\s*$", re.I)


def _strip_number(step: str) -> str:
    m = _NUMBERED.match(step)
    return m.group(2) if m else step.strip()


def _parse_plan_json(content: str) -> tuple[str, ...]:
    doc = parse_json_object(content)
    steps = doc.get("logical_steps")
    if not isinstance(steps, list):
        raise ParseFailure("missing logical_steps list")
    out = tuple(_strip_number(str(s)) for s in steps if str(s).strip())
    if not out:
        raise ParseFailure("empty logical_steps")
    return out


def _parse_numbered(content: str) -> tuple[str, ...]:
    steps = tuple(m.group(2) for m in map(_NUMBERED.match, content.splitlines()) if m)
    if not steps:
        raise ParseFailure("no numbered steps")
    return steps


def generate_plans(gw: Gateway, question: str, evidence: str = "", n: int = 2, t_sample: float = 0.8) -> list[LogicalPlan]:
    """Sample ``n`` schema-agnostic plans from the question alone."""
    if n < 1:
        raise ValueError("n must be at least 1")
    prompt = prompts.render(prompts.PLAN, question=question)
    plans = []
    for i in range(n):
        steps = gw.ask(ChatRequest.of(prompt, "sl_plan", t_sample), _parse_plan_json)
        if steps is None:
            logger.warning("plan %d unparseable; using single-step fallback", i)
            steps = (f"Answer: {question}",)
        plans.append(LogicalPlan(steps, source=f"candidate({i})"))
    return plans


def aggregate_plans(gw: Gateway, question: str, candidates: Sequence[LogicalPlan], t_agg: float = 0.2) -> LogicalPlan:
    if not candidates:
        raise ValueError("need at least one candidate plan")
    text = "\n\n".join(f"Plan {i}:\n{p.render()}" for i, p in enumerate(candidates, 1))
    prompt = prompts.render(prompts.AGGREGATE, count=len(candidates), question=question, plans_text=text)
    steps = gw.ask(ChatRequest.of(prompt, "sl_agg", t_agg), _parse_numbered)
    if steps is None:
        logger.warning("master plan unparseable; using first candidate")
        steps = candidates[0].steps
    return LogicalPlan(steps, source="master")


# --------------------------------------------------------------------------
# dual-pathway pruning


def _table_lookup(batch: SchemaBatch) -> dict[str, Table]:
    out = {}
    for e in batch.entries:
        for m in e.members:
            out[normalize_identifier(m)] = e.table
    return out


def _expand(doc: Mapping, tables_key: str, columns_key: str, batch: SchemaBatch) -> set[ColumnRef]:
    lookup = _table_lookup(batch)
    refs: set[ColumnRef] = set()
    for name in doc.get(tables_key) or []:
        table = lookup.get(normalize_identifier(str(name)))
        if table is None:
            logger.warning("pruning named table %r outside the batch; ignored", name)
            continue
        refs.update(table.refs(str(name)))
    for item in doc.get(columns_key) or []:
        if not isinstance(item, Mapping):
            continue
        tname = str(item.get("table", ""))
        table = lookup.get(normalize_identifier(tname))
        if table is None:
            logger.warning("pruning named table %r outside the batch; ignored", tname)
            continue
        for col in item.get("columns") or []:
            if table.column(str(col)) is None:
                logger.warning("pruning named column %s.%s outside the batch; ignored", tname, col)
                continue
            refs.add(ColumnRef(tname, str(col)))
    return refs


def _as_dict(content: str) -> dict:
    return parse_json_object(content)


def prune_batch(
    gw: Gateway,
    question: str,
    evidence: str,
    plan: LogicalPlan,
    batch: SchemaBatch,
    batch_id: int = 0,
    temperature: float = 0.0,
) -> PruneDecision:
    slots = dict(question=question, logical_plan=plan.render(), schema=batch.render(), evidence=evidence or "None")
    deletion: set[ColumnRef] = set()
    doc = gw.ask(ChatRequest.of(prompts.render(prompts.DELETE, **slots), "sl_del", temperature), _as_dict)
    if doc is not None:
        deletion = _expand(doc, "obviously_irrelevant_tables", "obviously_irrelevant_columns", batch)
    else:
        logger.warning("deletion pass for batch %d unparseable; nothing deleted", batch_id)
    keep: set[ColumnRef] = set()
    doc = gw.ask(ChatRequest.of(prompts.render(prompts.SELECT, **slots), "sl_sel", temperature), _as_dict)
    if doc is not None:
        keep = _expand(doc, "relevant_tables", "relevant_columns", batch)
    cols = batch.columns()
    return PruneDecision(batch_id, frozenset(deletion & cols), frozenset(keep & cols))


def fuse_pruned(schema: DatabaseSchema, batches: Sequence[SchemaBatch], decisions: Sequence[PruneDecision]) -> SchemaSubset:
    by_id = {d.batch_id: d for d in decisions}
    if len(by_id) != len(decisions) or set(by_id) != set(range(len(batches))):
        raise ValueError("exactly one decision per batch required")
    survivors: set[ColumnRef] = set()
    for b, batch in enumerate(batches):
        d = by_id[b]
        cols = batch.columns()
        survivors |= (cols - d.deletion_set) | (d.preservation_set & cols)
    return SchemaSubset(schema, frozenset(survivors))


# --------------------------------------------------------------------------
# semantic linking and profiling


def semantic_link(
    gw: Gateway,
    question: str,
    evidence: str,
    plan: LogicalPlan,
    pruned: SchemaSubset,
    critical_rules: str = "",
    temperature: float = 0.0,
) -> RoleAnalysis:
    tables = {normalize_identifier(t.name): t.name for t in pruned.tables()}
    prompt = prompts.render(
        prompts.SEMANTICS, critical_rules=critical_rules, question=question, logical_plan=plan.render(),
        evidence=evidence or "None", schema=serialize_for_prompt(pruned),
    )
    doc = gw.ask(ChatRequest.of(prompt, "sl_semantics", temperature), _as_dict)
    if doc is None:
        logger.warning("semantic linking unparseable; exploring unguided")
        return RoleAnalysis("", "", {name: UNKNOWN_ROLE for name in tables.values()}, parsed=False)
    roles: dict[str, str] = {}
    for name, role in (doc.get("table_functions") or {}).items():
        canonical = tables.get(normalize_identifier(str(name)))
        if canonical is None:
            logger.warning("role given for table %r outside the pruned set; dropped", name)
            continue
        roles[canonical] = str(role)
    for name in tables.values():
        roles.setdefault(name, UNKNOWN_ROLE)
    return RoleAnalysis(
        str(doc.get("database_structure", "")),
        str(doc.get("query_specific_content_analysis", "")),
        {n: roles[n] for n in tables.values()},
    )


def _column_block(table: Table) -> str:
    return "\n".join(
        f"- {c.name} ({c.data_type or 'UNKNOWN'})"
        + (f": {c.description}" if c.description else "")
        + (f" | samples: {', '.join(c.sample_values)}" if c.sample_values else "")
        for c in table.columns
    )


def _run_queries(statements: Sequence[str], db, cap: int, timeout: float) -> list[tuple[str, str]]:
    executed = []
    for sql in list(statements)[:cap]:
        outcome = execute(sql, db, mode="read_only", timeout=timeout)
        if not hasattr(outcome, "kind"):
            outcome = summarize(outcome)
        executed.append((sql, render_outcome(outcome)))
    return executed


def _render_executed(executed: Sequence[tuple[str, str]]) -> str:
    if not executed:
        return "No exploration queries were executed."
    return "\n\n".join(f"-- Query {i}:\n{sql}\n-- Result:\n{out}" for i, (sql, out) in enumerate(executed, 1))


def _parse_verdict(content: str) -> dict:
    doc = parse_json_object(content)
    if "relevant" not in doc:
        raise ParseFailure("verdict lacks 'relevant'")
    return doc


def profile_table(
    gw: Gateway,
    question: str,
    evidence: str,
    table: Table,
    role: str,
    db,
    query_cap: int = 8,
    critical_rules: str = "",
    temperature: float = 0.0,
    timeout: float = 30.0,
) -> TableObservation:
    """Explore one table read-only and ask for a relevance verdict."""
    columns = _column_block(table)
    explore_prompt = prompts.render(
        prompts.PROFILE, critical_rules=critical_rules, table_name=table.name, columns=columns,
        question=question, role=role, evidence=evidence or "None",
    )
    raw = {}

    def _capture(content: str):
        stmts = parse_sql_blocks(content)
        raw["content"] = content
        return stmts

    exploration = gw.ask(ChatRequest.of(explore_prompt, "sl_profile", temperature), _capture)
    executed = _run_queries(exploration, db, query_cap, timeout) if exploration else []
    if exploration is None:
        logger.warning("profiling SQL for %s unparseable; judging on schema alone", table.name)

    verdict_prompt = prompts.render(
        prompts.PROFILE_VERDICT, table_name=table.name, columns=columns,
        observations=_render_executed(executed), question=question, evidence=evidence or "None",
    )
    if exploration is not None:
        messages = (Message("user", explore_prompt), Message("assistant", raw["content"]), Message("user", verdict_prompt))
    else:
        messages = (Message("user", f"*** TARGET TABLE: {table.name} ***\n" + verdict_prompt),)
    doc = gw.ask(ChatRequest(messages, temperature=temperature, tag="sl_profile_verdict"), _parse_verdict)

    everything = tuple(ColumnFinding(c.name, "retained by default") for c in table.columns)
    if doc is None:
        logger.warning("profiling verdict for %s unparseable; keeping all columns", table.name)
        return TableObservation(table.name, True, everything, "verdict unparseable", tuple(executed))

    relevant = doc.get("relevant")
    relevant = relevant if isinstance(relevant, bool) else str(relevant).strip().lower() in ("true", "yes", "1")
    findings = []
    seen = set()
    for item in doc.get("relevant_columns") or []:
        if isinstance(item, Mapping):
            name = str(item.get("column_name") or item.get("column") or "")
            reason, obs = str(item.get("relevance_reason", "")), str(item.get("observations", ""))
        else:
            name, reason, obs = str(item), "", ""
        col = table.column(name)
        if col is None or normalize_identifier(col.name) in seen:
            continue
        seen.add(normalize_identifier(col.name))
        findings.append(ColumnFinding(col.name, reason, obs))
    if relevant and not findings:
        findings = list(everything)
    return TableObservation(
        table.name, relevant, tuple(findings) if relevant else (), str(doc.get("table_summary", "")), tuple(executed)
    )


def profile_tables(
    gw: Gateway,
    question: str,
    evidence: str,
    pruned: SchemaSubset,
    roles: RoleAnalysis,
    db,
    config: LinkConfig,
) -> list[TableObservation]:
    """Profile every surviving table concurrently; results follow table order."""
    tables = pruned.tables()
    if not tables:
        return []
    children = [gw.fork() for _ in tables]

    def work(i: int) -> TableObservation:
        t = tables[i]
        return profile_table(
            children[i], question, evidence, t, roles.table_roles.get(t.name, UNKNOWN_ROLE), db,
            config.profile_query_cap, config.critical_rules, config.t_stage, config.exec_timeout,
        )

    workers = max(1, min(config.parallelism, len(tables)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(work, i) for i in range(len(tables))]
        results = []
        error = None
        for f in futures:
            try:
                results.append(f.result())
            except BaseException as exc:  # re-raised after the trace is committed
                error = error or exc
                results.append(None)
    for child in children:
        gw.absorb(child)
    if error is not None:
        raise error
    return results


# --------------------------------------------------------------------------
# global synthesis


def _schema_status(pruned: SchemaSubset, observations: Sequence[TableObservation]) -> str:
    by_table = {normalize_identifier(o.table): o for o in observations}
    blocks = []
    for t in pruned.tables():
        obs = by_table.get(normalize_identifier(t.name))
        mark = "[MARKED RELEVANT]" if obs is None or obs.relevant else "[MARKED IRRELEVANT]"
        lines = [f"{mark} {t.name}"]
        if obs is not None and obs.table_summary:
            lines.append(f"Summary: {obs.table_summary}")
        chosen = {normalize_identifier(f.column) for f in obs.relevant_columns} if obs else set()
        for f in obs.relevant_columns if obs else ():
            col = t.column(f.column)
            lines.append(f"  * {f.column} ({col.data_type if col else ''}) relevant: {f.reason}"
                         + (f" | observed: {f.observations}" if f.observations else ""))
        others = [c.name for c in t.columns if normalize_identifier(c.name) not in chosen]
        if others:
            lines.append("  other columns: " + ", ".join(others))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _refined_refs(doc: Mapping, pruned: SchemaSubset) -> dict[ColumnRef, str] | None:
    schema = doc.get("refined_schema")
    if not isinstance(schema, Mapping):
        return None
    refs: dict[ColumnRef, str] = {}
    for tname, entry in schema.items():
        items = entry.get("relevant_columns", []) if isinstance(entry, Mapping) else entry
        for item in items or []:
            if isinstance(item, Mapping):
                name, reason = str(item.get("column_name") or item.get("column") or ""), str(item.get("relevance_reason", ""))
            else:
                name, reason = str(item), ""
            ref = ColumnRef(str(tname), name)
            if ref in pruned.refs:
                refs[ref] = reason
            else:
                logger.warning("synthesis kept %s outside the pruned set; dropped", ref)
    return refs


def _rejections(doc: Mapping, pruned: SchemaSubset) -> dict[ColumnRef, str]:
    out = {}
    for item in doc.get("rejected_candidates") or []:
        if not isinstance(item, Mapping):
            continue
        ref = ColumnRef(str(item.get("table", "")), str(item.get("column", "")))
        if ref in pruned.refs:
            out[ref] = str(item.get("reject_reason", ""))
    return out


def global_synthesis(
    gw: Gateway,
    question: str,
    evidence: str,
    roles: RoleAnalysis,
    observations: Sequence[TableObservation],
    pruned: SchemaSubset,
    db,
    max_rounds: int = 3,
    critical_rules: str = "",
    temperature: float = 0.0,
    query_cap: int = 8,
    timeout: float = 30.0,
) -> SynthesisResult:
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    summary = f"{roles.database_structure}\n{roles.content_analysis}".strip() or "Not available."
    prompt = prompts.render(
        prompts.SYNTHESIS, critical_rules=critical_rules, question=question, evidence=evidence or "None",
        db_summary=summary, schema_status=_schema_status(pruned, observations), max_rounds=max_rounds,
    )
    messages: list[Message] = [Message("user", prompt)]
    latest: dict[ColumnRef, str] | None = None
    rejected: dict[ColumnRef, str] = {}
    confirmed = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        parsed = gw.ask(
            ChatRequest(tuple(messages), temperature=temperature, tag="sl_final"),
            lambda c: (parse_json_object(c), c),
        )
        if parsed is None:
            logger.warning("synthesis round %d unparseable; stopping", rounds)
            break
        doc, content = parsed
        refined = _refined_refs(doc, pruned)
        if refined is not None:
            latest = refined
            rejected = _rejections(doc, pruned)
        queries = [str(q) for q in doc.get("exploration_queries") or [] if str(q).strip()]
        if "CONFIRM" in str(doc.get("status", "")).upper() or not queries:
            confirmed = True
            break
        if rounds == max_rounds:
            break
        executed = _run_queries(queries, db, query_cap, timeout)
        feedback = prompts.render(
            prompts.SYNTHESIS_FEEDBACK, round=rounds, max_rounds=max_rounds, results=_render_executed(executed)
        )
        messages += [Message("assistant", content), Message("user", feedback)]

    profiled = {}
    for obs in observations:
        for f in obs.relevant_columns:
            ref = ColumnRef(obs.table, f.column)
            if ref in pruned.refs:
                profiled[ref] = f
    annotations: dict[ColumnRef, dict] = {}
    if latest is None:
        logger.warning("no parseable refined schema; using profiling-relevant columns")
        chosen = {r: {"reason": f.reason or "marked relevant during profiling", "observations": f.observations}
                  for r, f in profiled.items()}
        if not chosen:
            chosen = {r: {"reason": "retained: nothing else survived", "observations": ""} for r in pruned.refs}
        return SynthesisResult(SchemaSubset(pruned.schema, frozenset(chosen), chosen), {}, rounds, False, True)
    for ref, reason in latest.items():
        f = profiled.get(ref)
        annotations[ref] = {"reason": reason, "observations": f.observations if f else ""}
    for ref, f in profiled.items():
        if ref not in annotations and ref not in rejected:
            annotations[ref] = {"reason": "re-added: marked relevant during profiling and never rejected",
                                "observations": f.observations}
    rejected = {r: why for r, why in rejected.items() if r not in annotations}
    return SynthesisResult(SchemaSubset(pruned.schema, frozenset(annotations), annotations), rejected, rounds, confirmed)


# --------------------------------------------------------------------------
# end to end


def link_schema(
    gw: Gateway,
    question: str,
    evidence: str,
    schema: DatabaseSchema,
    db,
    config: LinkConfig | None = None,
) -> LinkResult:
    config = config or LinkConfig()
    if schema.column_count == 0:
        raise ValueError("schema has no columns")
    start = gw.ledger.to_dict()
    candidates = generate_plans(gw, question, evidence, config.n_plans, config.t_sample)
    plan = aggregate_plans(gw, question, candidates, config.t_agg)
    batches = partition_batches(merge_identical_tables(schema), config.min_batch_tokens, config.max_batch_tokens)
    decisions = [prune_batch(gw, question, evidence, plan, b, i, config.t_stage) for i, b in enumerate(batches)]
    pruned = fuse_pruned(schema, batches, decisions)
    if len(pruned) == 0:
        logger.warning("pruning removed every column; keeping the full schema")
        pruned = schema.full_subset()
    roles = semantic_link(gw, question, evidence, plan, pruned, config.critical_rules, config.t_stage)
    observations = profile_tables(gw, question, evidence, pruned, roles, db, config)
    synthesis = global_synthesis(
        gw, question, evidence, roles, observations, pruned, db, config.max_rounds,
        config.critical_rules, config.t_stage, config.profile_query_cap, config.exec_timeout,
    )
    if len(synthesis.subset) == 0:
        logger.warning("synthesis kept no columns; falling back to the pruned set")
        synthesis.subset = pruned
        synthesis.fallback = True
    usage = _usage_delta(start, gw.ledger.to_dict())
    return LinkResult(synthesis.subset, plan, candidates, pruned, roles, observations, synthesis, usage)


def _usage_delta(before: dict, after: dict) -> dict:
    out = {}
    for tag, u in after["by_tag"].items():
        b = before["by_tag"].get(tag, {"calls": 0, "input_tokens": 0, "output_tokens": 0})
        d = {k: u[k] - b[k] for k in u}
        if d["calls"]:
            out[tag] = d
    return {"total": sum(d["input_tokens"] + d["output_tokens"] for d in out.values()), "by_tag": out}
