"""The exploration agent: a budgeted EXPLORE / REFINE / SQL / CONFIRM loop.

``AgentState.history`` keeps every action for accounting. ``AgentState.context``
holds the entries that still appear in the prompt; consolidation prunes it to
exploration evidence plus the latest SQL attempt, with the latest structured
REFINE kept as a snapshot.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import prompts
from .errors import OutputTruncated, ParseFailure
from .llm import ChatRequest, Gateway, Message, parse_action, parse_sql_blocks
from .schema import SchemaSubset, estimate_tokens, serialize_for_prompt
from .sqlexec import ExecError, ResultSet, execute, render_outcome, summarize
from .sqltext import split_statements

logger = logging.getLogger(__name__)

CONSOLIDATE_AT_TOKENS = 20_000
EVIDENCE_FILTER_MIN_TOKENS = 2_000

MSG_NO_TAG = "Your output did not start with an action tag. Start with exactly one of [EXPLORE], [REFINE], [SQL] or [CONFIRM]."
MSG_FORCED = "Rejected: the exploration budget is exhausted. Only [SQL] or [CONFIRM] are accepted now."
MSG_EARLY_CONFIRM = "Rejected: [CONFIRM] needs a successfully executed [SQL] first. Submit a query with [SQL]."
MSG_NO_SQL = "No SQL statement found in the action body."
MSG_TRUNCATED = "Your output was cut off at the length limit. Respond again, more concisely."


@dataclass(frozen=True)
class EpisodeBudget:
    max_actions: int = 40
    max_tokens: int = 56_000
    force_sql_actions: int = 38
    force_sql_tokens: int = 52_000

    def __post_init__(self) -> None:
        if not (self.force_sql_actions < self.max_actions and self.force_sql_tokens < self.max_tokens):
            raise ValueError("forced-synthesis thresholds must lie below the hard limits")


@dataclass(frozen=True)
class AgentAction:
    kind: str
    body: str
    payload: object = None


@dataclass
class Entry:
    step: int
    kind: str
    body: str
    observation: str = ""
    honored: bool = True
    statements: tuple[tuple[str, str], ...] = ()
    tokens: int = 0

    def render(self) -> str:
        head = f"[Step {self.step}] [{self.kind}]" if self.kind != "INVALID" else f"[Step {self.step}] (no valid action)"
        parts = [head, self.body.strip()] if self.body.strip() else [head]
        if self.observation:
            parts.append("Observation:\n" + self.observation)
        return "\n".join(parts)


@dataclass
class Snapshot:
    plan: str
    understanding: str
    step: int

    def render(self) -> str:
        return f"Query plan (step {self.step}):\n{self.plan}\nUnderstanding:\n{self.understanding}"


@dataclass
class AgentState:
    history: list[Entry] = field(default_factory=list)
    context: list[Entry] = field(default_factory=list)
    consolidated: Snapshot | None = None
    token_count: int = 0
    last_sql: tuple[str, ResultSet | ExecError] | None = None
    last_success: tuple[str, ResultSet] | None = None
    terminated: bool = False
    confirmed: bool = False
    final_sql: str | None = None
    failed: bool = False
    first_forced_prompt: int | None = None

    @property
    def action_count(self) -> int:
        return len(self.history)

    @property
    def query_count(self) -> int:
        return sum(len(e.statements) for e in self.history if e.kind == "EXPLORE" and e.honored)

    @property
    def rounds(self) -> int:
        return count_rounds(self.history)


def count_rounds(history: Sequence[Entry]) -> int:
    """Number of maximal runs of consecutive honoured EXPLORE actions."""
    runs, inside = 0, False
    for e in history:
        is_explore = e.kind == "EXPLORE" and e.honored
        if is_explore and not inside:
            runs += 1
        inside = is_explore
    return runs


@dataclass
class EpisodeResult:
    final_sql: str | None
    final_result: ResultSet | None
    rounds: int
    query_count: int
    confirmed: bool
    failed: bool
    action_count: int
    token_count: int
    first_forced_prompt: int | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.final_result is not None

    def write_trace(self, path: str | Path) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# evidence pre-filter


def prefilter_evidence(
    gw: Gateway,
    question: str,
    knowledge: str,
    file_name: str = "knowledge.md",
    min_tokens: int = EVIDENCE_FILTER_MIN_TOKENS,
) -> str:
    """Keep only query-relevant parts of a long knowledge document."""
    if not knowledge or not knowledge.strip():
        return ""
    if estimate_tokens(knowledge) < min_tokens:
        return knowledge
    prompt = prompts.render(prompts.EVIDENCE_LINK, query=question, file_name=file_name, content=knowledge)
    return gw.complete(ChatRequest.of(prompt, "evidence_link", 0.0)).content.strip()


# --------------------------------------------------------------------------
# prompt assembly


@dataclass
class TaskContext:
    question: str
    evidence: str
    d_star: SchemaSubset
    guidance: str = ""

    def __post_init__(self) -> None:
        if len(self.d_star) == 0:
            raise ValueError("the linked schema must be non-empty")
        self.schema_text = serialize_for_prompt(self.d_star)


def render_context(task: TaskContext, state: AgentState, forced: bool = False) -> str:
    sections = [
        f"*** DATABASE SCHEMA ***\n{task.schema_text}",
        f"*** QUESTION ***\n{task.question}",
        f"*** EVIDENCE ***\n{task.evidence or 'None'}",
    ]
    if task.guidance:
        sections.append(f"*** GUIDANCE ***\n{task.guidance}")
    if state.consolidated is not None:
        sections.append(f"*** CONSOLIDATED PLAN AND UNDERSTANDING ***\n{state.consolidated.render()}")
    if state.context:
        sections.append("*** HISTORY ***\n" + "\n\n".join(e.render() for e in state.context))
    if forced:
        sections.append(prompts.FORCED_SYNTHESIS)
    sections.append("Respond with exactly one action.")
    return "\n\n".join(sections)


def build_request(task: TaskContext, state: AgentState, forced: bool, tag: str, temperature: float = 0.8) -> ChatRequest:
    messages = (Message("system", prompts.ACTION_SPACE), Message("user", render_context(task, state, forced)))
    return ChatRequest(messages, temperature=temperature, tag=tag)


# --------------------------------------------------------------------------
# action handling

_SECTION = re.compile(r"^#{2,}\s*(.+?)\s*:?\s*$", re.M)


def parse_snapshot(body: str) -> tuple[str, str] | None:
    """(query plan, understanding) when a REFINE body has the structured headings."""
    sections = {}
    marks = list(_SECTION.finditer(body))
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(body)
        sections[m.group(1).lower().rstrip(":")] = body[m.end():end].strip()
    plan = sections.get("query plan")
    understanding = sections.get("updated understanding")
    if plan is None and understanding is None:
        return None
    return plan or "", understanding or ""


def _statements(body: str) -> list[str]:
    try:
        return parse_sql_blocks(body)
    except ParseFailure:
        return split_statements(body)


def _candidate_sql(body: str) -> str | None:
    stmts = _statements(body)
    return stmts[-1] if stmts else None


def consolidate(state: AgentState) -> AgentState:
    """Prune the prompt context; counters and the full history are untouched."""
    keep = [e for e in state.context if e.kind == "EXPLORE" and e.honored]
    sql_entries = [e for e in state.context if e.kind == "SQL" and e.honored]
    if sql_entries:
        keep.append(sql_entries[-1])
    keep.sort(key=lambda e: e.step)
    state.context = keep
    return state


def step(
    state: AgentState,
    task: TaskContext,
    gw: Gateway,
    db,
    forced: bool = False,
    tag: str = "sql_agent_step",
    exec_timeout: float = 30.0,
    allow_writes: bool = False,
    temperature: float = 0.8,
) -> AgentState:
    if state.terminated:
        raise RuntimeError("episode already terminated")
    n = state.action_count + 1
    if forced and state.first_forced_prompt is None:
        state.first_forced_prompt = n
    request = build_request(task, state, forced, tag, temperature)
    try:
        response = gw.complete(request)
        content, tokens, truncated = response.content, response.input_tokens + response.output_tokens, False
    except OutputTruncated as exc:
        r = exc.response
        content, tokens, truncated = r.content, r.input_tokens + r.output_tokens, True
    state.token_count += tokens

    if truncated:
        entry = Entry(n, "INVALID", "", MSG_TRUNCATED, honored=False, tokens=tokens)
    else:
        try:
            kind, body = parse_action(content)
        except ParseFailure:
            kind, body = None, content
        if kind is None:
            entry = Entry(n, "INVALID", "", MSG_NO_TAG, honored=False, tokens=tokens)
        elif forced and kind in ("EXPLORE", "REFINE"):
            entry = Entry(n, kind, body, MSG_FORCED, honored=False, tokens=tokens)
        else:
            entry = _dispatch(state, n, kind, body, db, exec_timeout, allow_writes)
            entry.tokens = tokens

    state.history.append(entry)
    state.context.append(entry)
    if entry.kind == "REFINE" and entry.honored:
        snap = parse_snapshot(entry.body)
        if snap is not None:
            state.consolidated = Snapshot(snap[0], snap[1], n)
            consolidate(state)
    if estimate_tokens(render_context(task, state)) > CONSOLIDATE_AT_TOKENS:
        consolidate(state)
    return state


def _dispatch(state: AgentState, n: int, kind: str, body: str, db, timeout: float, allow_writes: bool) -> Entry:
    if kind == "EXPLORE":
        stmts = _statements(body)
        if not stmts:
            return Entry(n, kind, body, MSG_NO_SQL)
        executed = []
        for sql in stmts:
            outcome = execute(sql, db, mode="read_only", timeout=timeout)
            shown = outcome if isinstance(outcome, ExecError) else summarize(outcome)
            executed.append((sql, render_outcome(shown)))
        obs = "\n\n".join(f"-- Query {i}:\n{sql}\n-- Result:\n{out}" for i, (sql, out) in enumerate(executed, 1))
        return Entry(n, kind, body, obs, statements=tuple(executed))
    if kind == "REFINE":
        return Entry(n, kind, body)
    if kind == "SQL":
        sql = _candidate_sql(body)
        if sql is None:
            return Entry(n, kind, body, MSG_NO_SQL)
        outcome = execute(sql, db, mode="final", timeout=timeout, allow_writes=allow_writes)
        state.last_sql = (sql, outcome)
        if isinstance(outcome, ExecError):
            return Entry(n, kind, body, f"Execution failed. {outcome.render()}")
        state.last_success = (sql, outcome)
        return Entry(n, kind, body, "Execution succeeded.\n" + render_outcome(summarize(outcome)))
    # CONFIRM
    if state.last_sql is None or isinstance(state.last_sql[1], ExecError):
        return Entry(n, kind, body, MSG_EARLY_CONFIRM, honored=False)
    state.terminated = True
    state.confirmed = True
    state.final_sql = state.last_sql[0]
    return Entry(n, kind, body, "Confirmed.")


def run_episode(
    question: str,
    evidence: str,
    d_star: SchemaSubset,
    guidance: str,
    db,
    gw: Gateway,
    budget: EpisodeBudget | None = None,
    tag: str = "sql_agent_step",
    exec_timeout: float = 30.0,
    allow_writes: bool = False,
    temperature: float = 0.8,
) -> EpisodeResult:
    budget = budget or EpisodeBudget()
    task = TaskContext(question, evidence, d_star, guidance)
    state = AgentState()
    while not state.terminated:
        if state.action_count >= budget.max_actions or state.token_count >= budget.max_tokens:
            break
        forced = state.action_count >= budget.force_sql_actions or state.token_count >= budget.force_sql_tokens
        step(state, task, gw, db, forced, tag, exec_timeout, allow_writes, temperature)

    final_result = None
    if state.confirmed:
        final_result = state.last_sql[1]
    elif state.last_success is not None:
        state.final_sql, final_result = state.last_success
    else:
        # nothing ever ran cleanly: hand the last attempt (if any) to scoring
        state.final_sql = state.last_sql[0] if state.last_sql else None
        state.failed = True
    trace = [
        {"step": e.step, "kind": e.kind, "body": e.body, "observation": e.observation,
         "honored": e.honored, "tokens": e.tokens}
        for e in state.history
    ]
    return EpisodeResult(
        final_sql=state.final_sql,
        final_result=final_result,
        rounds=state.rounds,
        query_count=state.query_count,
        confirmed=state.confirmed,
        failed=state.failed,
        action_count=state.action_count,
        token_count=state.token_count,
        first_forced_prompt=state.first_forced_prompt,
        trace=trace,
    )
