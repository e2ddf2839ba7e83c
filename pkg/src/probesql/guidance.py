"""Deterministic tip retrieval.

The tip library and the retrieval rules are JSON documents (``data/tips.json``
and ``data/rules.json``). A rule's ``when`` field is a small predicate tree:

``{"phrase": [...]}``
    any listed phrase occurs as whole words; the last word may carry a common
    inflection (s, es, ed, ing; a trailing "e" may become "ing"/"d"/"s").
``{"starts_with": [...]}``
    the stripped text begins with one of the phrases (whole words).
``{"regex": "..."}``
    case-insensitive search.
``{"count_at_least": {"phrase": p, "n": k}}``
    the phrase occurs at least ``k`` times.
``{"steps_at_least": k}`` / ``{"tables_mentioned_at_least": k}``
    realized-plan step count / distinct schema tables named in the plan text.
``{"schema_columns": [...]}``
    a column of the linked schema has one of these names.
``{"all": [...]}``, ``{"any": [...]}``, ``{"not": p}``
    combinators.

Text predicates read the rule's ``source`` field unless the predicate carries
its own ``"on"`` (a field name or a list of names, joined by newlines).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import prompts
from .errors import ParseFailure
from .llm import ChatRequest, Gateway
from .schema import SchemaSubset, normalize_identifier, serialize_for_prompt

logger = logging.getLogger(__name__)

SOURCES = ("universal", "evidence", "question", "plan", "schema")
_TEXT_DEFAULT = {"evidence": "evidence", "question": "question", "plan": "plan", "schema": "question"}


@dataclass(frozen=True)
class Tip:
    id: str
    category: str
    title: str
    description: str

    def render(self) -> str:
        return f"[{self.id}] {self.title}\n{self.description}"


@dataclass(frozen=True)
class RetrievalRule:
    id: str
    source: str
    when: Mapping[str, Any]
    emits: tuple[str, ...]


@dataclass(frozen=True)
class TipLibrary:
    tips: Mapping[str, Tip]
    categories: tuple[str, ...]
    universal: tuple[str, ...]

    def __post_init__(self) -> None:
        for tip in self.tips.values():
            if tip.category not in self.categories:
                raise ValueError(f"{tip.id}: unknown category {tip.category!r}")
        missing = set(self.universal) - set(self.tips)
        if missing:
            raise ValueError(f"universal tips missing from library: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.tips)


@dataclass(frozen=True)
class PlanStep:
    description: str
    info_need: str = ""
    possible_paths: tuple[str, ...] = ()
    keywords: tuple[str, ...] = ()
    evidence_snippet: str | None = None


@dataclass(frozen=True)
class RealizedPlan:
    steps: tuple[PlanStep, ...]
    raw: str = ""
    fallback: bool = False

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("a realized plan needs at least one step")

    def text(self) -> str:
        """Plan text the plan-based rules match against: every field of every step."""
        lines = []
        for i, s in enumerate(self.steps, 1):
            lines.append(f"Step {i}: {s.description}")
            if s.info_need:
                lines.append(f"Info need: {s.info_need}")
            if s.possible_paths:
                lines.append("Possible paths: " + ", ".join(s.possible_paths))
            if s.keywords:
                lines.append("Keywords: " + ", ".join(s.keywords))
            if s.evidence_snippet:
                lines.append(f"Evidence: {s.evidence_snippet}")
        return "\n".join(lines)

    @property
    def keywords(self) -> list[str]:
        return [k for s in self.steps for k in s.keywords]


# --------------------------------------------------------------------------
# loading


def _data_text(name: str) -> str:
    return resources.files("probesql").joinpath("data", name).read_text(encoding="utf-8")


def load_library(path: str | Path | None = None) -> TipLibrary:
    doc = json.loads(Path(path).read_text(encoding="utf-8") if path else _data_text("tips.json"))
    tips: dict[str, Tip] = {}
    for item in doc["tips"]:
        tip = Tip(item["id"], item["category"], item["title"], item["description"])
        if tip.id in tips:
            raise ValueError(f"duplicate tip id {tip.id}")
        tips[tip.id] = tip
    return TipLibrary(dict(sorted(tips.items())), tuple(doc["categories"]), tuple(doc["universal"]))


def load_rules(library: TipLibrary, path: str | Path | None = None) -> list[RetrievalRule]:
    doc = json.loads(Path(path).read_text(encoding="utf-8") if path else _data_text("rules.json"))
    rules = []
    for item in doc["rules"]:
        rule = RetrievalRule(item["id"], item["source"], item["when"], tuple(item["emits"]))
        if rule.source not in SOURCES:
            raise ValueError(f"rule {rule.id}: unknown source {rule.source!r}")
        unknown = [t for t in rule.emits if t not in library.tips]
        if unknown:
            raise ValueError(f"rule {rule.id} emits unknown tips {unknown}")
        _compile(rule.when)  # fail fast on bad patterns
        rules.append(rule)
    return rules


# --------------------------------------------------------------------------
# predicate evaluation


@lru_cache(maxsize=None)
def phrase_pattern(phrase: str) -> re.Pattern:
    words = phrase.lower().split()
    last = words[-1]
    if last.endswith("e"):
        tail = f"(?:{re.escape(last)}(?:s|d)?|{re.escape(last[:-1])}ing)"
    else:
        tail = f"{re.escape(last)}(?:s|es|ed|ing)?"
    body = r"\s+".join([re.escape(w) for w in words[:-1]] + [tail])
    return re.compile(rf"(?<!\w){body}(?!\w)", re.I)


@lru_cache(maxsize=None)
def start_pattern(phrase: str) -> re.Pattern:
    body = r"\s+".join(re.escape(w) for w in phrase.lower().split())
    return re.compile(rf"^\s*{body}(?!\w)", re.I)


@lru_cache(maxsize=None)
def _regex(pattern: str) -> re.Pattern:
    return re.compile(pattern, re.I | re.S)


def _compile(pred: Mapping) -> None:
    for key, val in pred.items():
        if key == "regex":
            _regex(val)
        elif key in ("all", "any"):
            for p in val:
                _compile(p)
        elif key == "not":
            _compile(val)


@dataclass
class MatchContext:
    texts: Mapping[str, str]
    steps: int = 0
    tables: Sequence[str] = ()
    columns: frozenset[str] = frozenset()

    def text(self, on) -> str:
        keys = [on] if isinstance(on, str) else list(on)
        return "\n".join(self.texts.get(k, "") for k in keys)


def evaluate(pred: Mapping, ctx: MatchContext, default_on: str) -> bool:
    on = pred.get("on", default_on)
    if "all" in pred:
        return all(evaluate(p, ctx, on) for p in pred["all"])
    if "any" in pred:
        return any(evaluate(p, ctx, on) for p in pred["any"])
    if "not" in pred:
        return not evaluate(pred["not"], ctx, on)
    if "phrase" in pred:
        text = ctx.text(on)
        return any(phrase_pattern(p).search(text) for p in pred["phrase"])
    if "starts_with" in pred:
        text = ctx.text(on)
        return any(start_pattern(p).search(text) for p in pred["starts_with"])
    if "regex" in pred:
        return _regex(pred["regex"]).search(ctx.text(on)) is not None
    if "count_at_least" in pred:
        spec = pred["count_at_least"]
        return len(phrase_pattern(spec["phrase"]).findall(ctx.text(on))) >= spec["n"]
    if "steps_at_least" in pred:
        return ctx.steps >= pred["steps_at_least"]
    if "tables_mentioned_at_least" in pred:
        text = ctx.text(on)
        hits = {t for t in ctx.tables if re.search(rf"(?<!\w){re.escape(t)}(?!\w)", text, re.I)}
        return len(hits) >= pred["tables_mentioned_at_least"]
    if "schema_columns" in pred:
        return any(normalize_identifier(c) in ctx.columns for c in pred["schema_columns"])
    raise ValueError(f"unknown predicate {sorted(pred)}")


# --------------------------------------------------------------------------
# engine


@dataclass
class GuidanceEngine:
    library: TipLibrary
    rules: list[RetrievalRule] = field(default_factory=list)

    @classmethod
    def default(cls) -> "GuidanceEngine":
        return _default_engine()

    @classmethod
    def from_files(cls, tips_path=None, rules_path=None) -> "GuidanceEngine":
        library = load_library(tips_path)
        return cls(library, load_rules(library, rules_path))

    def context(self, question: str, evidence: str, realized: RealizedPlan | None, schema: SchemaSubset | None) -> MatchContext:
        tables = [t.name for t in schema.tables()] if schema is not None else []
        columns = frozenset(r.column for r in schema.refs) if schema is not None else frozenset()
        return MatchContext(
            texts={"question": question or "", "evidence": evidence or "",
                   "plan": realized.text() if realized is not None else ""},
            steps=len(realized.steps) if realized is not None else 0,
            tables=tables,
            columns=columns,
        )

    def fired_rules(self, ctx: MatchContext) -> list[str]:
        return [r.id for r in self.rules if r.source != "universal" and evaluate(r.when, ctx, _TEXT_DEFAULT[r.source])]

    def retrieve(
        self,
        question: str = "",
        evidence: str = "",
        realized: RealizedPlan | None = None,
        schema: SchemaSubset | None = None,
    ) -> list[Tip]:
        ctx = self.context(question, evidence, realized, schema)
        ids = set(self.library.universal)
        for rule in self.rules:
            if rule.source == "universal" or evaluate(rule.when, ctx, _TEXT_DEFAULT[rule.source]):
                ids.update(rule.emits)
        return [self.library.tips[i] for i in sorted(ids)]


@lru_cache(maxsize=1)
def _default_engine() -> GuidanceEngine:
    return GuidanceEngine.from_files()


def retrieve_tips(question: str, evidence: str, realized: RealizedPlan | None, schema: SchemaSubset | None,
                  engine: GuidanceEngine | None = None) -> list[Tip]:
    return (engine or _default_engine()).retrieve(question, evidence, realized, schema)


def render_guidance(tips: Iterable[Tip]) -> str:
    return "\n\n".join(t.render() for t in sorted(tips, key=lambda t: t.id))


# --------------------------------------------------------------------------
# plan realization

_STEP = re.compile(r"^\s*\**\s*step\s+(\d+)\s*\**\s*[:.]\s*\**\s*(.*?)\s*\**\s*$", re.I)
_FIELD = re.compile(r"^\s*[-*]?\s*\**\s*(info need|possible paths|keywords|evidence)\s*\**\s*:\s*(.*)$", re.I)


def _split_list(text: str) -> tuple[str, ...]:
    items = [x.strip().strip("'\"`[]").strip() for x in text.strip().strip("[]").split(",")]
    return tuple(x for x in items if x)


def parse_realized_plan(content: str) -> RealizedPlan:
    steps: list[dict] = []
    for line in content.splitlines():
        m = _STEP.match(line)
        if m:
            steps.append({"description": m.group(2), "fields": {}})
            continue
        f = _FIELD.match(line)
        if f and steps:
            steps[-1]["fields"][f.group(1).lower()] = f.group(2).strip()
    if not steps:
        raise ParseFailure("no 'Step N:' lines")
    out = []
    for s in steps:
        fields = s["fields"]
        out.append(PlanStep(
            description=s["description"],
            info_need=fields.get("info need", ""),
            possible_paths=_split_list(fields.get("possible paths", "")),
            keywords=_split_list(fields.get("keywords", "")),
            evidence_snippet=fields.get("evidence") or None,
        ))
    return RealizedPlan(tuple(out), raw=content)


def fallback_plan(question: str) -> RealizedPlan:
    return RealizedPlan((PlanStep(question, keywords=tuple(question.split())),), fallback=True)


def realize_plan(gw: Gateway, question: str, evidence: str, schema: SchemaSubset, plan, temperature: float = 0.0) -> RealizedPlan:
    """Expand the master plan into steps with alternative realizations and keywords."""
    prompt = prompts.render(
        prompts.REALIZE, question=question, evidence=evidence or "None",
        schema=serialize_for_prompt(schema, "compact"), logical_plan=plan.render(),
    )
    realized = gw.ask(ChatRequest.of(prompt, "sql_kw", temperature), parse_realized_plan)
    if realized is None:
        logger.warning("realized plan unparseable; falling back to question keywords")
        return fallback_plan(question)
    return realized
