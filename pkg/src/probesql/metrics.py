"""Linking and generation metrics, plus gold-column extraction from reference SQL."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import sqlglot
from sqlglot import exp
from sqlglot.errors import SqlglotError
from sqlglot.optimizer.scope import Scope, traverse_scope

from .errors import ParseFailure
from .schema import ColumnRef, DatabaseSchema, normalize_identifier
from .selection import CandidateBundle, Selection
from .sqlexec import ExecError, ResultSet, compare

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# schema linking


@dataclass(frozen=True)
class LinkingEntry:
    recall: float
    precision: float
    f1: float
    covered: bool
    retained: int


def score_linking(pred: Iterable[ColumnRef], gold: Iterable[ColumnRef]) -> LinkingEntry:
    p = {r.normalized() for r in pred}
    g = {r.normalized() for r in gold}
    if not g:
        raise ValueError("gold column set must be non-empty")
    hit = len(p & g)
    recall = hit / len(g)
    precision = hit / len(p) if p else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return LinkingEntry(recall, precision, f1, recall == 1.0, len(p))


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def aggregate_linking(entries: Sequence[LinkingEntry]) -> dict:
    """SRR, NSR, NSP, NSF (macro-averaged F1) and mean retained columns."""
    return {
        "SRR": _mean([1.0 if e.covered else 0.0 for e in entries]),
        "NSR": _mean([e.recall for e in entries]),
        "NSP": _mean([e.precision for e in entries]),
        "NSF": _mean([e.f1 for e in entries]),
        "C": _mean([float(e.retained) for e in entries]),
        "examples": len(entries),
    }


# --------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenerationEntry:
    ex: bool
    pass_at_k: bool
    ex_at_k: float
    correct: tuple[bool, ...]
    rounds: tuple[int, ...]
    queries: tuple[int, ...]


def candidate_correct(result: ResultSet | None, gold: ResultSet, mode: str) -> bool:
    return result is not None and compare(result, gold, mode)


def score_example(bundle: CandidateBundle, selection: Selection, gold: ResultSet, mode: str = "strict") -> GenerationEntry:
    correct = tuple(candidate_correct(c.episode.final_result, gold, mode) for c in bundle.candidates)
    ex = not selection.unselectable and correct[selection.index]
    return GenerationEntry(
        ex=ex,
        pass_at_k=any(correct),
        ex_at_k=sum(correct) / len(correct),
        correct=correct,
        rounds=tuple(c.episode.rounds for c in bundle.candidates),
        queries=tuple(c.episode.query_count for c in bundle.candidates),
    )


@dataclass
class GenerationScore:
    entries: list[GenerationEntry]
    gold_failures: list[int] = field(default_factory=list)

    def aggregate(self) -> dict:
        es = self.entries
        all_rounds = [r for e in es for r in e.rounds]
        all_queries = [q for e in es for q in e.queries]
        return {
            "EX": _mean([1.0 if e.ex else 0.0 for e in es]),
            "Pass@k": _mean([1.0 if e.pass_at_k else 0.0 for e in es]),
            "EX@k": _mean([e.ex_at_k for e in es]),
            "R": _mean([float(r) for r in all_rounds]),
            "Q": _mean([float(q) for q in all_queries]),
            "examples": len(es),
            "gold_failures": len(self.gold_failures),
        }


def score_generation(
    bundles: Sequence[CandidateBundle],
    golds: Sequence[ResultSet | ExecError],
    selections: Sequence[Selection],
    mode: str = "strict",
) -> GenerationScore:
    """Score voted answers. Examples whose gold failed to execute are set aside."""
    if not (len(bundles) == len(golds) == len(selections)):
        raise ValueError("one gold and one selection per bundle required")
    score = GenerationScore([])
    for i, (b, g, s) in enumerate(zip(bundles, golds, selections)):
        if isinstance(g, ExecError):
            logger.error("gold SQL for example %d failed: %s", i, g.message)
            score.gold_failures.append(i)
            continue
        score.entries.append(score_example(b, s, g, mode))
    return score


# --------------------------------------------------------------------------
# gold column extraction


@dataclass
class GoldColumns:
    refs: frozenset[ColumnRef]
    ambiguous: list[str] = field(default_factory=list)
    unresolved: list[str] = field(default_factory=list)


def _real_tables(scope: Scope, schema: DatabaseSchema) -> dict[str, str]:
    """alias -> schema table name for base tables visible in one scope."""
    out = {}
    for alias, source in scope.sources.items():
        if isinstance(source, exp.Table):
            table = schema.table(source.name)
            if table is not None:
                out[normalize_identifier(alias)] = table.name
    return out


def _derived_names(scope: Scope) -> dict[str, set[str]]:
    """alias -> projected column names for derived tables and CTEs in one scope."""
    out = {}
    for alias, source in scope.sources.items():
        if isinstance(source, Scope):
            names = set()
            expr = source.expression
            selects = expr.selects if hasattr(expr, "selects") else []
            for p in selects:
                names.add(normalize_identifier(p.alias_or_name))
            out[normalize_identifier(alias)] = names
    return out


def _own_columns(scope: Scope) -> list[exp.Column]:
    return [c for c in scope.columns if c.find_ancestor(exp.Select, exp.Union) is scope.expression
            or not isinstance(scope.expression, exp.Select)]


def extract_gold_columns(sql: str, schema: DatabaseSchema, dialect: str = "sqlite") -> GoldColumns:
    try:
        tree = sqlglot.parse_one(sql, read=dialect)
    except SqlglotError as exc:
        raise ParseFailure(f"cannot parse gold SQL: {exc}") from exc
    refs: set[ColumnRef] = set()
    result = GoldColumns(frozenset())

    def add_table(name: str) -> None:
        refs.update(schema.table(name).refs())

    for scope in traverse_scope(tree):
        real = _real_tables(scope, schema)
        derived = _derived_names(scope)
        expr = scope.expression
        if isinstance(expr, exp.Select):
            for p in expr.expressions:
                if isinstance(p, exp.Star):
                    for name in real.values():
                        add_table(name)
                elif isinstance(p, exp.Column) and isinstance(p.this, exp.Star):
                    name = real.get(normalize_identifier(p.table))
                    if name:
                        add_table(name)
            aliases = {normalize_identifier(p.alias) for p in expr.expressions if p.alias}
        else:
            aliases = set()
        for col in _own_columns(scope):
            if isinstance(col.this, exp.Star):
                continue
            cname = normalize_identifier(col.name)
            qual = normalize_identifier(col.table)
            ref = _resolve(scope, schema, qual, cname, real, derived)
            if ref == "derived":
                continue
            if isinstance(ref, list):
                if len(ref) > 1:
                    result.ambiguous.append(f"{col.sql()} -> {', '.join(sorted(map(str, ref)))}")
                refs.update(ref)
                continue
            if not qual and cname in aliases:
                continue
            result.unresolved.append(col.sql())
    result.refs = frozenset(refs)
    return result


def _resolve(scope: Scope, schema: DatabaseSchema, qual: str, cname: str, real: dict, derived: dict):
    """Refs for a column in this scope or an enclosing one (correlated subqueries)."""
    s: Scope | None = scope
    while s is not None:
        if s is not scope:
            real, derived = _real_tables(s, schema), _derived_names(s)
        if qual:
            if qual in real:
                table = schema.table(real[qual])
                return [ColumnRef(table.name, cname)] if table.column(cname) else None
            if qual in derived:
                return "derived"
        else:
            hits = [ColumnRef(name, cname) for name in dict.fromkeys(real.values()) if schema.table(name).column(cname)]
            if hits:
                return hits
            if any(cname in names or "*" in names for names in derived.values()):
                return "derived"
        s = s.parent
    return None
