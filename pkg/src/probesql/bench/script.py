"""Replay-script construction for fixture benchmarks.

The builder mirrors the linking pipeline stage by stage, so a script built for
a gold column set makes the linker return exactly that set: the deletion pass
drops every table without a gold column, the selection pass keeps the gold
columns, profiling marks only gold columns relevant and synthesis confirms the
gold set in one round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from ..linking import LinkConfig
from ..schema import ColumnRef, DatabaseSchema, merge_identical_tables, partition_batches


def fenced(lang: str, body: str) -> str:
    return f"```{lang}\n{body}\n```"


def as_json(doc) -> str:
    return fenced("json", json.dumps(doc, indent=2))


def action(kind: str, body: str = "") -> str:
    return f"[{kind}]\n{body}".rstrip()


def sql_action(kind: str, *statements: str) -> str:
    return action(kind, fenced("sql", ";\n".join(s.strip().rstrip(";") for s in statements) + ";"))


def refine(plan: Sequence[str], understanding: str) -> str:
    lines = "\n".join(f"{i}. {s}" for i, s in enumerate(plan, 1))
    return action("REFINE", f"### Query Plan\n{lines}\n\n### Updated Understanding\n{understanding}")


def entry(tag: str, response: str, contains: str | None = None) -> dict:
    d = {"tag": tag, "response": response}
    if contains is not None:
        d["contains"] = contains
    return d


@dataclass
class ScriptBuilder:
    schema: DatabaseSchema
    question: str
    gold: set[ColumnRef]
    plan: Sequence[str]
    link: LinkConfig = field(default_factory=LinkConfig)
    keywords: Sequence[str] = ()

    def __post_init__(self) -> None:
        self.gold = {r.normalized() for r in self.gold}
        for ref in self.gold:
            if not self.schema.resolves(ref):
                raise ValueError(f"gold column {ref} not in schema")
        self.gold_tables = [t for t in self.schema.tables if any(r.table == t.name.lower() for r in self.gold)]

    def _cols(self, table) -> list[str]:
        return [c.name for c in table.columns if ColumnRef(table.name, c.name) in self.gold]

    def linking_entries(self) -> list[dict]:
        plan_doc = as_json({"logical_steps": [f"Step {i}: {s}" for i, s in enumerate(self.plan, 1)]})
        out = [entry("sl_plan", plan_doc) for _ in range(self.link.n_plans)]
        out.append(entry("sl_agg", "\n".join(f"{i}. {s}" for i, s in enumerate(self.plan, 1))))

        batches = partition_batches(merge_identical_tables(self.schema),
                                    self.link.min_batch_tokens, self.link.max_batch_tokens)
        gold_names = {t.name for t in self.gold_tables}
        for batch in batches:
            contains = batch.render() if len(batches) > 1 else None
            drop = [m for m in batch.member_names() if m not in gold_names]
            keep = []
            for e in batch.entries:
                for m in e.members:
                    if m in gold_names:
                        keep.append({"table": m, "columns": self._cols(self.schema.table(m))})
            out.append(entry("sl_del", as_json({
                "reasoning": "Tables with no bearing on any plan step are removed.",
                "obviously_irrelevant_tables": drop, "obviously_irrelevant_columns": [],
            }), contains))
            out.append(entry("sl_sel", as_json({
                "reasoning": "Columns used by the plan steps are kept.",
                "relevant_tables": [], "relevant_columns": keep,
            }), contains))

        out.append(entry("sl_semantics", as_json({
            "database_structure": "Tables " + ", ".join(sorted(gold_names)) + " hold the needed facts.",
            "query_specific_content_analysis": "Filters, joins and outputs follow the plan.",
            "table_functions": {t.name: "holds columns needed by the plan" for t in self.gold_tables},
        })))

        for t in self.gold_tables:
            marker = f"TARGET TABLE: {t.name} ***"
            q = t.name.replace('"', '""')
            out.append(entry("sl_profile", fenced("sql", f'SELECT COUNT(*) FROM "{q}";\nSELECT * FROM "{q}" LIMIT 3;'), marker))
            out.append(entry("sl_profile_verdict", as_json({
                "relevant": True,
                "table_summary": f"{t.name} rows inspected.",
                "relevant_columns": [
                    {"column_name": c, "relevance_reason": "used by the plan", "observations": "values present"}
                    for c in self._cols(t)
                ],
            }), marker))

        out.append(entry("sl_final", as_json({
            "refined_schema": {
                t.name: {"relevant_columns": [{"column_name": c, "relevance_reason": "verified"} for c in self._cols(t)]}
                for t in self.gold_tables
            },
            "rejected_candidates": [],
            "exploration_queries": [],
            "status": "CONFIRM",
        })))
        return out

    def realize_entry(self) -> dict:
        lines = []
        for i, s in enumerate(self.plan, 1):
            lines += [f"Step {i}: {s}", f"- Info need: {s}", f"- Possible paths: {s}"]
            kws = self.keywords if i == 1 and self.keywords else ()
            lines.append("- Keywords: " + ", ".join(kws))
        return entry("sql_kw", "\n".join(lines))

    @staticmethod
    def episode_entries(j: int, actions: Sequence[str]) -> list[dict]:
        return [entry(f"sql_agent_step.s{j}", a) for a in actions]


def standard_episodes(agent_sql: str, explore: Sequence[str], wrong_sql: str, broken_sql: str,
                      plan: Sequence[str]) -> list[list[str]]:
    """Three samples that vote 2:1 for ``agent_sql``.

    0: explore, refine, submit, confirm.
    1: explore, refine, submit a failing query, fix it, confirm.
    2: explore, submit a wrong query, confirm.
    """
    note = "Column values match the question wording; the plan holds."
    return [
        [sql_action("EXPLORE", *explore), refine(plan, note), sql_action("SQL", agent_sql), action("CONFIRM")],
        [sql_action("EXPLORE", *explore), refine(plan, note), sql_action("SQL", broken_sql),
         sql_action("SQL", agent_sql), action("CONFIRM")],
        [sql_action("EXPLORE", *explore), sql_action("SQL", wrong_sql), action("CONFIRM")],
    ]
