"""Ten hand-built tasks over the fixture databases, with full replay scripts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ProbeSQLError
from ..metrics import extract_gold_columns
from ..schema import ColumnRef, introspect_sqlite
from ..sqlexec import ExecError, canonicalize, compare, execute
from .fixtures import BUILDERS
from .script import ScriptBuilder, standard_episodes


@dataclass
class SmokeTask:
    qid: str
    db: str
    question: str
    gold_sql: str
    agent_sql: str
    wrong_sql: str
    broken_sql: str
    explore: list[str]
    plan: list[str]
    gold_columns: list[str]
    evidence: str = ""
    keywords: list[str] = field(default_factory=list)


TASKS = [
    SmokeTask(
        "smoke_01", "schools", "How many schools are located in Alameda County?",
        "SELECT COUNT(*) FROM schools WHERE County = 'Alameda'",
        "SELECT COUNT(CDSCode) FROM schools WHERE County = 'Alameda'",
        "SELECT COUNT(*) FROM schools WHERE County = 'alameda'",
        "SELECT COUNT(*) FROM schools WHERE county_name = 'Alameda'",
        ["SELECT DISTINCT County FROM schools"],
        ["Keep schools in the requested county", "Count them"],
        ["schools.County"],
    ),
    SmokeTask(
        "smoke_02", "schools", "What is the highest free meal rate (K-12) among schools in Alameda county?",
        'SELECT MAX(T2."Free Meal Count (K-12)" / T2."Enrollment (K-12)") FROM schools AS T1 '
        "JOIN frpm AS T2 ON T1.CDSCode = T2.CDSCode WHERE T1.County = 'Alameda'",
        'SELECT f."Free Meal Count (K-12)" / f."Enrollment (K-12)" AS rate FROM frpm f JOIN schools s '
        "ON s.CDSCode = f.CDSCode WHERE s.County = 'Alameda' ORDER BY rate DESC LIMIT 1",
        'SELECT MIN(T2."Free Meal Count (K-12)" / T2."Enrollment (K-12)") FROM schools AS T1 '
        "JOIN frpm AS T2 ON T1.CDSCode = T2.CDSCode WHERE T1.County = 'Alameda'",
        'SELECT MAX("Free Meal Count (K-12)" / Enrollment) FROM frpm',
        ['SELECT "Enrollment (K-12)", "Free Meal Count (K-12)" FROM frpm LIMIT 5'],
        ["Keep schools in the requested county", "Compute free meal count divided by enrollment",
         "Take the largest rate"],
        ["schools.CDSCode", "schools.County", "frpm.CDSCode", "frpm.Free Meal Count (K-12)", "frpm.Enrollment (K-12)"],
        evidence="free meal rate = `Free Meal Count (K-12)` / `Enrollment (K-12)`",
    ),
    SmokeTask(
        "smoke_03", "schools", "List the names of schools with an average math score above 560.",
        "SELECT sname FROM satscores WHERE AvgScrMath > 560",
        "SELECT sname FROM satscores WHERE AvgScrMath > 560 ORDER BY sname",
        "SELECT sname FROM satscores WHERE AvgScrRead > 560",
        "SELECT name FROM satscores WHERE AvgScrMath > 560",
        ["SELECT MIN(AvgScrMath), MAX(AvgScrMath) FROM satscores"],
        ["Keep schools whose average math score exceeds the threshold", "Return their names"],
        ["satscores.sname", "satscores.AvgScrMath"],
    ),
    SmokeTask(
        "smoke_04", "schools", "Which city has the school with the most test takers?",
        "SELECT T1.City FROM schools AS T1 JOIN satscores AS T2 ON T1.CDSCode = T2.cds "
        "ORDER BY T2.NumTstTakr DESC LIMIT 1",
        "SELECT s.City FROM satscores t JOIN schools s ON s.CDSCode = t.cds "
        "WHERE t.NumTstTakr = (SELECT MAX(NumTstTakr) FROM satscores)",
        "SELECT T1.City FROM schools AS T1 JOIN satscores AS T2 ON T1.CDSCode = T2.cds "
        "ORDER BY T2.NumTstTakr ASC LIMIT 1",
        "SELECT City FROM schools ORDER BY NumTstTakr DESC LIMIT 1",
        ["SELECT cds, NumTstTakr FROM satscores ORDER BY NumTstTakr DESC LIMIT 3"],
        ["Link test results to schools", "Find the school with the most test takers", "Return its city"],
        ["schools.City", "schools.CDSCode", "satscores.cds", "satscores.NumTstTakr"],
    ),
    SmokeTask(
        "smoke_05", "shop", "How many orders were placed by customers from Canada?",
        "SELECT COUNT(*) FROM orders AS o JOIN customers AS c ON o.customer_id = c.id WHERE c.country = 'Canada'",
        "SELECT COUNT(*) FROM orders WHERE customer_id IN (SELECT id FROM customers WHERE country = 'Canada')",
        "SELECT COUNT(*) FROM customers WHERE country = 'Canada'",
        "SELECT COUNT(*) FROM orders WHERE country = 'Canada'",
        ["SELECT DISTINCT country FROM customers"],
        ["Keep customers from the requested country", "Match their orders", "Count the orders"],
        ["orders.customer_id", "customers.id", "customers.country"],
    ),
    SmokeTask(
        "smoke_06", "shop", "What is the total revenue for products in the Tools category?",
        "SELECT SUM(o.quantity * p.price) FROM orders AS o JOIN products AS p ON o.product_id = p.id "
        "WHERE p.category = 'Tools'",
        "SELECT SUM(p.price * o.quantity) AS revenue FROM products p JOIN orders o ON o.product_id = p.id "
        "WHERE p.category = 'Tools'",
        "SELECT SUM(p.price) FROM orders AS o JOIN products AS p ON o.product_id = p.id WHERE p.category = 'Tools'",
        "SELECT SUM(quantity * price) FROM orders WHERE category = 'Tools'",
        ["SELECT DISTINCT category FROM products", "SELECT quantity FROM orders LIMIT 3"],
        ["Keep products of the requested category", "Multiply quantity by price per order", "Sum the revenue"],
        ["orders.quantity", "orders.product_id", "products.id", "products.price", "products.category"],
        evidence="revenue = quantity * price",
    ),
    SmokeTask(
        "smoke_07", "shop", "Which region had the largest total sales amount in 2018?",
        "SELECT region FROM sales_2018 GROUP BY region ORDER BY SUM(amount) DESC LIMIT 1",
        "SELECT region FROM (SELECT region, SUM(amount) AS total FROM sales_2018 GROUP BY region) "
        "ORDER BY total DESC LIMIT 1",
        "SELECT region FROM sales_2017 GROUP BY region ORDER BY SUM(amount) DESC LIMIT 1",
        "SELECT region FROM sales GROUP BY region ORDER BY SUM(amount) DESC LIMIT 1",
        ["SELECT region, COUNT(*) FROM sales_2018 GROUP BY region"],
        ["Use the 2018 sales records", "Total the amount per region", "Return the region with the largest total"],
        ["sales_2018.region", "sales_2018.amount"],
    ),
    SmokeTask(
        "smoke_08", "shop", "For each customer segment, how many distinct customers placed an order?",
        "SELECT c.segment, COUNT(DISTINCT o.customer_id) FROM customers AS c JOIN orders AS o "
        "ON c.id = o.customer_id GROUP BY c.segment",
        "SELECT c.segment, COUNT(DISTINCT c.id) FROM orders o JOIN customers c ON c.id = o.customer_id "
        "GROUP BY c.segment",
        "SELECT c.segment, COUNT(o.customer_id) FROM customers AS c JOIN orders AS o "
        "ON c.id = o.customer_id GROUP BY c.segment",
        "SELECT segment, COUNT(DISTINCT customer) FROM customers GROUP BY segment",
        ["SELECT DISTINCT segment FROM customers"],
        ["Match orders to customers", "Group by segment", "Count distinct ordering customers"],
        ["customers.segment", "customers.id", "orders.customer_id"],
    ),
    SmokeTask(
        "smoke_09", "metrics", "What was the average GDP value in 2020 for entities of kind country?",
        "SELECT AVG(o.value) FROM observations AS o JOIN entities AS e ON o.entity_id = e.entity_id "
        "WHERE o.metric_id = 'GDP' AND e.kind = 'country' AND o.year = 2020",
        "SELECT AVG(value) FROM observations WHERE metric_id = 'GDP' AND year = 2020 "
        "AND entity_id IN (SELECT entity_id FROM entities WHERE kind = 'country')",
        "SELECT AVG(value) FROM observations WHERE metric_id = 'GDP' AND year = 2020",
        "SELECT AVG(value) FROM observations WHERE metric = 'GDP' AND year = 2020",
        ["SELECT DISTINCT metric_id FROM observations", "SELECT DISTINCT kind FROM entities"],
        ["Keep GDP observations for the requested year", "Keep entities of the requested kind", "Average the values"],
        ["observations.value", "observations.entity_id", "observations.metric_id", "observations.year",
         "entities.entity_id", "entities.kind"],
    ),
    SmokeTask(
        "smoke_10", "metrics", "Name the entity with the highest POP value in 2021.",
        "SELECT e.name FROM entities AS e JOIN observations AS o ON e.entity_id = o.entity_id "
        "WHERE o.metric_id = 'POP' AND o.year = 2021 ORDER BY o.value DESC LIMIT 1",
        "SELECT e.name FROM observations o JOIN entities e ON e.entity_id = o.entity_id "
        "WHERE o.metric_id = 'POP' AND o.year = 2021 ORDER BY o.value DESC LIMIT 1",
        "SELECT e.name FROM entities AS e JOIN observations AS o ON e.entity_id = o.entity_id "
        "WHERE o.metric_id = 'POP' ORDER BY o.value ASC LIMIT 1",
        "SELECT name FROM observations WHERE metric_id = 'POP' ORDER BY value DESC LIMIT 1",
        ["SELECT entity_id, value FROM observations WHERE metric_id = 'POP' AND year = 2021"],
        ["Keep POP observations for the requested year", "Find the largest value", "Return the entity name"],
        ["entities.name", "entities.entity_id", "observations.entity_id", "observations.metric_id",
         "observations.year", "observations.value"],
    ),
]


class FixtureError(ProbeSQLError):
    """A fixture failed its build-time self-check."""


def verify_task(task: SmokeTask, db_path: Path) -> None:
    """Build-time checks: gold non-empty, agent SQL matches gold, wrong SQL differs, broken SQL fails."""
    gold = execute(task.gold_sql, db_path)
    if isinstance(gold, ExecError) or not gold.rows:
        raise FixtureError(f"{task.qid}: gold SQL must return rows ({gold})")
    agent = execute(task.agent_sql, db_path)
    if isinstance(agent, ExecError) or not compare(agent, gold, "strict"):
        raise FixtureError(f"{task.qid}: agent SQL does not reproduce the gold result")
    wrong = execute(task.wrong_sql, db_path)
    if isinstance(wrong, ExecError) or canonicalize(wrong) == canonicalize(gold):
        raise FixtureError(f"{task.qid}: wrong SQL must run and differ from gold")
    if not isinstance(execute(task.broken_sql, db_path), ExecError):
        raise FixtureError(f"{task.qid}: broken SQL unexpectedly succeeded")
    schema = introspect_sqlite(db_path)
    extracted = extract_gold_columns(task.gold_sql, schema).refs
    listed = {ColumnRef.parse(c) for c in task.gold_columns}
    if extracted != listed:
        raise FixtureError(f"{task.qid}: gold columns {sorted(map(str, listed))} != "
                           f"extracted {sorted(map(str, extracted))}")


def task_script(task: SmokeTask, db_path: Path) -> list[dict]:
    schema = introspect_sqlite(db_path)
    builder = ScriptBuilder(schema, task.question, {ColumnRef.parse(c) for c in task.gold_columns}, task.plan,
                            keywords=task.keywords)
    entries = builder.linking_entries() + [builder.realize_entry()]
    for j, actions in enumerate(standard_episodes(task.agent_sql, task.explore, task.wrong_sql,
                                                  task.broken_sql, task.plan)):
        entries += builder.episode_entries(j, actions)
    return entries


CONFIG = """# smoke benchmark: scripted backend, three samples per task
dataset = "tasks.jsonl"
dataset_kind = "native"
out_dir = "runs"
workers = 4

[backend]
kind = "replay"
replay = "replay.json"

[sampling]
n = 3
"""


def build_smoke(out: Path) -> dict[str, Path]:
    out = Path(out)
    dbs = {name: build(out / "dbs" / f"{name}.sqlite") for name, build in BUILDERS.items()}
    lines, scripts = [], {}
    for task in TASKS:
        db = dbs[task.db]
        verify_task(task, db)
        scripts[task.qid] = {"entries": task_script(task, db)}
        lines.append(json.dumps({
            "question_id": task.qid, "question": task.question, "db_path": f"dbs/{task.db}.sqlite",
            "evidence": task.evidence, "gold_sql": task.gold_sql, "gold_columns": task.gold_columns,
        }, sort_keys=True))
    (out / "tasks.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "replay.json").write_text(json.dumps({"tasks": scripts}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.toml").write_text(CONFIG, encoding="utf-8")
    return {"smoke_dataset": out / "tasks.jsonl", "smoke_replay": out / "replay.json",
            "smoke_config": out / "config.toml"}
