import shutil
import sqlite3

import pytest

from oracles import brute_linking
from probesql.agent import EpisodeResult
from probesql.bench import casestudy
from probesql.bench.smoke import TASKS
from probesql.errors import ParseFailure
from probesql.metrics import aggregate_linking, extract_gold_columns, score_generation, score_linking
from probesql.schema import ColumnRef, introspect_sqlite, load_schema
from probesql.selection import CandidateBundle, vote
from probesql.sqlexec import ExecError, ResultSet, canonicalize, execute


def refs(*names):
    return {ColumnRef.parse(n) for n in names}


def test_linking_scores():
    e = score_linking(refs("a.x", "a.y", "b.z"), refs("a.x", "b.q"))
    assert (e.recall, e.precision, e.covered, e.retained) == (0.5, 1 / 3, False, 3)
    assert e.f1 == pytest.approx(0.4)
    assert score_linking([], refs("a.x")).f1 == 0.0
    assert score_linking(refs("A.X"), refs("a.x")).covered
    with pytest.raises(ValueError):
        score_linking(refs("a.x"), [])


def test_linking_aggregate_matches_brute_force():
    cases = [(["a.x", "a.y"], ["a.x"]), (["b.z"], ["a.x", "b.z"]), ([], ["c.c"])]
    entries = [score_linking(refs(*p), refs(*g)) for p, g in cases]
    agg = aggregate_linking(entries)
    brute = [brute_linking([tuple(x.split(".")) for x in p], [tuple(x.split(".")) for x in g]) for p, g in cases]
    assert agg["SRR"] == sum(b[3] for b in brute) / 3
    assert agg["NSR"] == sum(b[0] for b in brute) / 3
    assert agg["NSP"] == sum(b[1] for b in brute) / 3
    assert agg["NSF"] == sum(b[2] for b in brute) / 3
    assert agg["C"] == 1.0 and agg["examples"] == 3


def _ep(rows, rounds=0, queries=0):
    r = None if rows is None else ResultSet.from_rows(["a"], [(x,) for x in rows])
    return EpisodeResult("q", r, rounds, queries, True, r is None, 1, 1)


def test_generation_scores_and_gold_failures():
    gold = ResultSet.from_rows(["g"], [(1,)])
    b1 = CandidateBundle.from_episodes([_ep([1], 1, 2), _ep([2], 2, 3), _ep([1], 0, 0)])
    b2 = CandidateBundle.from_episodes([_ep([2]), _ep(None)])
    b3 = CandidateBundle.from_episodes([_ep([1])])
    golds = [gold, gold, ExecError("syntax", "bad gold")]
    score = score_generation([b1, b2, b3], golds, [vote(b) for b in (b1, b2, b3)])
    agg = score.aggregate()
    assert score.gold_failures == [2]
    assert agg["EX"] == 0.5 and agg["Pass@k"] == 0.5
    assert agg["EX@k"] == pytest.approx((2 / 3 + 0) / 2)
    assert agg["R"] == pytest.approx(3 / 5) and agg["Q"] == 1.0
    with pytest.raises(ValueError):
        score_generation([b1], [], [])


def test_unselectable_bundle_scores_zero():
    gold = ResultSet.from_rows(["g"], [(1,)])
    b = CandidateBundle.from_episodes([_ep(None)])
    entry = score_generation([b], [gold], [vote(b)]).entries[0]
    assert not entry.ex and not entry.pass_at_k


def test_gold_column_extraction_cases(tmp_path):
    from probesql.bench.fixtures import build_shop

    schema = introspect_sqlite(build_shop(tmp_path / "shop.sqlite"))
    got = extract_gold_columns(
        "WITH big AS (SELECT customer_id AS cid, SUM(quantity) AS q FROM orders GROUP BY customer_id) "
        "SELECT c.name, big.q FROM customers c JOIN big ON big.cid = c.id ORDER BY q DESC", schema)
    assert got.refs == refs("orders.customer_id", "orders.quantity", "customers.name", "customers.id")
    assert not got.unresolved
    got = extract_gold_columns(
        "SELECT name FROM products p WHERE price > (SELECT AVG(price) FROM products WHERE category = p.category)",
        schema)
    assert got.refs == refs("products.name", "products.price", "products.category")
    got = extract_gold_columns("SELECT * FROM sales_2017", schema)
    assert got.refs == refs("sales_2017.order_id", "sales_2017.region", "sales_2017.amount")
    with pytest.raises(ParseFailure):
        extract_gold_columns("SELECT FROM (", schema)


def _without_column(src, dst, table, column):
    shutil.copy(src, dst)
    conn = sqlite3.connect(dst)
    try:
        cols = [r[1] for r in conn.execute(f'PRAGMA table_info("{table}")')]
        keep = ", ".join(f'"{c}"' for c in cols if c.lower() != column.lower())
        conn.executescript(f'CREATE TABLE "__tmp" AS SELECT {keep} FROM "{table}"; DROP TABLE "{table}"; '
                           f'ALTER TABLE "__tmp" RENAME TO "{table}";')
        conn.commit()
    finally:
        conn.close()


def _mutation_cases(bench):
    dbs = bench["root"] / "smoke" / "dbs"
    for t in TASKS:
        yield t.qid, t.gold_sql, dbs / f"{t.db}.sqlite", None
    folder = bench["root"] / "casestudy" / casestudy.QID
    yield casestudy.QID, casestudy.GOLD_SQL, folder / "deps_dev.sqlite", folder / "schema.json"


def test_gold_columns_are_exactly_the_ones_the_query_needs(bench, tmp_path):
    """Dropping an extracted column breaks or changes the gold result; dropping any other does not."""
    for qid, gold_sql, db, schema_path in _mutation_cases(bench):
        schema = load_schema(schema_path) if schema_path else introspect_sqlite(db)
        extracted = extract_gold_columns(gold_sql, schema).refs
        baseline = canonicalize(execute(gold_sql, db))
        for table in schema.tables:
            if len(table.columns) < 2:
                continue
            for col in table.columns:
                copy = tmp_path / f"{qid}_{table.name}_{abs(hash(col.name))}.sqlite"
                _without_column(db, copy, table.name, col.name)
                out = execute(gold_sql, copy)
                changed = isinstance(out, ExecError) or canonicalize(out) != baseline
                assert changed == (ColumnRef(table.name, col.name) in extracted), (qid, table.name, col.name)
                copy.unlink()
