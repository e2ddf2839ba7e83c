import json
import sqlite3

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probesql.errors import DuplicateName, MalformedSchema, UnresolvedRef
from probesql.schema import (
    Column,
    ColumnRef,
    DatabaseSchema,
    MergedEntry,
    SchemaSubset,
    Table,
    estimate_tokens,
    introspect_sqlite,
    load_schema,
    merge_identical_tables,
    partition_batches,
    schema_from_dict,
    schema_to_dict,
    serialize_for_prompt,
)


def _schema():
    return DatabaseSchema("db", (
        Table("Orders", (Column("id", "INTEGER"), Column("Amount", "REAL"))),
        Table("customers", (Column("id", "INTEGER"), Column("name", "TEXT", "full name", ("a", "b")))),
    ))


def test_column_ref_normalizes_case_and_quotes():
    assert ColumnRef('"Orders"', "[Amount]") == ColumnRef("orders", "amount")
    assert ColumnRef.parse("frpm.Enrollment (K-12)") == ColumnRef("frpm", "enrollment (k-12)")
    assert str(ColumnRef("A", "B")) == "a.b"
    with pytest.raises(ValueError):
        ColumnRef.parse("nodot")


def test_duplicate_names_rejected():
    with pytest.raises(DuplicateName):
        Table("t", (Column("a"), Column("A")))
    with pytest.raises(DuplicateName):
        DatabaseSchema("db", (Table("t", (Column("a"),)), Table("T", (Column("b"),))))


def test_malformed_schema():
    with pytest.raises(MalformedSchema):
        Column(" ")
    with pytest.raises(MalformedSchema):
        DatabaseSchema("db", (Table("t", ()),))
    with pytest.raises(MalformedSchema):
        Table("t", (Column("a"),), primary_key=("b",))
    with pytest.raises(MalformedSchema):
        schema_from_dict({"tables": [{"columns": []}]})
    with pytest.raises(MalformedSchema):
        load_schema("{not json")


def test_subset_rejects_unresolved_refs():
    schema = _schema()
    sub = SchemaSubset(schema, frozenset({ColumnRef("ORDERS", "amount")}))
    assert ColumnRef("orders", "amount") in sub
    assert [t.name for t in sub.tables()] == ["Orders"]
    with pytest.raises(UnresolvedRef):
        SchemaSubset(schema, frozenset({ColumnRef("orders", "missing")}))


def test_dict_round_trip():
    schema = _schema()
    again = schema_from_dict(json.loads(json.dumps(schema_to_dict(schema))))
    assert again == schema
    assert load_schema(json.dumps(schema_to_dict(schema))) == schema


def test_introspection_caps_samples(tmp_path):
    path = tmp_path / "x.sqlite"
    conn = sqlite3.connect(path)
    conn.execute("CREATE TABLE p (id INTEGER PRIMARY KEY, v TEXT)")
    conn.execute("CREATE TABLE c (pid INTEGER REFERENCES p(id), w REAL)")
    conn.executemany("INSERT INTO p VALUES (?, ?)", [(i, f"v{i}") for i in range(10)])
    conn.commit()
    conn.close()
    schema = introspect_sqlite(path, descriptions={"p.v": "a value"})
    p = schema.table("p")
    assert p.primary_key == ("id",)
    assert p.column("v").sample_values == ("v0", "v1", "v2")
    assert p.column("v").description == "a value"
    assert schema.table("c").foreign_keys[0].ref_table == "p"
    assert load_schema(path) == introspect_sqlite(path)


def test_serialization_styles():
    text = serialize_for_prompt(_schema(), "full")
    assert "Table: Orders" in text and "samples: a, b" in text
    assert "samples" not in serialize_for_prompt(_schema(), "compact")


def test_token_estimate_is_ceil_bytes_over_four():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("é") == 1  # two UTF-8 bytes


def test_identical_tables_merge():
    cols = (Column("order_id", "INTEGER"), Column("amount", "REAL"))
    schema = DatabaseSchema("db", (Table("sales_2017", cols), Table("other", (Column("x"),)),
                                   Table("sales_2018", tuple(reversed(cols)))))
    entries = merge_identical_tables(schema)
    assert [e.members for e in entries] == [("sales_2017", "sales_2018"), ("other",)]
    refs = {str(r) for r in entries[0].refs()}
    assert refs == {"sales_2017.order_id", "sales_2017.amount", "sales_2018.order_id", "sales_2018.amount"}


@settings(max_examples=200, deadline=None)
@given(sizes=st.lists(st.integers(1, 300), min_size=1, max_size=40), cap=st.integers(50, 400))
def test_batches_cover_every_entry_once_and_respect_cap(sizes, cap):
    entries = [MergedEntry(Table(f"t{i}", (Column("c"),)), (f"t{i}",)) for i in range(len(sizes))]
    batches = partition_batches(entries, min_tokens=0, max_tokens=cap, sizes=sizes)
    seen = [m for b in batches for m in b.member_names()]
    assert sorted(seen) == sorted(f"t{i}" for i in range(len(sizes)))
    for b in batches:
        assert b.token_estimate == sum(sizes[int(m[1:])] for m in b.member_names())
        assert b.token_estimate <= cap or len(b.entries) == 1
