"""Database schema model: loading, prompt serialization, merging and batching.

Everything downstream identifies columns through :class:`ColumnRef`, whose
equality is case-insensitive and ignores identifier quoting.
"""

from __future__ import annotations

import json
import logging
import math
import sqlite3
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import DuplicateName, MalformedSchema, UnresolvedRef

logger = logging.getLogger(__name__)

SAMPLE_CAP = 3
DEFAULT_MIN_BATCH_TOKENS = 8000
DEFAULT_MAX_BATCH_TOKENS = 12000

_QUOTES = "\"'`[]"


def estimate_tokens(text: str) -> int:
    """Default token estimator: one token per four UTF-8 bytes, rounded up."""
    return math.ceil(len(text.encode("utf-8")) / 4)


TokenEstimator = Callable[[str], int]


def normalize_identifier(name: str) -> str:
    return name.strip().strip(_QUOTES).strip().lower()


@dataclass(frozen=True)
class ColumnRef:
    table: str
    column: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", normalize_identifier(self.table))
        object.__setattr__(self, "column", normalize_identifier(self.column))

    @classmethod
    def parse(cls, dotted: str) -> "ColumnRef":
        table, _, column = dotted.rpartition(".")
        if not table:
            raise ValueError(f"expected table.column, got {dotted!r}")
        return cls(table, column)

    def normalized(self) -> "ColumnRef":
        return ColumnRef(self.table, self.column)

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"

    def __lt__(self, other: "ColumnRef") -> bool:
        return (self.table, self.column) < (other.table, other.column)


@dataclass(frozen=True)
class Column:
    name: str
    data_type: str = ""
    description: str = ""
    sample_values: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise MalformedSchema("column name must be non-empty")
        object.__setattr__(self, "sample_values", tuple(self.sample_values)[:SAMPLE_CAP])


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_table: str
    ref_column: str


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]
    primary_key: tuple[str, ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise MalformedSchema("table name must be non-empty")
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        object.__setattr__(self, "foreign_keys", tuple(self.foreign_keys))
        seen: set[str] = set()
        for col in self.columns:
            key = normalize_identifier(col.name)
            if key in seen:
                raise DuplicateName(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)
        for name in self.primary_key:
            if normalize_identifier(name) not in seen:
                raise MalformedSchema(f"primary key column {name!r} not in table {self.name!r}")
        for fk in self.foreign_keys:
            if normalize_identifier(fk.column) not in seen:
                raise MalformedSchema(f"foreign key column {fk.column!r} not in table {self.name!r}")

    def column(self, name: str) -> Column | None:
        key = normalize_identifier(name)
        for col in self.columns:
            if normalize_identifier(col.name) == key:
                return col
        return None

    def refs(self, as_name: str | None = None) -> list[ColumnRef]:
        return [ColumnRef(as_name or self.name, c.name) for c in self.columns]

    def restrict(self, column_names: Iterable[str]) -> "Table":
        keep = {normalize_identifier(c) for c in column_names}
        cols = tuple(c for c in self.columns if normalize_identifier(c.name) in keep)
        pk = tuple(p for p in self.primary_key if normalize_identifier(p) in keep)
        fks = tuple(f for f in self.foreign_keys if normalize_identifier(f.column) in keep)
        return Table(self.name, cols, pk, fks)


@dataclass(frozen=True)
class DatabaseSchema:
    name: str
    tables: tuple[Table, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", tuple(self.tables))
        seen: set[str] = set()
        for t in self.tables:
            key = normalize_identifier(t.name)
            if key in seen:
                raise DuplicateName(f"duplicate table name {t.name!r}")
            seen.add(key)
        if sum(len(t.columns) for t in self.tables) < 1:
            raise MalformedSchema("schema must contain at least one column")

    def table(self, name: str) -> Table | None:
        key = normalize_identifier(name)
        for t in self.tables:
            if normalize_identifier(t.name) == key:
                return t
        return None

    def all_refs(self) -> list[ColumnRef]:
        return [ref for t in self.tables for ref in t.refs()]

    def resolves(self, ref: ColumnRef) -> bool:
        t = self.table(ref.table)
        return t is not None and t.column(ref.column) is not None

    @property
    def column_count(self) -> int:
        return sum(len(t.columns) for t in self.tables)

    def full_subset(self) -> "SchemaSubset":
        return SchemaSubset(self, frozenset(self.all_refs()))


@dataclass(frozen=True)
class SchemaSubset:
    """A set of column references over a parent schema, with per-column notes."""

    schema: DatabaseSchema
    refs: frozenset[ColumnRef] = frozenset()
    annotations: Mapping[ColumnRef, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "refs", frozenset(r.normalized() for r in self.refs))
        for ref in self.refs:
            if not self.schema.resolves(ref):
                raise UnresolvedRef(f"{ref} does not resolve in schema {self.schema.name!r}")
        extra = set(self.annotations) - set(self.refs)
        if extra:
            raise ValueError(f"annotations for refs outside subset: {sorted(map(str, extra))}")

    def __len__(self) -> int:
        return len(self.refs)

    def __contains__(self, ref: object) -> bool:
        return ref in self.refs

    def tables(self) -> list[Table]:
        """Parent tables (schema order) restricted to the subset's columns."""
        out = []
        for t in self.schema.tables:
            cols = [c.name for c in t.columns if ColumnRef(t.name, c.name) in self.refs]
            if cols:
                out.append(t.restrict(cols))
        return out

    def ordered_refs(self) -> list[ColumnRef]:
        return [ref for t in self.tables() for ref in t.refs()]


# --------------------------------------------------------------------------
# loading


def _column_from_doc(doc: Mapping) -> Column:
    if not isinstance(doc, Mapping) or "name" not in doc:
        raise MalformedSchema(f"column entry needs a name: {doc!r}")
    samples = doc.get("samples", doc.get("sample_values", [])) or []
    return Column(
        name=str(doc["name"]),
        data_type=str(doc.get("type", doc.get("data_type", "")) or ""),
        description=str(doc.get("description", "") or ""),
        sample_values=tuple(str(s) for s in samples),
    )


def _fk_from_doc(doc) -> ForeignKey:
    if isinstance(doc, Mapping):
        return ForeignKey(str(doc["column"]), str(doc["ref_table"]), str(doc["ref_column"]))
    if isinstance(doc, (list, tuple)) and len(doc) == 3:
        return ForeignKey(*(str(x) for x in doc))
    raise MalformedSchema(f"bad foreign key entry: {doc!r}")


def schema_from_dict(doc: Mapping) -> DatabaseSchema:
    try:
        tables = []
        for tdoc in doc["tables"]:
            tables.append(
                Table(
                    name=str(tdoc["name"]),
                    columns=tuple(_column_from_doc(c) for c in tdoc["columns"]),
                    primary_key=tuple(str(p) for p in tdoc.get("primary_key", []) or []),
                    foreign_keys=tuple(_fk_from_doc(f) for f in tdoc.get("foreign_keys", []) or []),
                )
            )
        return DatabaseSchema(name=str(doc.get("name", "db")), tables=tuple(tables))
    except (KeyError, TypeError) as exc:
        raise MalformedSchema(f"schema document is missing fields: {exc}") from exc


def schema_to_dict(schema: DatabaseSchema) -> dict:
    return {
        "name": schema.name,
        "tables": [
            {
                "name": t.name,
                "columns": [
                    {
                        "name": c.name,
                        "type": c.data_type,
                        "description": c.description,
                        "samples": list(c.sample_values),
                    }
                    for c in t.columns
                ],
                "primary_key": list(t.primary_key),
                "foreign_keys": [[f.column, f.ref_table, f.ref_column] for f in t.foreign_keys],
            }
            for t in schema.tables
        ],
    }


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def introspect_sqlite(path: str | Path, sample_cap: int = SAMPLE_CAP, descriptions: Mapping | None = None) -> DatabaseSchema:
    """Read tables, keys and up to ``sample_cap`` sample rows from a SQLite file."""
    path = Path(path)
    descriptions = descriptions or {}
    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    try:
        names = [
            r[0]
            for r in conn.execute(
                "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            )
        ]
        tables = []
        for name in names:
            info = conn.execute(f"PRAGMA table_info({_quote(name)})").fetchall()
            pk = [r[1] for r in sorted(info, key=lambda r: r[5]) if r[5]]
            fks = [
                ForeignKey(r[3], r[2], r[4] or "")
                for r in conn.execute(f"PRAGMA foreign_key_list({_quote(name)})").fetchall()
            ]
            rows = conn.execute(f"SELECT * FROM {_quote(name)} LIMIT {int(sample_cap)}").fetchall()
            cols = []
            for i, r in enumerate(info):
                samples = tuple(str(row[i]) for row in rows if row[i] is not None)
                desc = descriptions.get(f"{name}.{r[1]}", descriptions.get(f"{name.lower()}.{r[1].lower()}", ""))
                cols.append(Column(r[1], r[2] or "", desc, samples))
            tables.append(Table(name, tuple(cols), tuple(pk), tuple(f for f in fks if f.ref_column)))
    finally:
        conn.close()
    return DatabaseSchema(path.stem, tuple(tables))


def load_schema(source) -> DatabaseSchema:
    """Load a schema from a JSON document (path, text or dict) or a SQLite file."""
    if isinstance(source, DatabaseSchema):
        return source
    if isinstance(source, Mapping):
        return schema_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        try:
            head = path.read_bytes()[:16]
        except OSError as exc:
            raise MalformedSchema(f"cannot read schema source {path}: {exc}") from exc
        if head.startswith(b"SQLite format 3"):
            return introspect_sqlite(path)
        text = path.read_text(encoding="utf-8")
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedSchema(f"schema document is not valid JSON: {exc}") from exc
    return schema_from_dict(doc)


# --------------------------------------------------------------------------
# prompt serialization


def _column_line(col: Column, compact: bool) -> str:
    line = f"- {col.name} ({col.data_type or 'UNKNOWN'})"
    if col.description:
        line += f": {col.description}"
    if not compact and col.sample_values:
        line += " | samples: " + ", ".join(col.sample_values)
    return line


def render_table(table: Table, style: str = "full", members: Sequence[str] | None = None) -> str:
    compact = style == "compact"
    if members and len(members) > 1:
        lines = [f"Tables (identical columns): {', '.join(members)}"]
    else:
        lines = [f"Table: {table.name}"]
    if table.primary_key:
        lines.append("Primary key: " + ", ".join(table.primary_key))
    for fk in table.foreign_keys:
        lines.append(f"Foreign key: {fk.column} -> {fk.ref_table}.{fk.ref_column}")
    lines.append("Columns:")
    lines.extend(_column_line(c, compact) for c in table.columns)
    return "\n".join(lines)


def serialize_for_prompt(schema: DatabaseSchema | SchemaSubset, style: str = "full") -> str:
    if style not in ("full", "compact"):
        raise ValueError(f"unknown style {style!r}")
    tables = schema.tables() if isinstance(schema, SchemaSubset) else list(schema.tables)
    return "\n\n".join(render_table(t, style) for t in tables)


# --------------------------------------------------------------------------
# merging and batching


@dataclass(frozen=True)
class MergedEntry:
    table: Table
    members: tuple[str, ...]

    def refs(self) -> list[ColumnRef]:
        return [ref for m in self.members for ref in self.table.refs(m)]


@dataclass(frozen=True)
class SchemaBatch:
    entries: tuple[MergedEntry, ...]
    token_estimate: int

    def member_names(self) -> list[str]:
        return [m for e in self.entries for m in e.members]

    def columns(self) -> frozenset[ColumnRef]:
        return frozenset(ref for e in self.entries for ref in e.refs())

    def render(self) -> str:
        return "\n\n".join(render_table(e.table, "full", e.members) for e in self.entries)


def _merge_key(table: Table) -> tuple:
    return tuple(sorted((normalize_identifier(c.name), c.data_type) for c in table.columns))


def merge_identical_tables(schema: DatabaseSchema) -> list[MergedEntry]:
    groups: dict[tuple, list[Table]] = defaultdict(list)
    order: list[tuple] = []
    for t in schema.tables:
        key = _merge_key(t)
        if key not in groups:
            order.append(key)
        groups[key].append(t)
    return [MergedEntry(groups[k][0], tuple(t.name for t in groups[k])) for k in order]


def entry_tokens(entry: MergedEntry, estimator: TokenEstimator = estimate_tokens) -> int:
    return estimator(render_table(entry.table, "full", entry.members))


def partition_batches(
    entries: Sequence[MergedEntry],
    min_tokens: int = DEFAULT_MIN_BATCH_TOKENS,
    max_tokens: int = DEFAULT_MAX_BATCH_TOKENS,
    estimator: TokenEstimator = estimate_tokens,
    sizes: Sequence[int] | None = None,
) -> list[SchemaBatch]:
    """Greedy first-fit packing of whole entries into token-bounded batches.

    ``min_tokens`` is a packing target only: entries never split, so a batch can
    end up below it. An entry larger than ``max_tokens`` gets a batch to itself.
    """
    if min_tokens > max_tokens:
        raise ValueError("min_tokens must not exceed max_tokens")
    if sizes is None:
        sizes = [entry_tokens(e, estimator) for e in entries]
    bins: list[list[int]] = []
    loads: list[int] = []
    for i, size in enumerate(sizes):
        if size > max_tokens:
            bins.append([i])
            loads.append(size)
            continue
        for b, load in enumerate(loads):
            if load + size <= max_tokens and sizes[bins[b][0]] <= max_tokens:
                bins[b].append(i)
                loads[b] += size
                break
        else:
            bins.append([i])
            loads.append(size)
    return [SchemaBatch(tuple(entries[i] for i in idx), load) for idx, load in zip(bins, loads)]
