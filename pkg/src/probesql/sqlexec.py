"""SQL execution with read-only safety, result summaries and result comparison."""

from __future__ import annotations

import hashlib
import logging
import math
import sqlite3
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .sqltext import leading_keyword, split_statements

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_FETCH_LIMIT = 10_000
SUMMARY_THRESHOLD = 30
HEAD_ROWS = 10
FLOAT_PRECISION = 6

QUERY_KEYWORDS = {"SELECT", "WITH", "VALUES"}
ERROR_KINDS = ("syntax", "missing_object", "type_error", "timeout", "write_rejected", "other")
EMPTY_KEY = "<empty-result>"
_NULL = "\x00NULL"


# --------------------------------------------------------------------------
# dialects


class Dialect:
    name = "generic"

    def quote(self, ident: str) -> str:
        return '"' + ident.replace('"', '""') + '"'

    def limit(self, sql: str, n: int) -> str:
        return f"{sql.rstrip().rstrip(';')} LIMIT {int(n)}"

    def json_path(self, column: str, key: str) -> str:
        raise NotImplementedError


class SQLiteDialect(Dialect):
    name = "sqlite"

    def json_path(self, column: str, key: str) -> str:
        return f"json_extract({self.quote(column)}, '$.{key}')"


DIALECTS: dict[str, Dialect] = {"sqlite": SQLiteDialect()}


def get_dialect(name: str) -> Dialect:
    try:
        return DIALECTS[name]
    except KeyError:
        raise ValueError(f"unsupported dialect {name!r}; available: {sorted(DIALECTS)}") from None


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[tuple[str, str], ...]
    rows: tuple[tuple, ...]
    truncated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(tuple(c) for c in self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        width = len(self.columns)
        for r in self.rows:
            if len(r) != width:
                raise ValueError("row width does not match column count")

    @classmethod
    def from_rows(cls, names: Sequence[str], rows: Sequence[Sequence], truncated: bool = False) -> "ResultSet":
        rows = [tuple(r) for r in rows]
        cols = tuple((n, infer_type([r[i] for r in rows])) for i, n in enumerate(names))
        return cls(cols, tuple(rows), truncated)

    @property
    def column_names(self) -> list[str]:
        return [c[0] for c in self.columns]

    @property
    def row_count(self) -> int:
        return len(self.rows)

    def render(self, max_rows: int | None = None) -> str:
        return render_table(self.column_names, self.rows[:max_rows] if max_rows else self.rows)


@dataclass(frozen=True)
class ColumnStats:
    name: str
    inferred_type: str
    distinct_count: int
    null_ratio: float
    min_value: Any = None
    max_value: Any = None


@dataclass(frozen=True)
class ResultSummary:
    columns: tuple[tuple[str, str], ...]
    head_rows: tuple[tuple, ...]
    row_count: int
    stats: tuple[ColumnStats, ...]
    truncated: bool = False

    def render(self) -> str:
        lines = [
            f"[{self.row_count} rows{' (fetch limit reached)' if self.truncated else ''}; "
            f"showing first {len(self.head_rows)}]",
            render_table([c[0] for c in self.columns], self.head_rows),
            "Column statistics:",
        ]
        for s in self.stats:
            line = (f"- {s.name}: type={s.inferred_type}, distinct={s.distinct_count}, "
                    f"null_ratio={s.null_ratio:.4f}")
            if s.min_value is not None:
                line += f", min={s.min_value!r}, max={s.max_value!r}"
            lines.append(line)
        return "\n".join(lines)


@dataclass(frozen=True)
class ExecError:
    kind: str
    message: str

    def __post_init__(self) -> None:
        if self.kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {self.kind!r}")
        if not self.message:
            raise ValueError("error message must be non-empty")

    def render(self) -> str:
        return f"ERROR ({self.kind}): {self.message}"


def render_table(names: Sequence[str], rows: Sequence[Sequence]) -> str:
    out = [" | ".join(str(n) for n in names)]
    out += [" | ".join("NULL" if v is None else str(v) for v in r) for r in rows]
    return "\n".join(out)


def render_outcome(outcome: "ResultSet | ResultSummary | ExecError") -> str:
    if isinstance(outcome, ResultSet):
        head = f"[{outcome.row_count} rows]"
        return head + "\n" + outcome.render()
    return outcome.render()


def _value_type(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool) or isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "real"
    if isinstance(v, (bytes, bytearray, memoryview)):
        return "blob"
    return "text"


def infer_type(values: Sequence) -> str:
    kinds = {_value_type(v) for v in values} - {"null"}
    if not kinds:
        return "null"
    if kinds == {"integer", "real"}:
        return "real"
    if len(kinds) == 1:
        return kinds.pop()
    return "mixed"


def _orderable(values: list) -> bool:
    if not values:
        return False
    kinds = {_value_type(v) for v in values}
    return kinds <= {"integer", "real"} or kinds == {"text"}


def column_stats(name: str, values: Sequence) -> ColumnStats:
    non_null = [v for v in values if v is not None]
    n = len(values)
    lo = hi = None
    if _orderable(non_null):
        lo, hi = min(non_null), max(non_null)
    return ColumnStats(
        name=name,
        inferred_type=infer_type(values),
        distinct_count=len(set(non_null)),
        null_ratio=(n - len(non_null)) / n if n else 0.0,
        min_value=lo,
        max_value=hi,
    )


def summarize(result: ResultSet, threshold: int = SUMMARY_THRESHOLD, head: int = HEAD_ROWS):
    """Pass small results through; compress larger ones into head rows plus statistics."""
    if result.row_count <= threshold:
        return result
    stats = tuple(
        column_stats(name, [r[i] for r in result.rows]) for i, (name, _) in enumerate(result.columns)
    )
    return ResultSummary(result.columns, result.rows[:head], result.row_count, stats, result.truncated)


# --------------------------------------------------------------------------
# execution


class Database:
    """Handle on a SQLite file; every execution opens its own connection."""

    def __init__(self, path: str | Path, dialect: str = "sqlite"):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(self.path)
        self.dialect = get_dialect(dialect)

    def connect(self, writable: bool = False) -> sqlite3.Connection:
        mode = "rw" if writable else "ro"
        conn = sqlite3.connect(f"file:{self.path}?mode={mode}", uri=True, check_same_thread=False)
        return conn

    def file_hash(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()

    def __repr__(self) -> str:
        return f"Database({str(self.path)!r})"


_DENY = {
    getattr(sqlite3, name)
    for name in (
        "SQLITE_INSERT", "SQLITE_UPDATE", "SQLITE_DELETE", "SQLITE_CREATE_INDEX", "SQLITE_CREATE_TABLE",
        "SQLITE_CREATE_TEMP_INDEX", "SQLITE_CREATE_TEMP_TABLE", "SQLITE_CREATE_TEMP_TRIGGER",
        "SQLITE_CREATE_TEMP_VIEW", "SQLITE_CREATE_TRIGGER", "SQLITE_CREATE_VIEW", "SQLITE_DROP_INDEX",
        "SQLITE_DROP_TABLE", "SQLITE_DROP_TEMP_INDEX", "SQLITE_DROP_TEMP_TABLE", "SQLITE_DROP_TEMP_TRIGGER",
        "SQLITE_DROP_TEMP_VIEW", "SQLITE_DROP_TRIGGER", "SQLITE_DROP_VIEW", "SQLITE_PRAGMA",
        "SQLITE_TRANSACTION", "SQLITE_ATTACH", "SQLITE_DETACH", "SQLITE_ALTER_TABLE", "SQLITE_REINDEX",
        "SQLITE_ANALYZE", "SQLITE_CREATE_VTABLE", "SQLITE_DROP_VTABLE", "SQLITE_SAVEPOINT",
    )
    if hasattr(sqlite3, name)
}


def _authorizer(action, *_):
    return sqlite3.SQLITE_DENY if action in _DENY else sqlite3.SQLITE_OK


def check_query_only(sql: str) -> ExecError | None:
    statements = split_statements(sql)
    if len(statements) != 1:
        return ExecError("write_rejected", f"expected exactly one query statement, got {len(statements)}")
    keyword = leading_keyword(statements[0])
    if keyword not in QUERY_KEYWORDS:
        return ExecError("write_rejected", f"only queries are allowed here, got {keyword or 'unknown'} statement")
    return None


def classify_error(message: str) -> str:
    msg = message.lower()
    if "interrupted" in msg:
        return "timeout"
    if "not authorized" in msg or "readonly" in msg or "read-only" in msg:
        return "write_rejected"
    if "syntax error" in msg or "incomplete input" in msg or "unrecognized token" in msg:
        return "syntax"
    if "no such" in msg or "ambiguous column" in msg:
        return "missing_object"
    if "mismatch" in msg or "type" in msg or "malformed json" in msg:
        return "type_error"
    return "other"


def execute(
    sql: str,
    db: Database | str | Path,
    mode: str = "read_only",
    timeout: float = DEFAULT_TIMEOUT,
    fetch_limit: int = DEFAULT_FETCH_LIMIT,
    allow_writes: bool = False,
) -> ResultSet | ExecError:
    """Run one statement. Failures come back as :class:`ExecError` values.

    ``read_only`` always restricts to a single query. ``final`` does the same
    unless ``allow_writes`` is set.
    """
    if mode not in ("read_only", "final"):
        raise ValueError(f"unknown mode {mode!r}")
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if not isinstance(db, Database):
        db = Database(db)
    guarded = mode == "read_only" or not allow_writes
    if guarded:
        rejected = check_query_only(sql)
        if rejected is not None:
            return rejected
    statement = split_statements(sql)[0] if guarded else sql
    conn = db.connect(writable=not guarded)
    deadline = time.monotonic() + timeout
    try:
        if guarded:
            conn.set_authorizer(_authorizer)
        conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 1000)
        cur = conn.execute(statement)
        names = [d[0] for d in cur.description] if cur.description else []
        rows = cur.fetchmany(fetch_limit + 1)
        truncated = len(rows) > fetch_limit
        if not guarded:
            conn.commit()
        return ResultSet.from_rows(names, rows[:fetch_limit], truncated)
    except sqlite3.Warning as exc:
        return ExecError("write_rejected", str(exc) or "multiple statements rejected")
    except sqlite3.Error as exc:
        message = str(exc) or type(exc).__name__
        kind = classify_error(message)
        if kind == "timeout":
            message = f"query exceeded {timeout:g}s timeout"
        return ExecError(kind, message)
    finally:
        conn.close()


# --------------------------------------------------------------------------
# canonical keys and comparison


def normalize_value(v, precision: int = FLOAT_PRECISION) -> str:
    if v is None:
        return _NULL
    if isinstance(v, bool):
        v = int(v)
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return repr(v)
        r = round(v, precision)
        if r == int(r) and abs(r) < 2**53:
            return str(int(r))
        return repr(r)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (bytes, bytearray, memoryview)):
        return "0x" + bytes(v).hex()
    return str(v).strip()


def _row_encoding(row: Sequence, precision: int) -> str:
    return "\x1f".join(sorted(normalize_value(v, precision) for v in row))


def canonical_text(result: ResultSet, precision: int = FLOAT_PRECISION) -> str:
    if not result.rows:
        return EMPTY_KEY
    return "\x1e".join(sorted(_row_encoding(r, precision) for r in result.rows))


def canonicalize(result: ResultSet, float_precision: int = FLOAT_PRECISION) -> str:
    text = canonical_text(result, float_precision)
    if text == EMPTY_KEY:
        return EMPTY_KEY
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def column_signature(result: ResultSet, index: int, precision: int = FLOAT_PRECISION) -> tuple:
    return tuple(sorted(normalize_value(r[index], precision) for r in result.rows))


def compare(pred: ResultSet, gold: ResultSet, mode: str = "strict", precision: int = FLOAT_PRECISION) -> bool:
    if mode == "strict":
        if canonicalize(pred, precision) != canonicalize(gold, precision):
            return False
        p = Counter(column_signature(pred, i, precision) for i in range(len(pred.columns)))
        g = Counter(column_signature(gold, i, precision) for i in range(len(gold.columns)))
        return p == g
    if mode == "relaxed":
        if pred.row_count != gold.row_count:
            return False
        pred_sigs = [column_signature(pred, i, precision) for i in range(len(pred.columns))]
        used = [False] * len(pred_sigs)
        for j in range(len(gold.columns)):
            sig = column_signature(gold, j, precision)
            for i, psig in enumerate(pred_sigs):
                if not used[i] and psig == sig:
                    used[i] = True
                    break
            else:
                return False
        return True
    raise ValueError(f"unknown comparison mode {mode!r}")
