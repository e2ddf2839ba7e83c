"""Lexical helpers for SQL text: statement splitting and comment stripping."""

from __future__ import annotations


def _scan(sql: str):
    """Yield (index, char, state) where state is None outside literals/comments."""
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch in ("'", '"', "`"):
            j = i + 1
            while j < n:
                if sql[j] == ch:
                    if j + 1 < n and sql[j + 1] == ch:
                        j += 2
                        continue
                    break
                j += 1
            yield i, sql[i : j + 1], "quote"
            i = j + 1
        elif ch == "[":
            j = sql.find("]", i + 1)
            j = n - 1 if j < 0 else j
            yield i, sql[i : j + 1], "quote"
            i = j + 1
        elif sql.startswith("--", i):
            j = sql.find("\n", i)
            j = n if j < 0 else j
            yield i, sql[i:j], "comment"
            i = j
        elif sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            j = n if j < 0 else j + 2
            yield i, sql[i:j], "comment"
            i = j
        else:
            yield i, ch, None
            i += 1


def split_statements(sql: str) -> list[str]:
    """Split on top-level semicolons, keeping comments with the statement that follows.

    Segments consisting only of comments/whitespace are dropped.
    """
    parts: list[str] = []
    buf: list[str] = []
    for _, tok, state in _scan(sql):
        if state is None and tok == ";":
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(tok)
    parts.append("".join(buf))
    out = []
    for p in parts:
        p = p.strip()
        if p and strip_comments(p).strip():
            out.append(p)
    return out


def strip_comments(sql: str) -> str:
    return "".join(tok for _, tok, state in _scan(sql) if state != "comment")


def code_only(sql: str) -> str:
    """SQL with comments removed and quoted literals/identifiers blanked out."""
    out = []
    for _, tok, state in _scan(sql):
        if state == "comment":
            out.append(" ")
        elif state == "quote":
            out.append(" _lit_ ")
        else:
            out.append(tok)
    return "".join(out)


def leading_keyword(sql: str) -> str:
    body = strip_comments(sql).lstrip(" \t\r\n(")
    word = []
    for ch in body:
        if ch.isalpha() or ch == "_":
            word.append(ch)
        else:
            break
    return "".join(word).upper()
