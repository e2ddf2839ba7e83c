"""Dataset adapters. Every loader yields :class:`TaskRecord` values.

* ``native``: JSON lines, one task per line (see :func:`load_native`).
* ``bird``: a question file (``dev.json`` style) next to a database folder.
* ``spider``: one folder per task with ``task.json`` and knowledge markdown.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .schema import ColumnRef

logger = logging.getLogger(__name__)

DEFAULT_MODE = {"bird": "strict", "spider": "relaxed", "native": "strict"}


@dataclass
class TaskRecord:
    question_id: str
    question: str
    db_path: str
    evidence: str = ""
    knowledge: str = ""
    knowledge_name: str = "knowledge.md"
    gold_sql: str | None = None
    gold_columns: list[str] | None = None
    schema_path: str | None = None
    mode: str | None = None
    errors: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.question or not self.question.strip():
            raise ConfigError(f"task {self.question_id}: empty question")

    @property
    def db_exists(self) -> bool:
        return Path(self.db_path).is_file()

    def gold_refs(self) -> set[ColumnRef] | None:
        if self.gold_columns is None:
            return None
        return {ColumnRef.parse(c) for c in self.gold_columns}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("errors")
        return d


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q).resolve())


def load_native(path: str | Path) -> list[TaskRecord]:
    """Lines of ``{question_id, question, db_path, evidence?, knowledge?, gold_sql?, gold_columns?}``."""
    path = Path(path)
    base = path.parent
    tasks = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from exc
        tasks.append(TaskRecord(
            question_id=str(doc["question_id"]),
            question=doc["question"],
            db_path=_resolve(base, doc["db_path"]),
            evidence=doc.get("evidence", ""),
            knowledge=doc.get("knowledge", ""),
            gold_sql=doc.get("gold_sql"),
            gold_columns=doc.get("gold_columns"),
            schema_path=_resolve(base, doc.get("schema_path")),
            mode=doc.get("mode"),
        ))
    return tasks


def load_bird(path: str | Path) -> list[TaskRecord]:
    """BIRD layout: ``dev.json`` plus ``dev_databases/<db_id>/<db_id>.sqlite``."""
    path = Path(path)
    if path.is_dir():
        path = next((p for p in (path / "dev.json", path / "train.json") if p.exists()), path / "dev.json")
    items = json.loads(path.read_text(encoding="utf-8"))
    roots = [path.parent / d for d in ("dev_databases", "train_databases", "databases")]
    root = next((r for r in roots if r.is_dir()), roots[0])
    tasks = []
    for i, item in enumerate(items):
        db_id = item["db_id"]
        tasks.append(TaskRecord(
            question_id=str(item.get("question_id", i)),
            question=item["question"],
            db_path=str(root / db_id / f"{db_id}.sqlite"),
            evidence=item.get("evidence", ""),
            gold_sql=item.get("SQL") or item.get("query"),
            mode="strict",
        ))
    return tasks


def load_spider(path: str | Path) -> list[TaskRecord]:
    """Spider-2.0-style folders: ``<root>/<task_id>/task.json`` plus ``*.md`` knowledge files."""
    root = Path(path)
    tasks = []
    for folder in sorted(p for p in root.iterdir() if (p / "task.json").is_file()):
        doc = json.loads((folder / "task.json").read_text(encoding="utf-8"))
        docs = sorted(folder.glob("*.md"))
        if len(docs) > 1:
            logger.info("task %s has %d knowledge files; concatenating", folder.name, len(docs))
        knowledge = "\n\n".join(f"<!-- {d.name} -->\n{d.read_text(encoding='utf-8')}" if len(docs) > 1
                                else d.read_text(encoding="utf-8") for d in docs)
        tasks.append(TaskRecord(
            question_id=str(doc.get("instance_id", folder.name)),
            question=doc.get("instruction") or doc["question"],
            db_path=_resolve(folder, doc["db_path"]),
            knowledge=knowledge,
            knowledge_name=docs[0].name if len(docs) == 1 else "knowledge.md",
            gold_sql=doc.get("gold_sql"),
            gold_columns=doc.get("gold_columns"),
            schema_path=_resolve(folder, doc.get("schema_path")),
            mode="relaxed",
        ))
    return tasks


LOADERS = {"native": load_native, "bird": load_bird, "spider": load_spider}


def detect_kind(path: str | Path) -> str:
    p = Path(path)
    if p.suffix == ".jsonl":
        return "native"
    if p.is_dir() and any((c / "task.json").is_file() for c in p.iterdir()):
        return "spider"
    return "bird"


def load_tasks(path: str | Path, kind: str | None = None) -> tuple[str, list[TaskRecord]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset not found: {p}")
    kind = kind or detect_kind(p)
    if kind not in LOADERS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    try:
        return kind, LOADERS[kind](p)
    except (KeyError, OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load {kind} dataset {p}: {exc}") from exc
