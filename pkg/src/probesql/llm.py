"""Chat-completion gateway with pluggable backends, token ledger and trace log.

Backends:

* :class:`ReplayBackend` - consumes a :class:`ReplayScript` entry per call
  (deterministic tests and benchmarks).
* :class:`RuleBackend` - canned responses chosen by tag/content rules, never
  exhausted.
* :class:`HttpBackend` - an OpenAI-compatible ``/chat/completions`` endpoint.

The :class:`Gateway` wraps a backend and records every call. ``Gateway.fork``
returns a child that buffers its records until the parent ``absorb``-s it, so
concurrent work can be committed to the trace in a deterministic order.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .errors import BackendUnavailable, OutputTruncated, ParseFailure, ScriptExhausted
from .schema import estimate_tokens
from .sqltext import split_statements

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
ACTION_TAGS = ("EXPLORE", "REFINE", "SQL", "CONFIRM")
REPROMPT_TEXT = (
    "Your previous output was unparseable. Respond again, following the required "
    "OUTPUT FORMAT exactly."
)


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 4096
    tag: str = "default"

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("messages must be non-empty")
        if msgs[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @classmethod
    def of(cls, prompt: str, tag: str, temperature: float = 0.0, system: str | None = None, **kw) -> "ChatRequest":
        msgs = [Message("system", system)] if system else []
        msgs.append(Message("user", prompt))
        return cls(tuple(msgs), temperature=temperature, tag=tag, **kw)

    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def to_dict(self) -> dict:
        return {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    input_tokens: int
    output_tokens: int
    backend_id: str
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")


class Backend(Protocol):
    backend_id: str

    def generate(self, request: ChatRequest) -> ChatResponse: ...


# --------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ScriptEntry:
    tag: str
    response: str
    contains: str | None = None
    truncated: bool = False

    def matches(self, request: ChatRequest) -> bool:
        if not fnmatch.fnmatchcase(request.tag, self.tag):
            return False
        return self.contains is None or self.contains in request.text()


class ReplayScript:
    """Ordered scripted responses; each entry is consumed at most once."""

    def __init__(self, entries: Iterable[ScriptEntry]):
        self.entries = list(entries)
        self._used = [False] * len(self.entries)
        self._lock = threading.Lock()

    @property
    def cursor(self) -> int:
        return sum(self._used)

    def remaining(self) -> int:
        return len(self.entries) - self.cursor

    def take(self, request: ChatRequest) -> ScriptEntry:
        with self._lock:
            for i, entry in enumerate(self.entries):
                if not self._used[i] and entry.matches(request):
                    self._used[i] = True
                    return entry
        raise ScriptExhausted(f"no scripted response left for tag {request.tag!r}")

    @classmethod
    def from_list(cls, items: Sequence[Mapping]) -> "ReplayScript":
        return cls(
            ScriptEntry(
                tag=str(it["tag"]),
                response=str(it["response"]),
                contains=it.get("contains"),
                truncated=bool(it.get("truncated", False)),
            )
            for it in items
        )

    def to_list(self) -> list[dict]:
        out = []
        for e in self.entries:
            d: dict[str, Any] = {"tag": e.tag, "response": e.response}
            if e.contains is not None:
                d["contains"] = e.contains
            if e.truncated:
                d["truncated"] = True
            out.append(d)
        return out


def load_replay_document(path: str | Path) -> dict:
    """Read a replay file: ``{"entries": [...]}`` or ``{"tasks": {qid: {"entries": [...]}}}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, list):
        doc = {"entries": doc}
    return doc


class ReplayBackend:
    backend_id = "replay"

    def __init__(self, script: ReplayScript | Sequence[Mapping], estimator=estimate_tokens):
        self.script = script if isinstance(script, ReplayScript) else ReplayScript.from_list(script)
        self.estimator = estimator

    def generate(self, request: ChatRequest) -> ChatResponse:
        entry = self.script.take(request)
        return ChatResponse(
            content=entry.response,
            input_tokens=self.estimator(request.text()),
            output_tokens=self.estimator(entry.response),
            backend_id=self.backend_id,
            truncated=entry.truncated,
        )


@dataclass
class Rule:
    tag: str = "*"
    contains: str | None = None
    response: str | Callable[[ChatRequest], str] = ""


class RuleBackend:
    """Canned-rule mock: first matching rule answers; rules are reusable."""

    backend_id = "rules"

    def __init__(self, rules: Sequence[Rule], default: str | None = None, estimator=estimate_tokens):
        self.rules = list(rules)
        self.default = default
        self.estimator = estimator

    def generate(self, request: ChatRequest) -> ChatResponse:
        for rule in self.rules:
            if fnmatch.fnmatchcase(request.tag, rule.tag) and (
                rule.contains is None or rule.contains in request.text()
            ):
                text = rule.response(request) if callable(rule.response) else rule.response
                break
        else:
            if self.default is None:
                raise ScriptExhausted(f"no rule matches tag {request.tag!r}")
            text = self.default
        return ChatResponse(text, self.estimator(request.text()), self.estimator(text), self.backend_id)


# --------------------------------------------------------------------------
# live HTTP


class HttpBackend:
    """OpenAI-compatible chat-completions client with bounded retries."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        attempts: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=timeout)
        self.backend_id = f"http:{model}"

    @classmethod
    def from_env(cls, **kw) -> "HttpBackend":
        base = os.environ.get("APEX_BASE_URL")
        model = os.environ.get("APEX_MODEL")
        if not base or not model:
            raise BackendUnavailable("APEX_BASE_URL and APEX_MODEL must be set for the live backend")
        return cls(base, model, os.environ.get("APEX_API_KEY"), **kw)

    def generate(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_error: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                    continue
                resp.raise_for_status()
                data = resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                last_error = exc
                continue
            choice = data["choices"][0]
            content = choice.get("message", {}).get("content") or ""
            usage = data.get("usage") or {}
            return ChatResponse(
                content=content,
                input_tokens=int(usage.get("prompt_tokens", estimate_tokens(request.text()))),
                output_tokens=int(usage.get("completion_tokens", estimate_tokens(content))),
                backend_id=self.backend_id,
                truncated=choice.get("finish_reason") == "length",
            )
        raise BackendUnavailable(f"chat endpoint failed after {self.attempts} attempts: {last_error}")


# --------------------------------------------------------------------------
# ledger and trace


@dataclass
class TagUsage:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


class TokenLedger:
    def __init__(self) -> None:
        self.tags: dict[str, TagUsage] = {}
        self._lock = threading.Lock()

    def record(self, tag: str, input_tokens: int, output_tokens: int, calls: int = 1) -> None:
        with self._lock:
            usage = self.tags.setdefault(tag, TagUsage())
            usage.calls += calls
            usage.input_tokens += input_tokens
            usage.output_tokens += output_tokens

    def __getitem__(self, tag: str) -> TagUsage:
        return self.tags.get(tag, TagUsage())

    @property
    def total(self) -> int:
        return sum(u.total for u in self.tags.values())

    def merge(self, other: "TokenLedger") -> None:
        for tag, u in sorted(other.tags.items()):
            self.record(tag, u.input_tokens, u.output_tokens, u.calls)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "by_tag": {
                t: {"calls": u.calls, "input_tokens": u.input_tokens, "output_tokens": u.output_tokens}
                for t, u in sorted(self.tags.items())
            },
        }


class LogicalClock:
    """Deterministic stand-in for wall time: 0.0, 1.0, 2.0, ..."""

    def __init__(self) -> None:
        self._n = 0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            value = float(self._n)
            self._n += 1
            return value


class TraceLog:
    """Committed call records, optionally mirrored to an append-only JSONL file."""

    def __init__(self, path: str | Path | None = None, clock: Callable[[], float] = time.time):
        self.path = Path(path) if path else None
        self.clock = clock
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def commit(self, record: dict) -> None:
        with self._lock:
            rec = {"seq": len(self.records), **record, "timestamp": self.clock()}
            self.records.append(rec)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


class Gateway:
    def __init__(
        self,
        backend: Backend,
        trace: TraceLog | None = None,
        ledger: TokenLedger | None = None,
        parse_retries: int = 2,
    ):
        self.backend = backend
        self.trace = trace if trace is not None else TraceLog()
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.parse_retries = parse_retries
        self._parent: Gateway | None = None
        self._buffer: list[dict] = []
        self._lock = threading.Lock()

    def fork(self) -> "Gateway":
        child = Gateway(self.backend, trace=self.trace, ledger=TokenLedger(), parse_retries=self.parse_retries)
        child._parent = self
        return child

    def absorb(self, child: "Gateway") -> None:
        for rec in child._buffer:
            self._record(rec)
        child._buffer = []
        self.ledger.merge(child.ledger)

    def _record(self, rec: dict) -> None:
        if self._parent is None:
            self.trace.commit(rec)
        else:
            with self._lock:
                self._buffer.append(rec)

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.backend.generate(request)
        self._record(
            {
                "tag": request.tag,
                "request": request.to_dict(),
                "response": {"content": response.content, "backend_id": response.backend_id,
                             "truncated": response.truncated},
                "input_tokens": response.input_tokens,
                "output_tokens": response.output_tokens,
            }
        )
        self.ledger.record(request.tag, response.input_tokens, response.output_tokens)
        if response.truncated:
            raise OutputTruncated(f"response for {request.tag!r} hit max_output_tokens", response)
        return response

    def ask(self, request: ChatRequest, parser: Callable[[str], Any], retries: int | None = None):
        """Call and parse, re-prompting on ParseFailure. Returns None when all attempts fail."""
        retries = self.parse_retries if retries is None else retries
        messages = list(request.messages)
        for attempt in range(retries + 1):
            req = ChatRequest(tuple(messages), request.temperature, request.max_output_tokens, request.tag)
            content = self.complete(req).content
            try:
                return parser(content)
            except ParseFailure:
                logger.debug("unparseable %s output (attempt %d)", request.tag, attempt + 1)
                messages += [Message("assistant", content), Message("user", REPROMPT_TEXT)]
        return None


# --------------------------------------------------------------------------
# structured output extraction

_FENCE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n?(.*?)```", re.S)
_TAG = re.compile(r"\[([A-Z][A-Z_]*)\]")


def _fenced(content: str) -> list[tuple[str, str]]:
    return [(m.group(1).lower(), m.group(2)) for m in _FENCE.finditer(content)]


def parse_json_object(content: str) -> dict:
    for _, body in _fenced(content):
        try:
            value = json.loads(body)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", content):
        try:
            value, _ = decoder.raw_decode(content, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    raise ParseFailure("no JSON object found")


def parse_sql_blocks(content: str) -> list[str]:
    blocks = [body for lang, body in _fenced(content) if lang in ("sql", "sqlite", "")]
    statements = [s for body in blocks for s in split_statements(body)]
    if not statements:
        raise ParseFailure("no fenced SQL statements found")
    return statements


def parse_action(content: str) -> tuple[str, str]:
    m = _TAG.search(content)
    if m is None or m.group(1) not in ACTION_TAGS:
        raise ParseFailure("output does not start with an action tag")
    return m.group(1), content[m.end():].strip()


_PARSERS = {
    "json_object": parse_json_object,
    "sql_blocks": parse_sql_blocks,
    "action_tagged": parse_action,
}


def extract_structured(content: str, shape: str):
    try:
        parser = _PARSERS[shape]
    except KeyError:
        raise ValueError(f"unknown shape {shape!r}") from None
    return parser(content)
