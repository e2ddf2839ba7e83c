"""Small test doubles shared by several test modules."""

from __future__ import annotations

from typing import Callable

from probesql.llm import ChatRequest, ChatResponse
from probesql.schema import estimate_tokens


class ScriptedBackend:
    """Answers call ``i`` with ``policy(i, request)``; keeps every request it saw.

    The policy returns either a string or ``(content, truncated)``.
    """

    backend_id = "scripted"

    def __init__(self, policy: Callable[[int, ChatRequest], object]):
        self.policy = policy
        self.requests: list[ChatRequest] = []

    def generate(self, request: ChatRequest) -> ChatResponse:
        i = len(self.requests)
        self.requests.append(request)
        out = self.policy(i, request)
        content, truncated = (out, False) if isinstance(out, str) else out
        return ChatResponse(content, estimate_tokens(request.text()), estimate_tokens(content), self.backend_id,
                            truncated)


def sql(kind: str, *statements: str) -> str:
    body = ";\n".join(statements)
    return f"[{kind}]\n```sql\n{body}\n```"
