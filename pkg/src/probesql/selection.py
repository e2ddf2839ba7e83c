"""Answer selection over sampled episodes: result-keyed plurality vote."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from . import prompts
from .agent import EpisodeResult
from .errors import ProbeSQLError
from .llm import ChatRequest, Gateway
from .sqlexec import FLOAT_PRECISION, canonicalize

logger = logging.getLogger(__name__)

_PICK = re.compile(r"candidate_(\d+)\.sql", re.I)


@dataclass(frozen=True)
class Candidate:
    index: int
    episode: EpisodeResult
    key: str | None

    @property
    def name(self) -> str:
        return f"candidate_{self.index + 1}.sql"


@dataclass
class CandidateBundle:
    candidates: list[Candidate]

    @property
    def n(self) -> int:
        return len(self.candidates)

    @classmethod
    def from_episodes(cls, episodes: Sequence[EpisodeResult], precision: int = FLOAT_PRECISION) -> "CandidateBundle":
        return cls([
            Candidate(i, ep, canonicalize(ep.final_result, precision) if ep.final_result is not None else None)
            for i, ep in enumerate(episodes)
        ])


@dataclass
class Selection:
    index: int
    candidate: Candidate
    unselectable: bool = False
    tie_break: bool = False
    tally: dict[str, int] = field(default_factory=dict)


class Selector(Protocol):
    def select(self, bundle: CandidateBundle) -> Selection: ...


def strategy_of(episode: EpisodeResult) -> str:
    """The last honoured REFINE body, or a placeholder."""
    for rec in reversed(episode.trace):
        if rec.get("kind") == "REFINE" and rec.get("honored", True):
            return rec.get("body", "").strip()
    return "(no strategy recorded)"


def render_candidates(reps: Sequence[Candidate]) -> str:
    blocks = []
    for c in reps:
        blocks.append(
            f"### {c.name}\n**Execution Strategy**:\n{strategy_of(c.episode)}\n"
            f"**Final SQL**:\n```sql\n{c.episode.final_sql}\n```"
        )
    return "\n\n".join(blocks)


def parse_pick(content: str) -> int | None:
    fenced = re.findall(r"```[a-z]*\s*\n?(.*?)```", content, re.S)
    for text in reversed(fenced):
        hits = _PICK.findall(text)
        if hits:
            return int(hits[-1]) - 1
    hits = _PICK.findall(content)
    return int(hits[-1]) - 1 if hits else None


class MajorityVote:
    """Plurality over canonical result keys; a model call breaks ties."""

    def __init__(self, gw: Gateway | None = None, question: str = "", schema_text: str = "", tag: str = "answer_select"):
        self.gw = gw
        self.question = question
        self.schema_text = schema_text
        self.tag = tag

    def select(self, bundle: CandidateBundle) -> Selection:
        if bundle.n < 1:
            raise ValueError("empty bundle")
        voters = [c for c in bundle.candidates if c.key is not None]
        if not voters:
            return Selection(0, bundle.candidates[0], unselectable=True)
        tally = Counter(c.key for c in voters)
        best = max(tally.values())
        tied = [k for k in dict.fromkeys(c.key for c in voters) if tally[k] == best]
        reps = [next(c for c in voters if c.key == k) for k in tied]
        if len(reps) == 1:
            return Selection(reps[0].index, reps[0], tally=dict(tally))
        chosen = self._tie_break(reps)
        return Selection(chosen.index, chosen, tie_break=True, tally=dict(tally))

    def _tie_break(self, reps: list[Candidate]) -> Candidate:
        fallback = min(reps, key=lambda c: c.index)
        if self.gw is None:
            return fallback
        prompt = prompts.render(
            prompts.ANSWER_SELECT, schema=self.schema_text, question=self.question, candidates=render_candidates(reps)
        )
        try:
            content = self.gw.complete(ChatRequest.of(prompt, self.tag, 0.0)).content
        except ProbeSQLError as exc:
            logger.warning("tie-breaker call failed (%s); using lowest index", exc)
            return fallback
        pick = parse_pick(content)
        for c in reps:
            if c.index == pick:
                return c
        logger.warning("tie-breaker pick %r is not a tied representative; using lowest index", pick)
        return fallback


def vote(bundle: CandidateBundle, gw: Gateway | None = None, question: str = "", schema_text: str = "") -> Selection:
    return MajorityVote(gw, question, schema_text).select(bundle)
