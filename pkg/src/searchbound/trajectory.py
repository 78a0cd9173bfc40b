"""Trajectory data model and the tagged transcript grammar.

A transcript is a flat sequence of ``<think>``, ``<search>``, ``<information>``
and ``<answer>`` spans. Canonical rendering puts nothing between spans, so
``parse_transcript(render_transcript(t)) == t`` for every valid trajectory.

Search content is either a structured ``entity|relation`` query produced by the
simulator, or an opaque string (audit mode). Information following a
structured search is a ``;``-separated list of ``subject|relation|object``
facts.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .environment import EvidenceItem, Fact, Query


class StepKind(str, enum.Enum):
    THINK = "think"
    SEARCH = "search"
    INFORMATION = "information"
    ANSWER = "answer"


class Mode(str, enum.Enum):
    SEARCH_ENABLED = "search_enabled"
    SEARCH_DISABLED = "search_disabled"


StepContent = Union[str, Query, tuple[EvidenceItem, ...]]


@dataclass(frozen=True)
class Step:
    kind: StepKind
    content: StepContent

    @property
    def is_structured(self) -> bool:
        return not isinstance(self.content, str)


@dataclass(frozen=True)
class Trajectory:
    question_id: str
    mode: Mode
    steps: tuple[Step, ...]

    @property
    def predicted_answer(self) -> Optional[str]:
        if self.steps and self.steps[-1].kind is StepKind.ANSWER:
            return str(self.steps[-1].content).strip()
        return None

    def search_steps(self) -> list[Step]:
        return [s for s in self.steps if s.kind is StepKind.SEARCH]

    def validate(self, cap: Optional[int] = None) -> None:
        """Raise TrajectoryError if any structural invariant fails."""
        n_search = 0
        for i, step in enumerate(self.steps):
            _check_content(step)
            if step.kind is StepKind.ANSWER and i != len(self.steps) - 1:
                raise TrajectoryError(f"answer at step {i} is not terminal")
            if step.kind is StepKind.SEARCH:
                n_search += 1
                if self.mode is Mode.SEARCH_DISABLED:
                    raise TrajectoryError("search step in a search-disabled trajectory")
                nxt = self.steps[i + 1] if i + 1 < len(self.steps) else None
                if nxt is None or nxt.kind is not StepKind.INFORMATION:
                    raise TrajectoryError(f"search at step {i} is not followed by information")
            if step.kind is StepKind.INFORMATION:
                prev = self.steps[i - 1] if i > 0 else None
                if prev is None or prev.kind is not StepKind.SEARCH:
                    raise TrajectoryError(f"information at step {i} does not follow a search")
                if prev.is_structured != step.is_structured:
                    raise TrajectoryError(f"information at step {i} and its search mix structured and raw content")
                if step.is_structured:
                    for item in step.content:  # type: ignore[union-attr]
                        if item.source_query != prev.content or item.is_gold != (item.fact.query == prev.content):
                            raise TrajectoryError(f"evidence at step {i} is inconsistent with its query")
        if cap is not None and n_search > cap:
            raise TrajectoryError(f"{n_search} searches exceed the cap of {cap}")


def search_count(trajectory: Trajectory) -> int:
    return sum(1 for s in trajectory.steps if s.kind is StepKind.SEARCH)


class TrajectoryError(ValueError):
    pass


def _check_content(step: Step) -> None:
    c = step.content
    if step.kind in (StepKind.THINK, StepKind.ANSWER):
        if not isinstance(c, str):
            raise TrajectoryError(f"{step.kind.value} content must be a string")
        if step.kind is StepKind.ANSWER and not c.strip():
            raise TrajectoryError("answer content is empty")
        _check_text(c)
    elif step.kind is StepKind.SEARCH:
        if isinstance(c, str):
            if "|" in c:
                raise TrajectoryError("raw search content may not contain '|'")
            _check_text(c)
        else:
            if len(c) != 2:
                raise TrajectoryError("structured search content must be (entity, relation)")
            for part in c:
                _check_atom(part)
    else:
        if isinstance(c, str):
            if "|" in c:
                raise TrajectoryError("raw information content may not contain '|'")
            _check_text(c)
        else:
            for item in c:
                for part in (item.fact.subject, item.fact.relation, item.fact.object):
                    _check_atom(part)


def _check_text(s: str) -> None:
    if "<" in s or ">" in s:
        raise TrajectoryError(f"content may not contain angle brackets: {s!r}")


def _check_atom(s: object) -> None:
    if not isinstance(s, str) or not s or any(ch in s for ch in "<>|;"):
        raise TrajectoryError(f"invalid structured token {s!r}")


# --------------------------------------------------------------------------
# Rendering


def render_step(step: Step) -> str:
    tag = step.kind.value
    c = step.content
    if step.kind is StepKind.SEARCH and not isinstance(c, str):
        body = f"{c[0]}|{c[1]}"
    elif step.kind is StepKind.INFORMATION and not isinstance(c, str):
        body = ";".join(f"{e.fact.subject}|{e.fact.relation}|{e.fact.object}" for e in c)
    else:
        body = c  # type: ignore[assignment]
    return f"<{tag}>{body}</{tag}>"


def render_transcript(trajectory: Trajectory) -> str:
    return "".join(render_step(s) for s in trajectory.steps)


# --------------------------------------------------------------------------
# Parsing


class TranscriptError(ValueError):
    """Base class for parse failures; ``offset`` is a UTF-8 byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnknownTagError(TranscriptError):
    pass


class StrayTextError(TranscriptError):
    pass


class UnclosedTagError(TranscriptError):
    pass


class NestedTagError(TranscriptError):
    pass


class InterleavedTagError(TranscriptError):
    pass


class AnswerNotTerminalError(TranscriptError):
    pass


class MissingInformationError(TranscriptError):
    pass


class OrphanInformationError(TranscriptError):
    pass


class SearchInDisabledModeError(TranscriptError):
    pass


class EmptyAnswerError(TranscriptError):
    pass


class SearchCapError(TranscriptError):
    pass


class InvalidTrajectoryError(TranscriptError):
    pass


_TAGS = {k.value: k for k in StepKind}
_TAG_RE = re.compile(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)>")


def _scan(text: str) -> Iterator[tuple[StepKind, str, int]]:
    """Yield (kind, body, char offset of the opening tag)."""
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        m = _TAG_RE.match(text, i)
        if text[i] != "<":
            raise StrayTextError("text outside of any tag", _b(text, i))
        if m is None:
            raise UnknownTagError("malformed tag", _b(text, i))
        closing, name = m.group(1), m.group(2)
        if name not in _TAGS:
            raise UnknownTagError(f"unknown tag <{closing}{name}>", _b(text, i))
        if closing:
            raise StrayTextError(f"closing tag </{name}> without an opening tag", _b(text, i))
        body_start = m.end()
        j = text.find("<", body_start)
        if j < 0:
            raise UnclosedTagError(f"<{name}> is never closed", _b(text, i))
        inner = _TAG_RE.match(text, j)
        if inner is None or inner.group(2) not in _TAGS:
            raise UnknownTagError("unexpected '<' inside a span", _b(text, j))
        if inner.group(2) == name and not inner.group(1):
            raise NestedTagError(f"<{name}> nested inside <{name}>", _b(text, j))
        if inner.group(2) != name or not inner.group(1):
            raise InterleavedTagError(f"<{name}> interrupted by <{inner.group(1)}{inner.group(2)}>", _b(text, j))
        if ">" in text[body_start:j]:
            raise StrayTextError("stray '>' inside a span", _b(text, text.index(">", body_start)))
        yield _TAGS[name], text[body_start:j], i
        i = inner.end()


def _b(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def _parse_query(body: str) -> Union[str, Query]:
    parts = body.split("|")
    if len(parts) == 2 and all(parts) and ";" not in body:
        return (parts[0], parts[1])
    return body


def _parse_evidence(body: str, query: Query) -> Optional[tuple[EvidenceItem, ...]]:
    if body == "":
        return ()
    items = []
    for chunk in body.split(";"):
        parts = chunk.split("|")
        if len(parts) != 3 or not all(parts):
            return None
        fact = Fact(*parts)
        items.append(EvidenceItem(fact, fact.query == query, query))
    return tuple(items)


def parse_transcript(
    text: str,
    question_id: str = "",
    mode: Mode = Mode.SEARCH_ENABLED,
    cap: Optional[int] = None,
) -> Trajectory:
    """Strictly parse a complete transcript.

    Whitespace between spans is tolerated; anything else outside a span, an
    unknown tag, a nested or interleaved span, an answer that is not last, or a
    search without its information block raises a TranscriptError subclass.
    """
    raw = list(_scan(text))
    steps: list[Step] = []
    n_search = 0
    for idx, (kind, body, at) in enumerate(raw):
        off = _b(text, at)
        if steps and steps[-1].kind is StepKind.ANSWER:
            raise AnswerNotTerminalError("content after the answer span", off)
        if kind is StepKind.SEARCH:
            if mode is Mode.SEARCH_DISABLED:
                raise SearchInDisabledModeError("search span in a search-disabled transcript", off)
            nxt = raw[idx + 1][0] if idx + 1 < len(raw) else None
            if nxt is not StepKind.INFORMATION:
                raise MissingInformationError("search span not followed by information", off)
            if "|" in body and not isinstance(_parse_query(body), tuple):
                raise StrayTextError("malformed structured search query", off)
            n_search += 1
            if cap is not None and n_search > cap:
                raise SearchCapError(f"more than {cap} searches", off)
            steps.append(Step(kind, _parse_query(body)))
        elif kind is StepKind.INFORMATION:
            if not steps or steps[-1].kind is not StepKind.SEARCH:
                raise OrphanInformationError("information span without a preceding search", off)
            q = steps[-1].content
            if isinstance(q, tuple):
                ev = _parse_evidence(body, q)
                if ev is None:
                    raise StrayTextError("malformed evidence after a structured search", off)
                steps.append(Step(kind, ev))
            else:
                if "|" in body:
                    raise StrayTextError("structured evidence after a raw search", off)
                steps.append(Step(kind, body))
        elif kind is StepKind.ANSWER:
            if not body.strip():
                raise EmptyAnswerError("empty answer span", off)
            steps.append(Step(kind, body))
        else:
            steps.append(Step(kind, body))
    traj = Trajectory(question_id, mode, tuple(steps))
    try:
        traj.validate(cap)
    except TrajectoryError as exc:
        raise InvalidTrajectoryError(str(exc), len(text.encode("utf-8"))) from exc
    return traj


# --------------------------------------------------------------------------
# Trajectory files (JSONL)


def trajectory_record(t: Trajectory) -> dict:
    return {"question_id": t.question_id, "mode": t.mode.value, "transcript": render_transcript(t)}


def write_trajectories(path: Union[str, Path], trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(json.dumps(trajectory_record(t), ensure_ascii=False) + "\n")


def read_trajectories(path: Union[str, Path], cap: Optional[int] = None) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                out.append(parse_transcript(rec["transcript"], str(rec["question_id"]), Mode(rec["mode"]), cap))
            except TranscriptError as exc:
                raise TranscriptError(f"{path}:{lineno}: {exc}", exc.offset) from exc
    return out
