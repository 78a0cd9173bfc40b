"""On-policy search boundary: contrast a search-disabled group against a
search-enabled group for the same question and label the question."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .reward import judge_answer
from .trajectory import Mode, Trajectory, search_count

Judge = Callable[[Trajectory], bool]


class Label(str, enum.Enum):
    NO_SEARCH = "NoSearch"
    NEED_SEARCH = "NeedSearch"
    UNDETERMINED = "Undetermined"


@dataclass(frozen=True)
class BoundaryVerdict:
    n_d: int
    n_e: int
    label: Label
    n_min: Optional[int]
    delta: int
    question_id: str = ""

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "n_d": self.n_d,
            "n_e": self.n_e,
            "delta": self.delta,
            "label": self.label.value,
            "n_min": self.n_min,
        }


def gold_judge(gold: str) -> Judge:
    """Correct iff the trajectory's answer matches ``gold`` exactly after normalization."""

    def judge(t: Trajectory) -> bool:
        pred = t.predicted_answer
        return pred is not None and judge_answer(pred, gold)

    return judge


def count_successes(disabled: Sequence[Trajectory], enabled: Sequence[Trajectory], judge: Judge) -> tuple[int, int]:
    if not disabled or not enabled:
        raise ValueError("both rollout groups must be non-empty")
    if any(t.mode is not Mode.SEARCH_DISABLED for t in disabled):
        raise ValueError("disabled group contains a search-enabled trajectory")
    if any(t.mode is not Mode.SEARCH_ENABLED for t in enabled):
        raise ValueError("enabled group contains a search-disabled trajectory")
    return sum(1 for t in disabled if judge(t)), sum(1 for t in enabled if judge(t))


def classify(n_d: int, n_e: int, delta: int) -> Label:
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if n_d >= delta:
        return Label.NO_SEARCH
    if n_d == 0 and n_e > 0:
        return Label.NEED_SEARCH
    return Label.UNDETERMINED


def min_sufficient_searches(enabled: Iterable[Trajectory], judge: Judge) -> Optional[int]:
    """Fewest searches among correct trajectories, or None if none is correct."""
    counts = [search_count(t) for t in enabled if judge(t)]
    return min(counts) if counts else None


def assess(
    disabled: Sequence[Trajectory],
    enabled: Sequence[Trajectory],
    judge: Judge,
    delta: int,
    question_id: str = "",
) -> BoundaryVerdict:
    n_d, n_e = count_successes(disabled, enabled, judge)
    label = classify(n_d, n_e, delta)
    return BoundaryVerdict(n_d, n_e, label, min_sufficient_searches(enabled, judge), delta, question_id)


def write_boundary_log(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
