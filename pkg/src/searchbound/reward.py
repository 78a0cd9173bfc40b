"""Trajectory rewards: token F1 accuracy, a boundary-conditioned search
penalty gated on a fully correct answer, and the two-stage schedule."""

from __future__ import annotations

import enum
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .trajectory import Trajectory, search_count

if TYPE_CHECKING:
    from .boundary import BoundaryVerdict, Label

DEFAULT_ALPHA = 0.05
GATE_TOL = 1e-12

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", s).split())


def accuracy_f1(predicted: Optional[str], gold: str) -> float:
    pred = normalize_answer(predicted or "").split()
    ref = normalize_answer(gold).split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(pred), common / len(ref)
    return 2 * precision * recall / (precision + recall)


def judge_answer(predicted: Optional[str], gold: str) -> bool:
    return abs(accuracy_f1(predicted, gold) - 1.0) <= GATE_TOL


class Stage(str, enum.Enum):
    STAGE_I = "I"
    STAGE_II = "II"


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = DEFAULT_ALPHA
    stage: Stage = Stage.STAGE_II

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_search: float
    gated: bool
    total: float


def search_reward(label: "Label", n_searches: int, n_min: Optional[int], alpha: float) -> float:
    """Penalty for a trajectory given its question's boundary label.

    NoSearch: every search costs ``alpha``. NeedSearch: only searches beyond
    the cheapest correct enabled rollout cost ``alpha``. Undetermined: free.
    """
    from .boundary import Label

    if label is Label.NO_SEARCH:
        return -alpha * n_searches
    if label is Label.NEED_SEARCH:
        if n_min is None:
            raise ValueError("NeedSearch requires n_min")
        return -alpha * max(0, n_searches - n_min)
    return 0.0


def total_reward(
    trajectory: Trajectory,
    gold: str,
    verdict: "BoundaryVerdict",
    config: RewardConfig,
) -> RewardBreakdown:
    r_acc = accuracy_f1(trajectory.predicted_answer, gold)
    if config.stage is Stage.STAGE_I:
        return RewardBreakdown(r_acc, 0.0, False, r_acc)
    r_search = search_reward(verdict.label, search_count(trajectory), verdict.n_min, config.alpha)
    gated = abs(r_acc - 1.0) <= GATE_TOL
    return RewardBreakdown(r_acc, r_search, gated, r_acc + r_search if gated else r_acc)


def fixed_penalty_reward(trajectory: Trajectory, gold: str, alpha: float) -> RewardBreakdown:
    """Uniform, ungated per-search penalty used by the naive baseline."""
    r_acc = accuracy_f1(trajectory.predicted_answer, gold)
    r_search = -alpha * search_count(trajectory)
    return RewardBreakdown(r_acc, r_search, False, r_acc + r_search)


REWARD_LOG_COLUMNS = ("step", "question_id", "group", "label", "n", "n_min", "r_acc", "r_search", "gated", "total")
