"""Evaluation metrics: accuracy, search count, and the two over-search ratios.

Redundancy is decided by a ground-truth oracle instead of a language-model
judge: a search is redundant when the fact it asks for was already retrieved
earlier in the same trajectory, or when the agent's memory of that fact is
correct.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .environment import Knowledge, ParametricProfile, World
from .reward import judge_answer
from .trajectory import Mode, StepKind, Trajectory, search_count


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    trajectory: Trajectory
    gold: str
    parametric_answerable: bool
    # Per-search redundancy flags for audit transcripts with raw queries.
    redundant: Optional[tuple[bool, ...]] = None


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    sc: float
    qor: Optional[float]
    sor: Optional[float]
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"acc": self.acc, "sc": self.sc, "qor": self.qor, "sor": self.sor, "counts": dict(self.counts)}


def compute_acc(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise MetricsError("ACC needs at least one record")
    return sum(judge_answer(r.trajectory.predicted_answer, r.gold) for r in records) / len(records)


def compute_sc(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise MetricsError("SC needs at least one record")
    return sum(search_count(r.trajectory) for r in records) / len(records)


def compute_qor(records: Sequence[EvalRecord]) -> Optional[float]:
    para = [r for r in records if r.parametric_answerable]
    if not para:
        return None
    return sum(1 for r in para if search_count(r.trajectory) >= 1) / len(para)


def redundant_flags(
    trajectory: Trajectory,
    world: Optional[World],
    profile: Optional[ParametricProfile],
    annotation: Optional[Sequence[bool]] = None,
) -> list[bool]:
    """One flag per search step, in order."""
    searches = [i for i, s in enumerate(trajectory.steps) if s.kind is StepKind.SEARCH]
    if annotation is not None:
        if len(annotation) != len(searches):
            raise MetricsError(
                f"{trajectory.question_id}: {len(annotation)} redundancy annotations for {len(searches)} searches"
            )
        return [bool(a) for a in annotation]
    raw = [i for i in searches if isinstance(trajectory.steps[i].content, str)]
    if raw:
        raise MetricsError(
            f"{trajectory.question_id}: search steps {raw} have raw queries and no redundancy annotation"
        )
    if searches and (world is None or profile is None):
        raise MetricsError("structured redundancy needs the world and the parametric profile")
    flags = []
    seen = set()
    for s in trajectory.steps:
        if s.kind is StepKind.SEARCH:
            q = s.content
            gold = world.lookup(q)  # type: ignore[union-attr,arg-type]
            already = gold is not None and gold in seen
            flags.append(already or profile.status_of(q) is Knowledge.KNOWN_CORRECT)  # type: ignore[union-attr,arg-type]
        elif s.kind is StepKind.INFORMATION and not isinstance(s.content, str):
            seen.update(e.fact for e in s.content)
    return flags


def compute_sor(
    records: Sequence[EvalRecord],
    world: Optional[World] = None,
    profile: Optional[ParametricProfile] = None,
) -> Optional[float]:
    total = redundant = 0
    for r in records:
        flags = redundant_flags(r.trajectory, world, profile, r.redundant)
        total += len(flags)
        redundant += sum(flags)
    return redundant / total if total else None


def compute_report(
    records: Sequence[EvalRecord],
    world: Optional[World] = None,
    profile: Optional[ParametricProfile] = None,
) -> MetricsReport:
    total = redundant = 0
    for r in records:
        flags = redundant_flags(r.trajectory, world, profile, r.redundant)
        total += len(flags)
        redundant += sum(flags)
    return MetricsReport(
        acc=compute_acc(records),
        sc=compute_sc(records),
        qor=compute_qor(records),
        sor=redundant / total if total else None,
        counts={
            "records": len(records),
            "para_records": sum(1 for r in records if r.parametric_answerable),
            "total_searches": total,
            "redundant_searches": redundant,
        },
    )


def compute_dynamics(
    trajectories: Iterable[Trajectory],
    world: World,
    profile: ParametricProfile,
) -> dict[str, Optional[float]]:
    """No-search and redundant-search ratios over search-enabled trajectories."""
    n = no_search = total = redundant = 0
    for t in trajectories:
        if t.mode is not Mode.SEARCH_ENABLED:
            continue
        n += 1
        flags = redundant_flags(t, world, profile)
        if not flags:
            no_search += 1
        total += len(flags)
        redundant += sum(flags)
    return {
        "no_search_ratio": no_search / n if n else None,
        "redundant_search_ratio": redundant / total if total else None,
    }


def write_report(report: MetricsReport, out: Union[str, Path]) -> tuple[Path, Path]:
    """Write ``<out>.json`` and a one-row ``<out>.csv`` summary."""
    out = Path(out)
    if out.suffix in (".json", ".csv"):
        out = out.with_suffix("")
    js, cs = out.with_suffix(".json"), out.with_suffix(".csv")
    js.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    with open(cs, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        cols = ["acc", "sc", "qor", "sor", "records", "para_records", "total_searches", "redundant_searches"]
        w.writerow(cols)
        row = [report.acc, report.sc, report.qor, report.sor] + [report.counts.get(c) for c in cols[4:]]
        w.writerow(["" if v is None else v for v in row])
    return js, cs
