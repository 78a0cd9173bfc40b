"""Small builders for hand-made trajectories and metric oracles."""

from __future__ import annotations

from typing import Optional

import numpy as np

from searchbound.environment import Knowledge, parametric_answerable
from searchbound.metrics import EvalRecord
from searchbound.policy import Env, PolicyParams, rollout
from searchbound.trajectory import Mode, Step, StepKind, Trajectory


def make_traj(answer: Optional[str], n_searches: int = 0, mode: Mode = Mode.SEARCH_ENABLED, qid: str = "q") -> Trajectory:
    steps = [Step(StepKind.THINK, "t")]
    for i in range(n_searches):
        steps += [Step(StepKind.SEARCH, f"query {i}"), Step(StepKind.INFORMATION, "doc")]
    if answer is not None:
        steps.append(Step(StepKind.ANSWER, answer))
    return Trajectory(qid, mode, tuple(steps))


def random_records(world, profile, questions, n=100, seed=0):
    rng = np.random.default_rng(seed)
    env = Env(world, profile)
    out = []
    for i in range(n):
        q = questions[int(rng.integers(len(questions)))]
        p = PolicyParams(rng.normal(0, 2, (5, 3)))
        t = rollout(p, q, Mode.SEARCH_ENABLED, env, cap=5, seed=i)
        out.append(EvalRecord(q.id, t, q.gold_answer, parametric_answerable(profile, q)))
    return out


def naive_redundant(t: Trajectory, world, profile) -> list[bool]:
    """Replay evidence step by step and test each search against it."""
    flags = []
    for i, s in enumerate(t.steps):
        if s.kind is not StepKind.SEARCH:
            continue
        earlier = set()
        for prev in t.steps[:i]:
            if prev.kind is StepKind.INFORMATION:
                for e in prev.content:
                    earlier.add((e.fact.subject, e.fact.relation, e.fact.object))
        gold = world.lookup(s.content)
        seen = gold is not None and (gold.subject, gold.relation, gold.object) in earlier
        flags.append(seen or profile.status[s.content] is Knowledge.KNOWN_CORRECT)
    return flags
