from __future__ import annotations

import pytest

from searchbound.environment import (
    Fact,
    Knowledge,
    ParametricProfile,
    Question,
    World,
    WorldConfig,
    generate_profile,
    generate_questions,
    generate_world,
    render_question,
)
from searchbound.policy import Env


@pytest.fixture(scope="session")
def world() -> World:
    return generate_world(WorldConfig(), seed=0)


@pytest.fixture(scope="session")
def profile(world) -> ParametricProfile:
    return generate_profile(world, coverage=0.6, corruption=0.15, seed=0)


@pytest.fixture(scope="session")
def questions(world) -> list[Question]:
    return generate_questions(world, 80, seed=0)


@pytest.fixture(scope="session")
def env(world, profile) -> Env:
    return Env(world, profile)


@pytest.fixture
def tiny_world() -> World:
    """a -r-> b -r-> c, plus a distractor a -s-> c."""
    return World(
        entities=("a", "b", "c"),
        relations=("r", "s"),
        facts=(Fact("a", "r", "b"), Fact("b", "r", "c"), Fact("a", "s", "c")),
        seed=0,
    )


def make_profile(world: World, statuses: dict, wrong: dict | None = None) -> ParametricProfile:
    full = {f.query: statuses.get(f.query, Knowledge.UNKNOWN) for f in world.facts}
    return ParametricProfile(full, dict(wrong or {}), 0.0, 0.0, 0, world.index)


def make_question(qid: str, hops, gold: str) -> Question:
    hops = tuple(tuple(h) for h in hops)
    return Question(qid, hops, render_question(hops[0][0], [r for _, r in hops]), gold)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (ok, detail)
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
