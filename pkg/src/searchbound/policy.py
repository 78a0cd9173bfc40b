"""Feature-based softmax search policy and rollout machinery.

The agent walks a question's hop chain. Hops backed by retrieved gold evidence
are trusted; otherwise the agent falls back on what it remembers (which may be
silently wrong). At each decision it picks one of three actions:

* ``search_next`` - retrieve the first hop it cannot resolve; once the chain is
  complete this verifies the first hop that only rests on memory.
* ``search_redundant`` - re-query a uniformly chosen hop that is already resolved.
* ``answer_now`` - answer with the end of the believed chain.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .environment import (
    PLACEHOLDER_ANSWER,
    EvidenceItem,
    ParametricProfile,
    Query,
    Question,
    World,
    parametric_lookup,
    retrieve,
)
from .trajectory import Mode, Step, StepKind, Trajectory

FEATURES = (
    "evidence_progress",
    "knows_current_hop",
    "searches_used_fraction",
    "all_hops_resolved",
    "bias",
)
ACTIONS = ("search_next", "search_redundant", "answer_now")
N_FEATURES, N_ACTIONS = len(FEATURES), len(ACTIONS)
SEARCH_NEXT, SEARCH_REDUNDANT, ANSWER_NOW = range(3)

DEFAULT_CAP = 5
DEFAULT_K = 3
THINK_TEXT = "reasoning"


class Action(enum.IntEnum):
    SEARCH_NEXT = SEARCH_NEXT
    SEARCH_REDUNDANT = SEARCH_REDUNDANT
    ANSWER_NOW = ANSWER_NOW


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray  # (N_FEATURES, N_ACTIONS)
    step: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float).reshape(N_FEATURES, N_ACTIONS)
        if not np.all(np.isfinite(w)):
            raise ValueError("policy weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls(np.zeros((N_FEATURES, N_ACTIONS)))

    def to_json(self) -> dict:
        return {
            "feature_names": list(FEATURES),
            "actions": list(ACTIONS),
            "weights": [float(x) for x in self.weights.ravel()],
            "step": self.step,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicyParams":
        if list(data["feature_names"]) != list(FEATURES) or list(data["actions"]) != list(ACTIONS):
            raise ValueError("checkpoint feature/action layout does not match this policy")
        return cls(np.array(data["weights"], dtype=float).reshape(N_FEATURES, N_ACTIONS), int(data.get("step", 0)))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def base_params() -> PolicyParams:
    """A cautious starting policy: search when a hop is unknown, otherwise answer.

    Stands in for an instruction-tuned model before any RL; it rarely verifies
    what it remembers and rarely re-searches.
    """
    w = np.zeros((N_FEATURES, N_ACTIONS))
    fi = {f: i for i, f in enumerate(FEATURES)}
    w[fi["bias"]] = (0.5, -1.5, 0.0)
    w[fi["knows_current_hop"]] = (-1.5, 0.0, 0.5)
    w[fi["all_hops_resolved"]] = (-1.5, 0.0, 1.0)
    w[fi["searches_used_fraction"]] = (-0.5, 0.0, 0.0)
    return PolicyParams(w)


# --------------------------------------------------------------------------
# Agent state


class HopSource(str, enum.Enum):
    EVIDENCE = "evidence"
    PARAMETRIC = "parametric"
    UNRESOLVED = "unresolved"


@dataclass(frozen=True)
class Hop:
    source: HopSource
    query: Optional[Query]
    answer: Optional[str]


@dataclass(frozen=True)
class Env:
    world: World
    profile: ParametricProfile
    k: int = DEFAULT_K
    p_miss: float = 0.0


@dataclass
class AgentState:
    question: Question
    mode: Mode
    cap: int
    evidence: list[EvidenceItem] = field(default_factory=list)
    searches_used: int = 0
    hops: tuple[Hop, ...] = ()

    def refresh(self, profile: ParametricProfile) -> None:
        self.hops = resolve_chain(self.question, self.evidence, profile)

    def features(self) -> tuple[float, ...]:
        n = len(self.hops)
        n_ev = sum(1 for h in self.hops if h.source is HopSource.EVIDENCE)
        current = next((h for h in self.hops if h.source is not HopSource.EVIDENCE), None)
        knows = 1.0 if current is not None and current.source is HopSource.PARAMETRIC else 0.0
        complete = 1.0 if all(h.source is not HopSource.UNRESOLVED for h in self.hops) else 0.0
        used = self.searches_used / self.cap if self.cap > 0 else 1.0
        return (n_ev / n, knows, used, complete, 1.0)

    def legal(self) -> tuple[bool, bool, bool]:
        can_search = self.mode is Mode.SEARCH_ENABLED and self.searches_used < self.cap
        return (can_search, can_search, True)

    def answer(self) -> str:
        if self.hops and all(h.source is not HopSource.UNRESOLVED for h in self.hops):
            return self.hops[-1].answer  # type: ignore[return-value]
        return PLACEHOLDER_ANSWER


def resolve_chain(question: Question, evidence: Sequence[EvidenceItem], profile: ParametricProfile) -> tuple[Hop, ...]:
    """Walk the hop chain, preferring retrieved gold facts over memory."""
    known = {e.fact.query: e.fact.object for e in evidence if e.is_gold}
    hops: list[Hop] = []
    cur: Optional[str] = question.start
    for rel in question.relations:
        if cur is None:
            hops.append(Hop(HopSource.UNRESOLVED, None, None))
            continue
        q = (cur, rel)
        if q in known:
            cur = known[q]
            hops.append(Hop(HopSource.EVIDENCE, q, cur))
            continue
        recalled = parametric_lookup(profile, q)
        if recalled is None:
            hops.append(Hop(HopSource.UNRESOLVED, q, None))
            cur = None
        else:
            hops.append(Hop(HopSource.PARAMETRIC, q, recalled))
            cur = recalled
    return tuple(hops)


# --------------------------------------------------------------------------
# Action distribution


def _probs(w: Sequence[Sequence[float]], x: Sequence[float], legal: Sequence[bool]) -> list[float]:
    logits = [sum(x[f] * w[f][a] for f in range(N_FEATURES)) for a in range(N_ACTIONS)]
    top = max(l for l, ok in zip(logits, legal) if ok)
    ex = [math.exp(l - top) if ok else 0.0 for l, ok in zip(logits, legal)]
    z = sum(ex)
    return [e / z for e in ex]


def action_distribution(params: PolicyParams, state: AgentState) -> np.ndarray:
    """Softmax over legal actions of ``features . weights``."""
    return np.array(_probs(params.weights.tolist(), state.features(), state.legal()))


def masked_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = np.where(legal, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(legal, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def log_prob_grad(weights: np.ndarray, x: np.ndarray, legal: np.ndarray, action: int) -> np.ndarray:
    """Gradient of log pi(action | x) w.r.t. the weight matrix."""
    p = masked_softmax(x @ weights, legal)
    onehot = np.zeros(N_ACTIONS)
    onehot[action] = 1.0
    return np.outer(x, onehot - p)


def _inverse_cdf(probs: Sequence[float], u: float) -> int:
    acc = 0.0
    last = 0
    for a, p in enumerate(probs):
        if p <= 0.0:
            continue
        acc += p
        last = a
        if u < acc:
            return a
    return last


def sample_action(params: PolicyParams, state: AgentState, rng: random.Random) -> Action:
    return Action(_inverse_cdf(_probs(params.weights.tolist(), state.features(), state.legal()), rng.random()))


# --------------------------------------------------------------------------
# Rollouts


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from arbitrary labels; independent of scheduling."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Decision:
    features: tuple[float, ...]
    legal: tuple[bool, bool, bool]
    action: int
    prob: float


@dataclass(frozen=True)
class Rollout:
    trajectory: Trajectory
    decisions: tuple[Decision, ...]
    question: Question


def _search_target(state: AgentState, action: int, rng: random.Random) -> Query:
    resolved = [h.query for h in state.hops if h.source is not HopSource.UNRESOLVED]
    if action == SEARCH_REDUNDANT and resolved:
        return resolved[rng.randrange(len(resolved))]  # type: ignore[return-value]
    for h in state.hops:
        if h.source is HopSource.UNRESOLVED and h.query is not None:
            return h.query
    for h in state.hops:
        if h.source is HopSource.PARAMETRIC:
            return h.query  # type: ignore[return-value]
    return resolved[rng.randrange(len(resolved))]  # type: ignore[return-value]


def rollout_trace(
    params: PolicyParams,
    question: Question,
    mode: Mode,
    env: Env,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    _w: Optional[list] = None,
) -> Rollout:
    """Run one episode and keep the per-decision trace needed for updates.

    Forced decisions (only ``answer_now`` legal) are not recorded: they carry
    no gradient and no KL.
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    w = params.weights.tolist() if _w is None else _w
    rng = random.Random(seed)
    state = AgentState(question, mode, cap)
    state.refresh(env.profile)
    steps: list[Step] = []
    decisions: list[Decision] = []
    while True:
        steps.append(Step(StepKind.THINK, THINK_TEXT))
        x = state.features()
        legal = state.legal()
        probs = _probs(w, x, legal)
        a = _inverse_cdf(probs, rng.random())
        if sum(legal) > 1:
            decisions.append(Decision(x, legal, a, probs[a]))
        if a == ANSWER_NOW:
            steps.append(Step(StepKind.ANSWER, state.answer()))
            break
        q = _search_target(state, a, rng)
        found = retrieve(env.world, q, env.k, env.p_miss, rng=rng)
        state.searches_used += 1
        state.evidence.extend(found)
        steps.append(Step(StepKind.SEARCH, q))
        steps.append(Step(StepKind.INFORMATION, tuple(found)))
        state.refresh(env.profile)
    return Rollout(Trajectory(question.id, mode, tuple(steps)), tuple(decisions), question)


def rollout(
    params: PolicyParams,
    question: Question,
    mode: Mode,
    env: Env,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
) -> Trajectory:
    return rollout_trace(params, question, mode, env, cap, seed).trajectory


@dataclass(frozen=True)
class RolloutGroups:
    question_id: str
    disabled: tuple[Rollout, ...]
    enabled: tuple[Rollout, ...]

    def __post_init__(self) -> None:
        if any(r.trajectory.mode is not Mode.SEARCH_DISABLED for r in self.disabled):
            raise ValueError("disabled group contains a search-enabled trajectory")
        if any(r.trajectory.mode is not Mode.SEARCH_ENABLED for r in self.enabled):
            raise ValueError("enabled group contains a search-disabled trajectory")

    @property
    def disabled_trajectories(self) -> list[Trajectory]:
        return [r.trajectory for r in self.disabled]

    @property
    def enabled_trajectories(self) -> list[Trajectory]:
        return [r.trajectory for r in self.enabled]


def rollout_group(
    params: PolicyParams,
    question: Question,
    n_disabled: int = 4,
    n_enabled: int = 4,
    env: Optional[Env] = None,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    _w: Optional[list] = None,
) -> RolloutGroups:
    """Paired search-disabled / search-enabled groups for one question.

    Each rollout draws from its own stream keyed on (seed, question id, group
    tag, index) so results do not depend on evaluation order.
    """
    if n_disabled < 1 or n_enabled < 1:
        raise ValueError("both groups need at least one rollout")
    if env is None:
        raise ValueError("an Env is required")
    w = params.weights.tolist() if _w is None else _w
    dis = tuple(
        rollout_trace(params, question, Mode.SEARCH_DISABLED, env, cap, derive_seed(seed, question.id, "d", i), w)
        for i in range(n_disabled)
    )
    ena = tuple(
        rollout_trace(params, question, Mode.SEARCH_ENABLED, env, cap, derive_seed(seed, question.id, "e", i), w)
        for i in range(n_enabled)
    )
    return RolloutGroups(question.id, dis, ena)


# Worker-pool plumbing. Each worker receives the environment once.
_WORKER_ENV: Optional[Env] = None


def _init_worker(env: Env) -> None:
    global _WORKER_ENV
    _WORKER_ENV = env


def _group_job(args: tuple) -> list[RolloutGroups]:
    params, questions, n_d, n_e, cap, seed = args
    w = params.weights.tolist()
    return [rollout_group(params, q, n_d, n_e, _WORKER_ENV, cap, seed, w) for q in questions]


class RolloutPool:
    """Runs rollout groups serially or over a process pool with identical output."""

    def __init__(self, env: Env, workers: int = 1):
        self.env = env
        self.workers = max(1, int(workers))
        self._pool: Optional[ProcessPoolExecutor] = None
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(self.workers, initializer=_init_worker, initargs=(env,))

    def groups(
        self, params: PolicyParams, questions: Sequence[Question], n_d: int, n_e: int, cap: int, seed: int
    ) -> list[RolloutGroups]:
        if self._pool is None:
            w = params.weights.tolist()
            return [rollout_group(params, q, n_d, n_e, self.env, cap, seed, w) for q in questions]
        size = max(1, math.ceil(len(questions) / self.workers))
        chunks = [list(questions[i : i + size]) for i in range(0, len(questions), size)]
        out: list[RolloutGroups] = []
        for part in self._pool.map(_group_job, [(params, c, n_d, n_e, cap, seed) for c in chunks]):
            out.extend(part)
        return out

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> "RolloutPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
