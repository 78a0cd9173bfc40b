"""Synthetic knowledge-graph QA world: facts, multi-hop questions, retrieval and
a parametric-knowledge profile.

Everything here is immutable after construction and a pure function of its
config and seed, so worlds can be shared freely across rollout workers.
"""

from __future__ import annotations

import enum
import itertools
import random
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np

Query = tuple[str, str]

_ADJECTIVES = (
    "amber", "silver", "north", "crimson", "quiet", "golden", "misty", "iron",
    "hollow", "bright", "stone", "river", "west", "cedar", "frost", "copper",
    "willow", "ashen", "coral", "lunar", "velvet", "saffron", "obsidian", "ivory",
)
_NOUNS = (
    "harbor", "ridge", "falls", "grove", "bay", "valley", "crest", "haven",
    "field", "port", "mill", "brook", "point", "marsh", "reach", "gate",
    "hill", "ford", "moor", "spire", "dale", "cove", "hollow", "peak",
)
_RELATIONS = (
    "capital", "founder", "mayor", "twin town", "river", "architect", "patron",
    "successor", "neighbor", "sponsor", "rival", "birthplace", "anthem",
    "mascot", "guild", "ally",
)

PLACEHOLDER_ANSWER = "unknown"


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str

    @property
    def query(self) -> Query:
        return (self.subject, self.relation)


@dataclass(frozen=True)
class WorldConfig:
    entity_count: int = 50
    relation_count: int = 10
    fact_density: float = 0.6
    max_chain_depth: int = 3


@dataclass(frozen=True)
class World:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    facts: tuple[Fact, ...]
    seed: int

    def __post_init__(self) -> None:
        ents, rels = set(self.entities), set(self.relations)
        seen = set()
        for f in self.facts:
            if f.subject not in ents or f.object not in ents:
                raise WorldError(f"fact {f} references an undeclared entity")
            if f.relation not in rels:
                raise WorldError(f"fact {f} references an undeclared relation")
            if f.subject == f.object:
                raise WorldError(f"fact {f} is a self-loop")
            if f.query in seen:
                raise WorldError(f"duplicate (subject, relation) pair {f.query}")
            seen.add(f.query)

    @cached_property
    def _entity_set(self) -> frozenset[str]:
        return frozenset(self.entities)

    @cached_property
    def _relation_set(self) -> frozenset[str]:
        return frozenset(self.relations)

    @cached_property
    def index(self) -> dict[Query, Fact]:
        return {f.query: f for f in self.facts}

    @cached_property
    def by_subject(self) -> dict[str, tuple[Fact, ...]]:
        out: dict[str, list[Fact]] = defaultdict(list)
        for f in self.facts:
            out[f.subject].append(f)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def by_relation(self) -> dict[str, tuple[Fact, ...]]:
        out: dict[str, list[Fact]] = defaultdict(list)
        for f in self.facts:
            out[f.relation].append(f)
        return {k: tuple(v) for k, v in out.items()}

    def validate_query(self, query: Query) -> None:
        entity, relation = query
        if entity not in self._entity_set:
            raise WorldError(f"unknown entity id {entity!r}")
        if relation not in self._relation_set:
            raise WorldError(f"unknown relation id {relation!r}")

    def lookup(self, query: Query) -> Optional[Fact]:
        return self.index.get(query)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "entities": list(self.entities),
            "relations": list(self.relations),
            "facts": [{"s": f.subject, "r": f.relation, "o": f.object} for f in self.facts],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "World":
        return cls(
            entities=tuple(data["entities"]),
            relations=tuple(data["relations"]),
            facts=tuple(Fact(d["s"], d["r"], d["o"]) for d in data["facts"]),
            seed=int(data["seed"]),
        )


def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    combos = [f"{a} {b}" for a, b in itertools.product(_ADJECTIVES, _NOUNS) if a != b]
    if n > len(combos):
        combos += [f"place {i}" for i in range(n - len(combos))]
    order = rng.permutation(len(combos))
    return [combos[i] for i in order[:n]]


def _relation_names(m: int) -> list[str]:
    return [_RELATIONS[i] if i < len(_RELATIONS) else f"relation {i}" for i in range(m)]


def generate_world(config: WorldConfig, seed: int) -> World:
    """Build a random functional knowledge graph.

    Each (subject, relation) pair carries a fact with probability
    ``fact_density``. When the density is positive a chain of
    ``max_chain_depth`` hops over distinct entities is planted so that deep
    questions always exist.
    """
    if config.entity_count < 1 or config.relation_count < 1:
        raise WorldError("entity_count and relation_count must be >= 1")
    if not 0.0 <= config.fact_density <= 1.0:
        raise WorldError("fact_density must lie in [0, 1]")
    depth = config.max_chain_depth
    if config.fact_density > 0 and depth >= 1 and config.entity_count < depth + 1:
        raise WorldError(
            f"a chain of depth {depth} needs at least {depth + 1} entities, "
            f"got {config.entity_count}"
        )

    rng = np.random.default_rng(seed)
    entities = _entity_names(config.entity_count, rng)
    relations = _relation_names(config.relation_count)
    n = len(entities)

    objects: dict[Query, str] = {}
    if n >= 2 and config.fact_density > 0:
        draws = rng.random((n, len(relations)))
        for i, s in enumerate(entities):
            for j, r in enumerate(relations):
                if draws[i, j] < config.fact_density:
                    o = int(rng.integers(n - 1))
                    objects[(s, r)] = entities[o if o < i else o + 1]
        if depth >= 1:
            path = rng.choice(n, size=depth + 1, replace=False)
            rels = rng.integers(len(relations), size=depth)
            for h in range(depth):
                objects[(entities[path[h]], relations[rels[h]])] = entities[path[h + 1]]

    facts = tuple(Fact(s, r, o) for (s, r), o in objects.items())
    return World(tuple(entities), tuple(relations), facts, seed)


def chain_exists(world: World, depth: int) -> bool:
    """Breadth-first check for a walk of ``depth`` hops along world facts."""
    frontier = set(world.entities)
    for _ in range(depth):
        frontier = {f.object for s in frontier for f in world.by_subject.get(s, ())}
        if not frontier:
            return False
    return True


# --------------------------------------------------------------------------
# Questions


@dataclass(frozen=True)
class Question:
    id: str
    hops: tuple[Query, ...]
    text: str
    gold_answer: str

    @property
    def hop_count(self) -> int:
        return len(self.hops)

    @property
    def start(self) -> str:
        return self.hops[0][0]

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(r for _, r in self.hops)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "hops": [list(h) for h in self.hops],
            "gold": self.gold_answer,
            "hop_count": self.hop_count,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Question":
        hops = tuple((e, r) for e, r in data["hops"])
        if int(data.get("hop_count", len(hops))) != len(hops):
            raise WorldError(f"question {data['id']}: hop_count does not match hops")
        return cls(id=str(data["id"]), hops=hops, text=data["text"], gold_answer=data["gold"])


def render_question(start: str, relations: Sequence[str]) -> str:
    phrase = start
    for r in relations:
        phrase = f"the {r} of {phrase}"
    return f"What is {phrase}?"


def follow_chain(world: World, hops: Sequence[Query]) -> Optional[str]:
    """Answer reached by following ``hops`` through the world, or None."""
    cur = hops[0][0]
    for entity, relation in hops:
        if entity != cur:
            return None
        fact = world.lookup((cur, relation))
        if fact is None:
            return None
        cur = fact.object
    return cur


DEFAULT_HOP_DISTRIBUTION = {1: 0.5, 2: 0.3, 3: 0.2}


def draw_hop_counts(count: int, hop_distribution: Mapping[int, float], seed: int) -> dict[int, int]:
    hops = sorted(hop_distribution)
    probs = np.array([hop_distribution[h] for h in hops], dtype=float)
    counts = np.random.default_rng(seed).multinomial(count, probs)
    return {h: int(c) for h, c in zip(hops, counts)}


def _all_chains(world: World, depth: int) -> list[tuple[Query, ...]]:
    chains: list[tuple[Query, ...]] = [((f.subject, f.relation),) for f in world.facts]
    for _ in range(depth - 1):
        grown = []
        for ch in chains:
            end = world.index[ch[-1]].object
            for f in world.by_subject.get(end, ()):
                grown.append(ch + ((f.subject, f.relation),))
        chains = grown
    return chains


def generate_questions(
    world: World,
    count: int,
    hop_distribution: Optional[Mapping[int, float]] = None,
    seed: int = 0,
    id_prefix: str = "q",
) -> list[Question]:
    """Sample ``count`` distinct multi-hop questions.

    Per-hop counts come from the first multinomial draw of
    ``np.random.default_rng(seed)``; chains are then drawn without
    replacement from a separate stream.
    """
    dist = dict(DEFAULT_HOP_DISTRIBUTION if hop_distribution is None else hop_distribution)
    if abs(sum(dist.values()) - 1.0) > 1e-9:
        raise WorldError("hop_distribution must sum to 1")
    if any(h < 1 for h in dist):
        raise WorldError("hop counts must be >= 1")
    if not world.facts:
        raise WorldError("world has no facts; no question can be generated")

    per_hop = draw_hop_counts(count, dist, seed)
    rng = np.random.default_rng([seed, 1])
    picked: list[tuple[Query, ...]] = []
    for depth in sorted(per_hop):
        need = per_hop[depth]
        if need == 0:
            continue
        pool = _all_chains(world, depth)
        if not pool:
            raise WorldError(f"world supports no chain of hop depth {depth}")
        if len(pool) < need:
            raise WorldError(
                f"hop depth {depth}: requested {need} questions but the world "
                f"has only {len(pool)} distinct chains"
            )
        idx = rng.choice(len(pool), size=need, replace=False)
        picked.extend(pool[i] for i in sorted(idx))

    order = rng.permutation(len(picked))
    width = max(4, len(str(count)))
    out = []
    for n, i in enumerate(order):
        hops = picked[i]
        gold = follow_chain(world, hops)
        assert gold is not None
        out.append(
            Question(
                id=f"{id_prefix}{n:0{width}d}",
                hops=hops,
                text=render_question(hops[0][0], [r for _, r in hops]),
                gold_answer=gold,
            )
        )
    return out


# --------------------------------------------------------------------------
# Retrieval


@dataclass(frozen=True)
class EvidenceItem:
    fact: Fact
    is_gold: bool
    source_query: Query


def retrieve(
    world: World,
    query: Query,
    k: int = 3,
    p_miss: float = 0.0,
    seed: int = 0,
    rng: Optional[random.Random] = None,
) -> list[EvidenceItem]:
    """Top-k retrieval over world facts.

    The gold fact (if any) is returned unless the miss draw fires; other slots
    are filled with near-miss facts that share the query's subject or relation.
    ``rng`` overrides ``seed`` when a caller already owns a stream.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    world.validate_query(query)
    if rng is None:
        rng = random.Random(seed)
    gold = world.lookup(query)
    missed = rng.random() < p_miss
    out: list[EvidenceItem] = []
    if gold is not None and not missed:
        out.append(EvidenceItem(gold, True, query))
    entity, relation = query
    pool = [f for f in world.by_subject.get(entity, ()) if f is not gold]
    pool += [f for f in world.by_relation.get(relation, ()) if f is not gold and f.subject != entity]
    slots = min(k - len(out), len(pool))
    for f in rng.sample(pool, slots):
        out.append(EvidenceItem(f, False, query))
    return out


# --------------------------------------------------------------------------
# Parametric knowledge


class Knowledge(str, enum.Enum):
    KNOWN_CORRECT = "known_correct"
    KNOWN_CORRUPT = "known_corrupt"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ParametricProfile:
    """Which facts the agent "remembers", and whether the memory is right.

    ``wrong_objects`` maps corrupt facts to the object the agent believes.
    The agent itself only ever sees known vs unknown.
    """

    status: Mapping[Query, Knowledge]
    wrong_objects: Mapping[Query, str]
    coverage: float
    corruption: float
    seed: int
    _world_index: Mapping[Query, Fact] = field(repr=False, compare=False, default_factory=dict)

    def knows(self, query: Query) -> bool:
        return self.status.get(query, Knowledge.UNKNOWN) is not Knowledge.UNKNOWN

    def status_of(self, query: Query) -> Knowledge:
        return self.status.get(query, Knowledge.UNKNOWN)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "coverage": self.coverage,
            "corruption": self.corruption,
            "facts": [
                {
                    "s": s,
                    "r": r,
                    "status": st.value,
                    **({"wrong": self.wrong_objects[(s, r)]} if (s, r) in self.wrong_objects else {}),
                }
                for (s, r), st in sorted(self.status.items())
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping, world: World) -> "ParametricProfile":
        status, wrong = {}, {}
        for d in data["facts"]:
            q = (d["s"], d["r"])
            world.validate_query(q)
            status[q] = Knowledge(d["status"])
            if "wrong" in d:
                wrong[q] = d["wrong"]
        return cls(
            status, wrong, float(data["coverage"]), float(data["corruption"]), int(data["seed"]),
            world.index,
        )


def generate_profile(world: World, coverage: float, corruption: float, seed: int) -> ParametricProfile:
    """Mark each fact known with probability ``coverage``; a known fact is
    corrupt (remembered with a wrong object) with probability ``corruption``."""
    if not (0.0 <= coverage <= 1.0 and 0.0 <= corruption <= 1.0):
        raise WorldError("coverage and corruption must lie in [0, 1]")
    rng = np.random.default_rng([seed, 2])
    status: dict[Query, Knowledge] = {}
    wrong: dict[Query, str] = {}
    n = len(world.entities)
    for f in world.facts:
        known = rng.random() < coverage
        corrupt = rng.random() < corruption
        pick = int(rng.integers(max(n - 1, 1)))
        if not known:
            status[f.query] = Knowledge.UNKNOWN
        elif corrupt and n >= 2:
            candidates = [e for e in world.entities if e != f.object]
            status[f.query] = Knowledge.KNOWN_CORRUPT
            wrong[f.query] = candidates[pick % len(candidates)]
        else:
            status[f.query] = Knowledge.KNOWN_CORRECT
    return ParametricProfile(status, wrong, coverage, corruption, seed, world.index)


def parametric_lookup(profile: ParametricProfile, query: Query, world: Optional[World] = None) -> Optional[str]:
    """Object the agent recalls for ``query``, or None when it does not know."""
    if world is not None:
        world.validate_query(query)
    st = profile.status.get(query, Knowledge.UNKNOWN)
    if st is Knowledge.KNOWN_CORRECT:
        return profile._world_index[query].object
    if st is Knowledge.KNOWN_CORRUPT:
        return profile.wrong_objects[query]
    return None


def parametric_answerable(profile: ParametricProfile, question: Question) -> bool:
    return all(profile.status_of(h) is Knowledge.KNOWN_CORRECT for h in question.hops)
