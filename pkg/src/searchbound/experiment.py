"""Run configuration, default desk-scale setup, and multi-seed ablations."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .environment import (
    DEFAULT_HOP_DISTRIBUTION,
    ParametricProfile,
    Question,
    World,
    WorldConfig,
    generate_profile,
    generate_questions,
    generate_world,
)
from .optimizer import TrainConfig, TrainResult, Variant, train_run

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class EnvConfig:
    world: WorldConfig = WorldConfig()
    coverage: float = 0.6
    corruption: float = 0.15
    train_questions: int = 300
    val_questions: int = 100
    hop_distribution: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_HOP_DISTRIBUTION))
    seed: int = 0


@dataclass(frozen=True)
class Setup:
    world: World
    profile: ParametricProfile
    train: list[Question]
    val: list[Question]


def build_setup(cfg: EnvConfig) -> Setup:
    world = generate_world(cfg.world, cfg.seed)
    profile = generate_profile(world, cfg.coverage, cfg.corruption, cfg.seed)
    qs = generate_questions(world, cfg.train_questions + cfg.val_questions, cfg.hop_distribution, cfg.seed)
    return Setup(world, profile, qs[: cfg.train_questions], qs[cfg.train_questions :])


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = EnvConfig()
    train: TrainConfig = TrainConfig()


def _hop_dist(raw: Mapping) -> dict[int, float]:
    return {int(k): float(v) for k, v in raw.items()}


def parse_run_config(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from a nested mapping with optional ``world``,
    ``profile``, ``questions``, ``env_seed`` and ``train`` sections."""
    known = {"world", "profile", "questions", "env_seed", "train"}
    extra = set(data) - known
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    env = EnvConfig()
    if "world" in data:
        env = replace(env, world=WorldConfig(**data["world"]))
    if "profile" in data:
        p = dict(data["profile"])
        env = replace(env, coverage=float(p.pop("coverage", env.coverage)), corruption=float(p.pop("corruption", env.corruption)))
        if p:
            raise ValueError(f"unknown profile keys: {sorted(p)}")
    if "questions" in data:
        q = dict(data["questions"])
        env = replace(
            env,
            train_questions=int(q.pop("train", env.train_questions)),
            val_questions=int(q.pop("validation", env.val_questions)),
            hop_distribution=_hop_dist(q.pop("hop_distribution", env.hop_distribution)),
        )
        if q:
            raise ValueError(f"unknown questions keys: {sorted(q)}")
    if "env_seed" in data:
        env = replace(env, seed=int(data["env_seed"]))
    train = TrainConfig.from_mapping(data.get("train", {}))
    return RunConfig(env, train)


def load_run_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return parse_run_config(data)


def run_config_to_json(cfg: RunConfig) -> dict:
    return {
        "env_seed": cfg.env.seed,
        "world": asdict(cfg.env.world),
        "profile": {"coverage": cfg.env.coverage, "corruption": cfg.env.corruption},
        "questions": {
            "train": cfg.env.train_questions,
            "validation": cfg.env.val_questions,
            "hop_distribution": {str(k): v for k, v in cfg.env.hop_distribution.items()},
        },
        "train": cfg.train.to_json(),
    }


def run(cfg: RunConfig, setup: Optional[Setup] = None, **kw) -> TrainResult:
    s = setup or build_setup(cfg.env)
    return train_run(cfg.train, s.world, s.train, s.profile, s.val, **kw)


def window_mean(values: Sequence[Optional[float]], lo: float, hi: float) -> float:
    """Mean of the finite entries between fractions ``lo`` and ``hi`` of the run."""
    n = len(values)
    part = [v for v in values[int(round(lo * n)) : int(round(hi * n))] if v is not None]
    return float(np.mean(part)) if part else float("nan")
