"""Group-relative policy optimization with boundary-aware rewards.

One training step: sample questions, roll out a search-disabled and a
search-enabled group per question, label each question from the two groups,
score every trajectory under the run's reward rule, normalize advantages
within each group separately, and take one clipped policy-gradient step.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from . import boundary
from .boundary import BoundaryVerdict, Label, gold_judge
from .environment import ParametricProfile, Question, World, parametric_answerable
from .metrics import EvalRecord, MetricsReport, compute_dynamics, compute_report
from .policy import (
    N_ACTIONS,
    Env,
    PolicyParams,
    Rollout,
    RolloutGroups,
    RolloutPool,
    base_params,
    derive_seed,
    masked_softmax,
    rollout_trace,
)
from .reward import (
    RewardBreakdown,
    RewardConfig,
    Stage,
    accuracy_f1,
    fixed_penalty_reward,
    total_reward,
)
from .trajectory import Mode, search_count

ADV_EPS = 1e-8


class Variant(str, enum.Enum):
    SAAS = "saas"
    OUTCOME_ONLY = "outcome_only"
    FIXED_PENALTY = "fixed_penalty"
    NO_STAGE_WISE = "no_stage_wise"
    FROZEN_BOUNDARY = "frozen_boundary"

    @property
    def stage_wise(self) -> bool:
        return self is Variant.SAAS


class UpdateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    questions_per_step: int = 16
    lr: float = 0.3
    clip_ratio: float = 0.2
    kl_coeff: float = 0.001
    alpha: float = 0.05
    delta: int = 2
    n_disabled: int = 4
    n_enabled: int = 4
    cap: int = 5
    k: int = 3
    p_miss: float = 0.0
    patience: int = 5
    min_delta: float = 0.005
    eval_interval: int = 10
    val_samples: int = 2
    eval_samples: int = 4
    variant: Variant = Variant.SAAS
    seed: int = 0
    train_disabled: bool = True
    stage_switch_step: Optional[int] = None
    update_epochs: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.kl_coeff < 0 or self.alpha < 0:
            raise ValueError("kl_coeff and alpha must be non-negative")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**dict(data))

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


# --------------------------------------------------------------------------
# Advantages


def normalize_group_advantages(rewards: Sequence[float]) -> list[float]:
    """(r - mean) / (population std + eps); a constant group maps to zeros."""
    if len(rewards) == 0:
        raise ValueError("cannot normalize an empty group")
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std == 0.0:
        return [0.0] * len(r)
    return ((r - r.mean()) / (std + ADV_EPS)).tolist()


# --------------------------------------------------------------------------
# Clipped surrogate


@dataclass(frozen=True)
class Batch:
    """Flattened decisions: one row per sampled (state, action)."""

    x: np.ndarray  # (D, F)
    legal: np.ndarray  # (D, A) bool
    actions: np.ndarray  # (D,)
    advantages: np.ndarray  # (D,)
    scale: np.ndarray  # (D,) per-row weight, 1 / #trajectories

    @classmethod
    def from_rollouts(cls, items: Sequence[tuple[Rollout, float]]) -> "Batch":
        xs, ls, acts, advs = [], [], [], []
        for r, adv in items:
            for d in r.decisions:
                xs.append(d.features)
                ls.append(d.legal)
                acts.append(d.action)
                advs.append(adv)
        n_traj = max(1, len(items))
        d = len(acts)
        return cls(
            x=np.array(xs, dtype=float).reshape(d, -1),
            legal=np.array(ls, dtype=bool).reshape(d, N_ACTIONS),
            actions=np.array(acts, dtype=int),
            advantages=np.array(advs, dtype=float),
            scale=np.full(d, 1.0 / n_traj),
        )

    def __len__(self) -> int:
        return len(self.actions)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip_ratio: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip_ratio, 1 + clip_ratio) * adv)


def _kl_rows(p: np.ndarray, q: np.ndarray, legal: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(legal & (p > 0), p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def surrogate_objective(
    weights: np.ndarray, batch: Batch, old_weights: np.ndarray, clip_ratio: float, kl_coeff: float
) -> float:
    if len(batch) == 0:
        return 0.0
    p = masked_softmax(batch.x @ weights, batch.legal)
    q = masked_softmax(batch.x @ old_weights, batch.legal)
    rows = np.arange(len(batch))
    ratio = p[rows, batch.actions] / q[rows, batch.actions]
    surr = float(np.sum(batch.scale * clipped_surrogate(ratio, batch.advantages, clip_ratio)))
    return surr - kl_coeff * float(_kl_rows(p, q, batch.legal).mean())


def surrogate_gradient(
    weights: np.ndarray, batch: Batch, old_weights: np.ndarray, clip_ratio: float, kl_coeff: float
) -> tuple[np.ndarray, dict]:
    """Analytic gradient of ``surrogate_objective`` w.r.t. ``weights``."""
    if len(batch) == 0:
        return np.zeros_like(weights), {"ratio": 1.0, "clip_frac": 0.0, "kl": 0.0}
    rows = np.arange(len(batch))
    p = masked_softmax(batch.x @ weights, batch.legal)
    q = masked_softmax(batch.x @ old_weights, batch.legal)
    ratio = p[rows, batch.actions] / q[rows, batch.actions]
    adv = batch.advantages
    clipped = ratio * adv > np.clip(ratio, 1 - clip_ratio, 1 + clip_ratio) * adv
    # d/dlogits of log p_a is onehot(a) - p on the legal set.
    dlog = -p.copy()
    dlog[rows, batch.actions] += 1.0
    coef = np.where(clipped, 0.0, batch.scale * adv * ratio)
    g_logits = coef[:, None] * dlog

    kl = _kl_rows(p, q, batch.legal)
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.where(batch.legal & (p > 0), np.log(p) - np.log(q), 0.0)
    g_kl = np.where(batch.legal, p * (logr - kl[:, None]), 0.0) / len(batch)
    g_logits -= kl_coeff * g_kl

    grad = batch.x.T @ g_logits
    stats = {
        "ratio": float(ratio.mean()),
        "clip_frac": float(clipped.mean()),
        "kl": float(kl.mean()),
    }
    return grad, stats


def update_policy(
    params: PolicyParams,
    batch: Batch,
    old_params: PolicyParams,
    lr: float,
    clip_ratio: float,
    kl_coeff: float,
) -> tuple[PolicyParams, dict]:
    grad, stats = surrogate_gradient(params.weights, batch, old_params.weights, clip_ratio, kl_coeff)
    if not np.all(np.isfinite(grad)):
        raise UpdateError(f"non-finite policy gradient; stats={stats}, decisions={len(batch)}")
    stats["grad_norm"] = float(np.linalg.norm(grad))
    return PolicyParams(params.weights + lr * grad, params.step + 1), stats


# --------------------------------------------------------------------------
# Stage switching


def detect_plateau(history: Sequence[float], patience: int, min_delta: float) -> bool:
    """True when each of the last ``patience`` scores fails to beat the best
    score seen before it by at least ``min_delta``."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(history) <= patience:
        return False
    start = len(history) - patience
    best = max(history[:start])
    for v in history[start:]:
        if v - best >= min_delta:
            return False
        best = max(best, v)
    return True


# --------------------------------------------------------------------------
# Evaluation


def evaluate(
    params: PolicyParams,
    questions: Sequence[Question],
    env: Env,
    cap: int,
    samples: int,
    seed: int,
) -> tuple[MetricsReport, list[EvalRecord]]:
    w = params.weights.tolist()
    records = []
    for q in questions:
        para = parametric_answerable(env.profile, q)
        for i in range(samples):
            r = rollout_trace(params, q, Mode.SEARCH_ENABLED, env, cap, derive_seed(seed, q.id, "eval", i), w)
            records.append(EvalRecord(q.id, r.trajectory, q.gold_answer, para))
    return compute_report(records, env.world, env.profile), records


def validation_score(params: PolicyParams, questions: Sequence[Question], env: Env, cap: int, samples: int, seed: int) -> float:
    w = params.weights.tolist()
    total = 0.0
    for q in questions:
        for i in range(samples):
            r = rollout_trace(params, q, Mode.SEARCH_ENABLED, env, cap, derive_seed(seed, q.id, "val", i), w)
            total += accuracy_f1(r.trajectory.predicted_answer, q.gold_answer)
    return total / (len(questions) * samples)


# --------------------------------------------------------------------------
# Training run

LOG_COLUMNS = (
    "step", "stage", "f1", "sc", "no_search_ratio", "redundant_search_ratio",
    "n_no_search", "n_need_search", "n_undetermined", "validation",
    "mean_ratio", "clip_frac", "kl",
)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


@dataclass
class TrainResult:
    config: TrainConfig
    log: TrainingLog
    params: PolicyParams
    boundary_log: list[dict]
    reward_log: list[dict]
    final_report: MetricsReport
    switch_step: Optional[int] = None
    switch_report: Optional[MetricsReport] = None
    classify_calls_after_start: int = 0


def _reward(
    variant: Variant, stage: Stage, traj, gold: str, verdict: BoundaryVerdict, alpha: float
) -> RewardBreakdown:
    if variant is Variant.FIXED_PENALTY:
        return fixed_penalty_reward(traj, gold, alpha)
    if variant is Variant.OUTCOME_ONLY:
        stage = Stage.STAGE_I
    return total_reward(traj, gold, verdict, RewardConfig(alpha, stage))


def _assess(groups: RolloutGroups, gold: str, delta: int) -> BoundaryVerdict:
    return boundary.assess(
        groups.disabled_trajectories, groups.enabled_trajectories, gold_judge(gold), delta, groups.question_id
    )


def train_run(
    config: TrainConfig,
    world: World,
    train_questions: Sequence[Question],
    profile: ParametricProfile,
    val_questions: Sequence[Question],
    init: Optional[PolicyParams] = None,
    log_rewards: bool = False,
) -> TrainResult:
    if not train_questions:
        raise ValueError("training question set is empty")
    if not val_questions:
        raise ValueError("validation question set is empty")
    overlap = {q.id for q in train_questions} & {q.id for q in val_questions}
    if overlap:
        raise ValueError(f"validation overlaps training: {sorted(overlap)[:5]}")
    if config.questions_per_step > len(train_questions):
        raise ValueError(
            f"questions_per_step={config.questions_per_step} exceeds the "
            f"{len(train_questions)} available training questions"
        )

    cfg = config
    env = Env(world, profile, cfg.k, cfg.p_miss)
    params = init if init is not None else base_params()
    by_id = {q.id: q for q in train_questions}
    log = TrainingLog()
    boundary_log: list[dict] = []
    reward_log: list[dict] = []
    history: list[float] = []
    stage = Stage.STAGE_I if (cfg.variant.stage_wise or cfg.variant is Variant.OUTCOME_ONLY) else Stage.STAGE_II
    switch_step: Optional[int] = None
    switch_report: Optional[MetricsReport] = None
    classify_calls = 0

    with RolloutPool(env, cfg.workers) as pool:
        frozen: dict[str, BoundaryVerdict] = {}
        if cfg.variant is Variant.FROZEN_BOUNDARY:
            groups = pool.groups(params, train_questions, cfg.n_disabled, cfg.n_enabled, cfg.cap, derive_seed(cfg.seed, "frozen"))
            for g in groups:
                frozen[g.question_id] = _assess(g, by_id[g.question_id].gold_answer, cfg.delta)

        for step in range(cfg.steps):
            rng = np.random.default_rng(derive_seed(cfg.seed, "batch", step))
            picks = rng.choice(len(train_questions), size=cfg.questions_per_step, replace=False)
            qs = [train_questions[i] for i in sorted(picks)]
            groups = pool.groups(params, qs, cfg.n_disabled, cfg.n_enabled, cfg.cap, derive_seed(cfg.seed, "step", step))

            items: list[tuple[Rollout, float]] = []
            label_counts = {lab: 0 for lab in Label}
            enabled_trajs = []
            f1s = []
            for g in groups:
                q = by_id[g.question_id]
                if cfg.variant is Variant.FROZEN_BOUNDARY:
                    verdict = frozen[q.id]
                else:
                    verdict = _assess(g, q.gold_answer, cfg.delta)
                    classify_calls += 1
                label_counts[verdict.label] += 1
                boundary_log.append({"step": step, **verdict.to_json()})

                for tag, members in (("d", g.disabled), ("e", g.enabled)):
                    rewards = [_reward(cfg.variant, stage, r.trajectory, q.gold_answer, verdict, cfg.alpha) for r in members]
                    advs = normalize_group_advantages([rb.total for rb in rewards])
                    if tag == "e" or cfg.train_disabled:
                        items.extend(zip(members, advs))
                    if log_rewards:
                        for r, rb in zip(members, rewards):
                            reward_log.append({
                                "step": step, "question_id": q.id, "group": tag,
                                "label": verdict.label.value, "n": search_count(r.trajectory),
                                "n_min": verdict.n_min, "r_acc": rb.r_acc, "r_search": rb.r_search,
                                "gated": rb.gated, "total": rb.total,
                            })
                for r in g.enabled:
                    enabled_trajs.append(r.trajectory)
                    f1s.append(accuracy_f1(r.trajectory.predicted_answer, q.gold_answer))

            batch = Batch.from_rollouts(items)
            old = params
            stats: dict = {"ratio": 1.0, "clip_frac": 0.0, "kl": 0.0}
            for _ in range(cfg.update_epochs):
                params, stats = update_policy(params, batch, old, cfg.lr, cfg.clip_ratio, cfg.kl_coeff)
            params = PolicyParams(params.weights, step + 1)

            dyn = compute_dynamics(enabled_trajs, world, profile)
            rec = {
                "step": step,
                "stage": stage.value if cfg.variant is not Variant.FIXED_PENALTY else "fixed",
                "f1": float(np.mean(f1s)),
                "sc": float(np.mean([search_count(t) for t in enabled_trajs])),
                "no_search_ratio": dyn["no_search_ratio"],
                "redundant_search_ratio": dyn["redundant_search_ratio"],
                "n_no_search": label_counts[Label.NO_SEARCH],
                "n_need_search": label_counts[Label.NEED_SEARCH],
                "n_undetermined": label_counts[Label.UNDETERMINED],
                "validation": None,
                "mean_ratio": stats["ratio"],
                "clip_frac": stats["clip_frac"],
                "kl": stats["kl"],
            }

            if (step + 1) % cfg.eval_interval == 0:
                score = validation_score(params, val_questions, env, cfg.cap, cfg.val_samples, derive_seed(cfg.seed, "val"))
                history.append(score)
                rec["validation"] = score
            log.append(rec)

            if cfg.variant.stage_wise and stage is Stage.STAGE_I:
                if cfg.stage_switch_step is not None:
                    switch = step + 1 >= cfg.stage_switch_step
                else:
                    switch = rec["validation"] is not None and detect_plateau(history, cfg.patience, cfg.min_delta)
                if switch:
                    stage = Stage.STAGE_II
                    switch_step = step + 1
                    switch_report, _ = evaluate(params, val_questions, env, cfg.cap, cfg.eval_samples, derive_seed(cfg.seed, "eval"))

    final_report, _ = evaluate(params, val_questions, env, cfg.cap, cfg.eval_samples, derive_seed(cfg.seed, "eval"))
    return TrainResult(
        config=cfg,
        log=log,
        params=params,
        boundary_log=boundary_log,
        reward_log=reward_log,
        final_report=final_report,
        switch_step=switch_step,
        switch_report=switch_report,
        classify_calls_after_start=classify_calls,
    )
