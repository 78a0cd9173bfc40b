from __future__ import annotations

import numpy as np
import pytest

from searchbound import boundary
from searchbound.optimizer import (
    Batch,
    TrainConfig,
    UpdateError,
    Variant,
    clipped_surrogate,
    detect_plateau,
    normalize_group_advantages,
    surrogate_gradient,
    surrogate_objective,
    train_run,
    update_policy,
)
from searchbound.policy import Decision, PolicyParams, Rollout, base_params, masked_softmax, rollout_trace
from searchbound.trajectory import Mode

SMALL = dict(steps=12, questions_per_step=6, eval_interval=3, val_samples=1, eval_samples=1)


def random_batch(rng, rows=30) -> Batch:
    x = rng.random((rows, 5))
    x[:, 4] = 1.0
    legal = np.ones((rows, 3), dtype=bool)
    legal[:, :2] = rng.random((rows, 2)) < 0.8
    actions = np.array([rng.choice(np.flatnonzero(l)) for l in legal])
    return Batch(x, legal, actions, rng.normal(size=rows), np.full(rows, 1 / rows))


class TestAdvantages:
    def test_example(self):
        out = normalize_group_advantages([1.0, 0.5, 0.5, 0.0])
        assert out == pytest.approx([np.sqrt(2), 0, 0, -np.sqrt(2)], abs=1e-6)

    def test_zero_variance(self):
        assert normalize_group_advantages([0.3, 0.3, 0.3]) == [0.0, 0.0, 0.0]

    def test_separate_groups_are_centered(self):
        a, b = [1.0, 0.9, 0.0, 0.4], [0.2, 0.1, 0.0, 0.0]
        sep = normalize_group_advantages(a) + normalize_group_advantages(b)
        joint = normalize_group_advantages(a + b)
        assert abs(np.mean(sep[:4])) < 1e-9 and abs(np.mean(sep[4:])) < 1e-9
        assert abs(np.mean(joint[4:])) > 0.1

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_group_advantages([])


class TestSurrogate:
    def test_clip_example(self):
        assert clipped_surrogate(np.array([2.0]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
        assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)

    def test_finite_difference_gradient(self):
        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(100):
            batch = random_batch(rng, rows=1)
            old = rng.normal(size=(5, 3))
            w = old + rng.normal(0, 0.05, size=(5, 3))
            g, _ = surrogate_gradient(w, batch, old, clip_ratio=1e6, kl_coeff=0.001)
            num = np.zeros_like(w)
            for i in range(5):
                for j in range(3):
                    e = np.zeros_like(w)
                    e[i, j] = h
                    num[i, j] = (
                        surrogate_objective(w + e, batch, old, 1e6, 0.001) - surrogate_objective(w - e, batch, old, 1e6, 0.001)
                    ) / (2 * h)
            assert np.linalg.norm(g - num) <= 1e-4 * max(np.linalg.norm(num), 1e-8)

    def test_clipped_region_has_zero_gradient(self):
        x = np.array([[0.0, 0.0, 0.0, 0.0, 1.0]])
        legal = np.ones((1, 3), dtype=bool)
        batch = Batch(x, legal, np.array([0]), np.array([1.0]), np.array([1.0]))
        old = np.zeros((5, 3))
        w = old.copy()
        w[4, 0] = 3.0  # ratio for action 0 far above 1 + eps
        g, stats = surrogate_gradient(w, batch, old, 0.2, 0.0)
        assert stats["clip_frac"] == 1.0
        assert np.array_equal(g, np.zeros_like(g))


class TestUpdate:
    def _rollout(self, questions, env, seed=0):
        return rollout_trace(PolicyParams.zeros(), questions[0], Mode.SEARCH_ENABLED, env, 5, seed)

    def test_zero_advantages_no_change(self, questions, env):
        r = self._rollout(questions, env)
        p = PolicyParams(np.random.default_rng(2).normal(size=(5, 3)))
        new, _ = update_policy(p, Batch.from_rollouts([(r, 0.0)]), p, 0.5, 0.2, 0.001)
        assert np.array_equal(new.weights, p.weights)

    def test_positive_advantage_raises_log_prob(self, questions, env):
        p = base_params()
        for seed in range(10):
            r = rollout_trace(p, questions[seed], Mode.SEARCH_ENABLED, env, 5, seed)
            if not r.decisions:
                continue
            batch = Batch.from_rollouts([(r, 1.0)])
            new, _ = update_policy(p, batch, p, 1e-3, 0.2, 0.001)

            def logp(params):
                pr = masked_softmax(batch.x @ params.weights, batch.legal)
                return float(np.log(pr[np.arange(len(batch)), batch.actions]).sum())

            assert logp(new) > logp(p)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_gradient_aborts(self, questions, env):
        r = self._rollout(questions, env)
        p = PolicyParams.zeros()
        with pytest.raises(UpdateError):
            update_policy(p, Batch.from_rollouts([(r, float("inf"))]), p, 0.1, 0.2, 0.0)

    def test_stats(self):
        rng = np.random.default_rng(3)
        batch = random_batch(rng)
        p = PolicyParams(rng.normal(size=(5, 3)))
        _, stats = update_policy(p, batch, p, 0.1, 0.2, 0.001)
        assert stats["ratio"] == pytest.approx(1.0) and stats["clip_frac"] == 0.0 and stats["kl"] == pytest.approx(0.0)


class TestPlateau:
    def test_increasing_never_plateaus(self):
        h = [0.1 * i for i in range(20)]
        assert not any(detect_plateau(h[:n], p, 0.005) for n in range(len(h) + 1) for p in (1, 3, 5))

    def test_flat(self):
        assert detect_plateau([0.5] * 6, 5, 0.005)
        assert not detect_plateau([0.5] * 5, 5, 0.005)

    def test_sub_threshold_improvements(self):
        h = [0.5 + 0.0025 * i for i in range(7)]
        assert detect_plateau(h, 5, 0.005)

    def test_recent_jump_blocks(self):
        assert not detect_plateau([0.5, 0.5, 0.5, 0.5, 0.5, 0.6], 5, 0.005)

    def test_patience_validated(self):
        with pytest.raises(ValueError):
            detect_plateau([1.0], 0, 0.01)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.clip_ratio, c.kl_coeff, c.alpha, c.delta, c.n_disabled, c.n_enabled, c.cap, c.k) == (0.2, 0.001, 0.05, 2, 4, 4, 5, 3)
        assert (c.patience, c.min_delta) == (5, 0.005)

    @pytest.mark.parametrize("bad", [dict(clip_ratio=0), dict(patience=0), dict(lr=0), dict(kl_coeff=-1), dict(delta=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_mapping({"bogus": 1})


@pytest.fixture(scope="module")
def split(questions):
    return questions[:50], questions[50:70]


class TestTrainRun:
    def test_deterministic(self, world, profile, split):
        cfg = TrainConfig(variant=Variant.SAAS, seed=4, **SMALL)
        a = train_run(cfg, world, split[0], profile, split[1])
        b = train_run(cfg, world, split[0], profile, split[1])
        assert a.log.to_csv() == b.log.to_csv()
        assert np.array_equal(a.params.weights, b.params.weights)
        assert len(a.log.records) == cfg.steps

    def test_forced_switch_happens_once(self, world, profile, split):
        cfg = TrainConfig(variant=Variant.SAAS, seed=1, stage_switch_step=5, **SMALL)
        r = train_run(cfg, world, split[0], profile, split[1])
        stages = r.log.column("stage")
        # the switch fires after the fifth completed step
        assert stages[:5] == ["I"] * 5 and stages[5:] == ["II"] * 7
        assert r.switch_step == 5 and r.switch_report is not None

    @pytest.mark.parametrize("variant", [v for v in Variant if v is not Variant.SAAS])
    def test_no_switch_outside_saas(self, world, profile, split, variant):
        cfg = TrainConfig(variant=variant, seed=1, stage_switch_step=3, **SMALL)
        r = train_run(cfg, world, split[0], profile, split[1])
        assert r.switch_step is None
        assert len(set(r.log.column("stage"))) == 1

    def test_frozen_boundary_never_reclassifies(self, world, profile, split, monkeypatch):
        calls = []
        real = boundary.assess

        def counting(*a, **k):
            calls.append(1)
            return real(*a, **k)

        monkeypatch.setattr(boundary, "assess", counting)
        cfg = TrainConfig(variant=Variant.FROZEN_BOUNDARY, seed=2, **SMALL)
        r = train_run(cfg, world, split[0], profile, split[1])
        assert len(calls) == len(split[0])  # one verdict per training question, all before step 0
        assert r.classify_calls_after_start == 0

        calls.clear()
        cfg = TrainConfig(variant=Variant.SAAS, seed=2, **SMALL)
        train_run(cfg, world, split[0], profile, split[1])
        assert len(calls) == cfg.steps * cfg.questions_per_step

    def test_reward_log(self, world, profile, split):
        cfg = TrainConfig(variant=Variant.NO_STAGE_WISE, seed=3, **SMALL)
        r = train_run(cfg, world, split[0], profile, split[1], log_rewards=True)
        assert len(r.reward_log) == cfg.steps * cfg.questions_per_step * 8
        for row in r.reward_log:
            assert row["total"] == pytest.approx(row["r_acc"] + (row["r_search"] if row["gated"] else 0.0))

    def test_exhausted_questions(self, world, profile, split):
        with pytest.raises(ValueError, match="exceeds"):
            train_run(TrainConfig(questions_per_step=60, **{k: v for k, v in SMALL.items() if k != "questions_per_step"}), world, split[0], profile, split[1])

    def test_empty_and_overlapping_splits(self, world, profile, split):
        cfg = TrainConfig(**SMALL)
        with pytest.raises(ValueError):
            train_run(cfg, world, [], profile, split[1])
        with pytest.raises(ValueError, match="overlaps"):
            train_run(cfg, world, split[0], profile, split[0][:5])

    def test_both_groups_normalized_separately(self, world, profile, split):
        cfg = TrainConfig(variant=Variant.NO_STAGE_WISE, seed=5, **SMALL)
        r = train_run(cfg, world, split[0], profile, split[1], log_rewards=True)
        groups: dict = {}
        for row in r.reward_log:
            groups.setdefault((row["step"], row["question_id"], row["group"]), []).append(row["total"])
        for rewards in groups.values():
            adv = normalize_group_advantages(rewards)
            assert abs(np.mean(adv)) < 1e-9
