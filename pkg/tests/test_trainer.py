"""Tests for the on-policy training loop.

The GAE hand case below is worked out by hand for gamma = 0.5, lambda = 1:
with rewards [1, 2, 3], values [0.5, 1, 1.5] and a terminal last step, the
discounted returns are [2.75, 3.5, 3] and the advantages [2.25, 2.5, 1.5].
Monte-Carlo comparisons recompute discounted return sums per episode segment
with plain Python loops.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from evac.encoding import make_encoder
from evac.environment import EnvConfig, EvacuationEnv
from evac.evaluation import ema
from evac.geometry import make_rng, spawn_rngs
from evac.policy import ACTION_DIM, ActorCritic
from evac.trainer import (
    EPISODES_FIELDS,
    METRICS_FIELDS,
    RewardNormalizer,
    RolloutBuffer,
    TrainConfig,
    TrainingDiverged,
    collect_rollout,
    compute_gae,
    train,
    update,
)

TINY_ENV = EnvConfig(n_individuals=3, t_max=40)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        total_timesteps=128,
        num_envs=2,
        num_steps=32,
        num_minibatches=2,
        update_epochs=2,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_parts(seed=0, dropout=0.1, rpo=0.5, env_config=TINY_ENV, num_envs=2,
               num_steps=32):
    init_rng, action_rng, update_rng, *env_rngs = spawn_rngs(seed, 3 + num_envs)
    encoder = make_encoder("grav", env_config, 1.0)
    model = ActorCritic(
        encoder.dim, dropout_rate=dropout, rpo_alpha=rpo, init_rng=init_rng
    )
    envs = [EvacuationEnv(env_config, rng=r) for r in env_rngs]
    buffer = RolloutBuffer(
        num_steps, num_envs, encoder.dim,
        mask_shape=model.mask_shape if dropout > 0 else None,
    )
    return model, encoder, envs, buffer, action_rng, update_rng


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------


class TestTrainConfig:
    def test_defaults_are_consistent(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 3 * 2048
        assert cfg.minibatch_size == 3 * 2048 // 32
        assert cfg.target_kl is None

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"gamma": 0.0},
            {"gamma": 1.5},
            {"gae_lambda": -0.1},
            {"clip_coef": 0.0},
            {"vf_coef": -1.0},
            {"learning_rate": 0.0},
            {"update_epochs": 0},
            {"num_minibatches": 0},
            {"max_grad_norm": 0.0},
            {"total_timesteps": 0},
            {"target_kl": 0.0},
            {"rpo_alpha": -0.1},
            {"num_envs": 0},
            {"num_steps": 0},
            {"dropout": 1.0},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_minibatch_must_divide_batch(self):
        with pytest.raises(ValueError, match="divide"):
            TrainConfig(num_envs=3, num_steps=10, num_minibatches=7)


# ---------------------------------------------------------------------------
# RolloutBuffer
# ---------------------------------------------------------------------------


class TestRolloutBuffer:
    def slice(self, n_envs=2, obs_dim=6):
        return dict(
            obs=np.zeros((n_envs, obs_dim)),
            actions=np.zeros((n_envs, ACTION_DIM)),
            log_probs=np.zeros(n_envs),
            rewards=np.zeros(n_envs),
            values=np.zeros(n_envs),
            dones=np.zeros(n_envs),
        )

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            RolloutBuffer(0, 1, 6)

    def test_fills_then_rejects_overflow(self):
        buf = RolloutBuffer(3, 2, 6)
        for _ in range(3):
            buf.add(**self.slice())
        assert buf.full
        with pytest.raises(RuntimeError, match="full"):
            buf.add(**self.slice())
        buf.clear()
        assert not buf.full
        buf.add(**self.slice())

    def test_mask_storage_consistency(self):
        masked = RolloutBuffer(2, 2, 6, mask_shape=(2, 3, 64))
        with pytest.raises(ValueError, match="none were given"):
            masked.add(**self.slice())
        bare = RolloutBuffer(2, 2, 6)
        with pytest.raises(ValueError, match="without dropout mask storage"):
            bare.add(**self.slice(), masks=np.ones((2, 2, 3, 64)))

    def test_stores_shifts_and_masks(self):
        buf = RolloutBuffer(1, 2, 6, mask_shape=(2, 3, 64))
        shifts = np.full((2, ACTION_DIM), 0.25)
        masks = np.full((2, 2, 3, 64), 1.0 / 0.9)
        buf.add(**self.slice(), rpo_shifts=shifts, masks=masks)
        np.testing.assert_array_equal(buf.rpo_shifts[0], shifts)
        np.testing.assert_array_equal(buf.masks[0], masks)


# ---------------------------------------------------------------------------
# Reward normalization
# ---------------------------------------------------------------------------


class TestRewardNormalizer:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"gamma": 0.0},
            {"gamma": 1.5},
            {"num_envs": 0},
            {"clip": 0.0},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        base = dict(gamma=0.99, num_envs=2)
        base.update(kwargs)
        with pytest.raises(ValueError):
            RewardNormalizer(**base)

    def test_first_step_hand_case(self):
        # One env, reward 2: the accumulator becomes 2 and the running
        # variance merges the {mean 0, var 1, count 1e-4} prior with the
        # single sample {mean 2, var 0, count 1}.
        norm = RewardNormalizer(0.99, 1, clip=1000.0)
        out = norm.scale(np.array([2.0]), np.array([0.0]))
        total = 1e-4 + 1.0
        var = (1.0 * 1e-4 + 0.0 + 4.0 * (1e-4 * 1.0 / total)) / total
        assert norm.var == pytest.approx(var, rel=1e-12)
        assert out[0] == pytest.approx(2.0 / math.sqrt(var + 1e-8), rel=1e-12)

    def test_variance_matches_accumulator_history(self):
        # Streaming variance must agree with a plain np.var over every
        # discounted-accumulator sample ever produced (prior washes out).
        rng = make_rng(5)
        norm = RewardNormalizer(0.9, 4)
        history = []
        acc = np.zeros(4)
        for _ in range(2000):
            rewards = rng.standard_normal(4)
            dones = (rng.random(4) < 0.05).astype(float)
            acc = acc * 0.9 + rewards
            history.append(acc.copy())
            norm.scale(rewards, dones)
            acc[dones.astype(bool)] = 0.0
        assert norm.var == pytest.approx(np.var(np.concatenate(history)), rel=1e-3)

    def test_large_rewards_clip_at_bound(self):
        norm = RewardNormalizer(0.99, 1)
        assert norm.scale(np.array([1e6]), np.array([0.0]))[0] == 10.0
        fresh = RewardNormalizer(0.99, 1)
        assert fresh.scale(np.array([-1e6]), np.array([0.0]))[0] == -10.0

    def test_accumulators_reset_on_done(self):
        norm = RewardNormalizer(0.5, 2)
        norm.scale(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(norm.accumulators, [0.0, 1.0])
        norm.scale(np.array([1.0, 1.0]), np.array([0.0, 0.0]))
        np.testing.assert_array_equal(norm.accumulators, [1.0, 1.5])

    def test_deterministic_for_identical_streams(self):
        a = RewardNormalizer(0.99, 3)
        b = RewardNormalizer(0.99, 3)
        rng = make_rng(9)
        for _ in range(50):
            rewards = rng.standard_normal(3) * 40.0
            dones = (rng.random(3) < 0.1).astype(float)
            np.testing.assert_array_equal(
                a.scale(rewards, dones), b.scale(rewards, dones)
            )

    def test_input_rewards_not_mutated(self):
        norm = RewardNormalizer(0.99, 2)
        rewards = np.array([3.0, -4.0])
        norm.scale(rewards, np.array([0.0, 1.0]))
        np.testing.assert_array_equal(rewards, [3.0, -4.0])

    def test_shape_mismatch_rejected(self):
        norm = RewardNormalizer(0.99, 2)
        with pytest.raises(ValueError, match="rewards"):
            norm.scale(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------


class TestComputeGae:
    def build(self, rewards, values, dones):
        T = len(rewards)
        buf = RolloutBuffer(T, 1, 1)
        for t in range(T):
            buf.add(
                obs=np.zeros((1, 1)),
                actions=np.zeros((1, ACTION_DIM)),
                log_probs=np.zeros(1),
                rewards=np.array([rewards[t]], dtype=float),
                values=np.array([values[t]], dtype=float),
                dones=np.array([dones[t]], dtype=float),
            )
        return buf

    def test_hand_case(self):
        buf = self.build([1, 2, 3], [0.5, 1.0, 1.5], [0, 0, 1])
        adv, ret = compute_gae(buf, np.array([999.0]), gamma=0.5, gae_lambda=1.0)
        np.testing.assert_allclose(adv[:, 0], [2.25, 2.5, 1.5], atol=1e-12)
        np.testing.assert_allclose(ret[:, 0], [2.75, 3.5, 3.0], atol=1e-12)

    def test_lambda_1_equals_monte_carlo_on_terminated_episodes(self):
        rng = make_rng(41)
        gamma = 0.9
        for _ in range(20):
            T = 10
            rewards = rng.normal(size=T)
            values = rng.normal(size=T)
            dones = np.zeros(T)
            # random internal episode breaks plus a terminal last step
            for cut in rng.choice(T - 1, size=2, replace=False):
                dones[cut] = 1.0
            dones[T - 1] = 1.0
            buf = self.build(rewards, values, dones)
            adv, _ = compute_gae(buf, np.zeros(1), gamma, 1.0)
            # brute force per episode segment
            start = 0
            for t in range(T):
                if dones[t] == 1.0:
                    for i in range(start, t + 1):
                        g = sum(
                            gamma ** (j - i) * rewards[j]
                            for j in range(i, t + 1)
                        )
                        assert adv[i, 0] == pytest.approx(
                            g - values[i], abs=1e-10
                        )
                    start = t + 1

    def test_gamma_zero_is_myopic(self):
        buf = self.build([1.0, -2.0, 0.5], [0.3, 0.1, -0.4], [0, 0, 1])
        adv, _ = compute_gae(buf, np.zeros(1), gamma=1e-12, gae_lambda=0.95)
        np.testing.assert_allclose(
            adv[:, 0], [1.0 - 0.3, -2.0 - 0.1, 0.5 + 0.4], atol=1e-9
        )

    def test_zero_field(self):
        buf = self.build([0, 0, 0], [0, 0, 0], [0, 0, 0])
        adv, ret = compute_gae(buf, np.zeros(1), 0.99, 0.95)
        np.testing.assert_array_equal(adv, 0.0)
        np.testing.assert_array_equal(ret, 0.0)

    def test_bootstrap_masked_by_terminal_flag(self):
        term = self.build([1.0], [0.0], [1.0])
        cont = self.build([1.0], [0.0], [0.0])
        adv_term, _ = compute_gae(term, np.array([100.0]), 0.9, 0.95)
        adv_cont, _ = compute_gae(cont, np.array([100.0]), 0.9, 0.95)
        assert adv_term[0, 0] == pytest.approx(1.0)
        assert adv_cont[0, 0] == pytest.approx(1.0 + 0.9 * 100.0)

    def test_requires_full_buffer(self):
        buf = RolloutBuffer(2, 1, 1)
        with pytest.raises(ValueError, match="full"):
            compute_gae(buf, np.zeros(1), 0.99, 0.95)


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


class TestCollectRollout:
    def test_single_transition_capacity(self):
        model, encoder, envs, _, action_rng, _ = make_parts(
            num_envs=1, num_steps=1
        )
        buf = RolloutBuffer(1, 1, encoder.dim, mask_shape=model.mask_shape)
        stats = collect_rollout(envs[:1], model, encoder, buf, action_rng)
        assert buf.full and buf.pos == 1
        assert stats.last_values.shape == (1,)

    def test_stored_logprobs_replay_exactly(self):
        model, encoder, envs, buf, action_rng, _ = make_parts(seed=3)
        collect_rollout(envs, model, encoder, buf, action_rng)
        batch = buf.num_steps * buf.num_envs
        logp, _, _ = model.evaluate_actions(
            torch.from_numpy(buf.obs.reshape(batch, -1)),
            torch.from_numpy(buf.actions.reshape(batch, ACTION_DIM)),
            rpo_shifts=buf.rpo_shifts.reshape(batch, ACTION_DIM),
            dropout_masks=buf.masks.reshape((batch,) + buf.masks.shape[2:]),
        )
        np.testing.assert_allclose(
            logp.detach().numpy(), buf.log_probs.reshape(batch), atol=1e-12
        )

    def test_three_step_episode_with_no_entrants_returns_minus_3(self):
        env_config = EnvConfig(n_individuals=1, t_max=3, seed=123)
        model, encoder, envs, _, action_rng, _ = make_parts(
            dropout=0.0, rpo=0.0, env_config=env_config, num_envs=1,
            num_steps=8,
        )
        with torch.no_grad():
            for _, p in model.parameter_manifest():
                p.zero_()  # mean (0, 0): the leader holds still
        buf = RolloutBuffer(8, 1, encoder.dim)
        stats = collect_rollout(envs[:1], model, encoder, buf, action_rng)
        returns = [rec.episode_return for rec in stats.episodes]
        assert len(returns) >= 2
        assert all(r == -3.0 for r in returns)
        assert all(rec.length == 3 for rec in stats.episodes)

    def test_episode_records_and_autoreset(self):
        env_config = EnvConfig(n_individuals=2, t_max=10)
        model, encoder, envs, _, action_rng, _ = make_parts(
            env_config=env_config, num_envs=2, num_steps=25
        )
        buf = RolloutBuffer(25, 2, encoder.dim, mask_shape=model.mask_shape)
        stats = collect_rollout(envs, model, encoder, buf, action_rng)
        assert len(stats.episodes) >= 4  # 25 steps, t_max 10, 2 envs
        for rec in stats.episodes:
            assert rec.env_index in (0, 1)
            assert 0 <= rec.step_index < 25
            assert 1 <= rec.length <= 10
        # envs were auto-reset: all are mid- (not post-) episode
        for env in envs:
            assert env.state.t < 10

    def test_env_count_mismatch_rejected(self):
        model, encoder, envs, buf, action_rng, _ = make_parts()
        with pytest.raises(ValueError, match="envs"):
            collect_rollout(envs[:1], model, encoder, buf, action_rng)

    def test_encoder_dim_mismatch_rejected(self):
        model, _, envs, buf, action_rng, _ = make_parts()
        ff = make_encoder("ff", TINY_ENV)
        with pytest.raises(ValueError, match="dim"):
            collect_rollout(envs, model, ff, buf, action_rng)

    def test_ff_encoder_env_size_mismatch_rejected(self):
        env_config = EnvConfig(n_individuals=4, t_max=40)
        encoder = make_encoder("ff", env_config)
        model = ActorCritic(
            encoder.dim, dropout_rate=0.0, rpo_alpha=0.0, init_rng=make_rng(0)
        )
        envs = [EvacuationEnv(TINY_ENV, rng=make_rng(1))]
        buf = RolloutBuffer(4, 1, encoder.dim)
        with pytest.raises(ValueError, match="ff encoder"):
            collect_rollout(envs, model, encoder, buf, make_rng(2))

    def test_dropout_model_requires_mask_storage(self):
        model, encoder, envs, _, action_rng, _ = make_parts()
        bare = RolloutBuffer(32, 2, encoder.dim)
        with pytest.raises(ValueError, match="mask"):
            collect_rollout(envs, model, encoder, bare, action_rng)

    def test_deterministic_given_seeds(self):
        a = make_parts(seed=11)
        b = make_parts(seed=11)
        stats_a = collect_rollout(a[2], a[0], a[1], a[3], a[4])
        stats_b = collect_rollout(b[2], b[0], b[1], b[3], b[4])
        np.testing.assert_array_equal(a[3].obs, b[3].obs)
        np.testing.assert_array_equal(a[3].actions, b[3].actions)
        np.testing.assert_array_equal(a[3].log_probs, b[3].log_probs)
        np.testing.assert_array_equal(a[3].masks, b[3].masks)
        np.testing.assert_array_equal(stats_a.last_values, stats_b.last_values)

    def test_reward_normalizer_scales_buffer_not_episode_records(self):
        raw = make_parts(seed=7)
        stats_raw = collect_rollout(raw[2], raw[0], raw[1], raw[3], raw[4])
        scl = make_parts(seed=7)
        stats_scl = collect_rollout(
            scl[2], scl[0], scl[1], scl[3], scl[4],
            reward_normalizer=RewardNormalizer(0.99, 2),
        )
        # scaling never touches the action stream or the env dynamics
        np.testing.assert_array_equal(raw[3].actions, scl[3].actions)
        np.testing.assert_array_equal(raw[3].dones, scl[3].dones)
        # episode statistics keep the raw environment returns
        assert [(r.episode_return, r.length) for r in stats_raw.episodes] == [
            (r.episode_return, r.length) for r in stats_scl.episodes
        ]
        # buffer rewards follow the documented accumulate/scale/reset rule
        assert not np.allclose(raw[3].rewards, scl[3].rewards)
        ref = RewardNormalizer(0.99, 2)
        expected = np.stack(
            [
                ref.scale(raw[3].rewards[t], raw[3].dones[t])
                for t in range(raw[3].num_steps)
            ]
        )
        np.testing.assert_array_equal(scl[3].rewards, expected)


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


def run_one_collection(seed=0, dropout=0.1, rpo=0.5, **cfg_overrides):
    cfg = tiny_train_config(dropout=dropout, rpo_alpha=rpo, **cfg_overrides)
    model, encoder, envs, buf, action_rng, update_rng = make_parts(
        seed=seed, dropout=dropout, rpo=rpo,
        num_envs=cfg.num_envs, num_steps=cfg.num_steps,
    )
    stats = collect_rollout(envs, model, encoder, buf, action_rng)
    adv, ret = compute_gae(buf, stats.last_values, cfg.gamma, cfg.gae_lambda)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, eps=1e-5)
    return model, opt, buf, adv, ret, cfg, update_rng


class TestUpdate:
    def test_first_minibatch_ratio_is_one_at_full_config(self):
        """Stored stochasticity is replayed, so the first re-evaluation
        reproduces the stored log-probs exactly."""
        model, opt, buf, adv, ret, cfg, rng = run_one_collection()
        diag = update(model, opt, buf, adv, ret, cfg, rng)
        assert diag["ratio_dev_first_minibatch"] < 1e-6

    def test_first_minibatch_ratio_is_one_without_noise_sources(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection(
            dropout=0.0, rpo=0.0
        )
        diag = update(model, opt, buf, adv, ret, cfg, rng)
        assert diag["ratio_dev_first_minibatch"] < 1e-6

    def test_later_epochs_draw_fresh_masks_and_perturbations(self):
        """Documented rng order: per epoch one permutation; per minibatch of
        epochs after the first, a dropout-mask block then a uniform
        perturbation block."""
        model, opt, buf, adv, ret, cfg, rng = run_one_collection(seed=4)
        shadow = np.random.Generator(np.random.PCG64())
        shadow.bit_generator.state = rng.bit_generator.state
        update(model, opt, buf, adv, ret, cfg, rng)
        batch = cfg.num_envs * cfg.num_steps
        mb = batch // cfg.num_minibatches
        for epoch in range(cfg.update_epochs):
            shadow.permutation(batch)
            if epoch == 0:
                continue
            for _ in range(cfg.num_minibatches):
                model.draw_dropout_masks(shadow, mb)
                shadow.uniform(-model.rpo_alpha, model.rpo_alpha, (mb, ACTION_DIM))
        assert rng.bit_generator.state == shadow.bit_generator.state

    def test_epoch_zero_replays_stored_shifts_later_epochs_do_not(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection(seed=6)
        batch = cfg.num_envs * cfg.num_steps
        stored = {
            tuple(row) for row in buf.rpo_shifts.reshape(batch, ACTION_DIM)
        }
        seen: list[np.ndarray] = []
        original = model.evaluate_actions

        def recording(obs, actions, rpo_shifts=None, dropout_masks=None):
            seen.append(np.asarray(rpo_shifts, dtype=np.float64).copy())
            return original(obs, actions, rpo_shifts=rpo_shifts,
                            dropout_masks=dropout_masks)

        model.evaluate_actions = recording
        try:
            update(model, opt, buf, adv, ret, cfg, rng)
        finally:
            model.evaluate_actions = original
        per_epoch = cfg.num_minibatches
        assert len(seen) == cfg.update_epochs * per_epoch
        epoch0 = np.concatenate(seen[:per_epoch])
        assert all(tuple(row) in stored for row in epoch0)
        epoch1 = np.concatenate(seen[per_epoch : 2 * per_epoch])
        assert not any(tuple(row) in stored for row in epoch1)
        assert np.all(np.abs(epoch1) <= model.rpo_alpha)

    def test_zero_advantages_leave_actor_untouched(self):
        model, opt, buf, _, ret, cfg, rng = run_one_collection(
            norm_adv=False
        )
        actor_before = [
            p.detach().clone()
            for n, p in model.parameter_manifest()
            if n.startswith("actor") or n == "log_std"
        ]
        critic_before = [
            p.detach().clone()
            for n, p in model.parameter_manifest()
            if n.startswith("critic")
        ]
        diag = update(
            model, opt, buf, np.zeros_like(buf.rewards), ret, cfg, rng
        )
        assert diag["policy_loss"] == 0.0
        actor_after = [
            p for n, p in model.parameter_manifest()
            if n.startswith("actor") or n == "log_std"
        ]
        critic_after = [
            p for n, p in model.parameter_manifest() if n.startswith("critic")
        ]
        for before, after in zip(actor_before, actor_after):
            assert torch.equal(before, after)
        assert any(
            not torch.equal(b, a)
            for b, a in zip(critic_before, critic_after)
        )

    def test_value_loss_decreases_over_passes(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection(
            dropout=0.0, rpo=0.0, update_epochs=1, num_minibatches=1,
            learning_rate=1e-3, clip_vloss=False,
        )
        first = update(model, opt, buf, adv, ret, cfg, rng)
        second = update(model, opt, buf, adv, ret, cfg, rng)
        assert second["value_loss"] < first["value_loss"]

    def test_non_finite_rewards_raise_diverged(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection()
        adv = adv.copy()
        adv[0, 0] = math.nan
        with pytest.raises(TrainingDiverged):
            update(model, opt, buf, adv, ret, cfg, rng)

    def test_requires_full_buffer(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection()
        buf.clear()
        with pytest.raises(ValueError, match="full"):
            update(model, opt, buf, adv, ret, cfg, rng)

    def test_target_kl_stops_after_first_epoch(self):
        a = run_one_collection(seed=21, update_epochs=5, target_kl=1e-12)
        b = run_one_collection(seed=21, update_epochs=1)
        update(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
        update(b[0], b[1], b[2], b[3], b[4], b[5], b[6])
        for (_, pa), (_, pb) in zip(
            a[0].parameter_manifest(), b[0].parameter_manifest()
        ):
            assert torch.equal(pa, pb)

    def test_diagnostics_keys(self):
        model, opt, buf, adv, ret, cfg, rng = run_one_collection()
        diag = update(model, opt, buf, adv, ret, cfg, rng)
        assert set(diag) == {
            "policy_loss", "value_loss", "entropy", "approx_kl",
            "clip_fraction", "ratio_dev_first_minibatch",
        }
        for v in diag.values():
            assert math.isfinite(v)


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


class TestTrain:
    def run_tiny(self, tmp_path, seed=0, subdir="run", **cfg_overrides):
        cfg = tiny_train_config(**cfg_overrides)
        return train(
            TINY_ENV,
            cfg,
            encoder_kind="grav",
            alpha=1.0,
            seed=seed,
            out_dir=tmp_path / subdir,
            checkpoint_interval=64,
            log_interval=0,
            manifest={"seed": seed, "encoder": "grav"},
        )

    def test_outputs_exist_with_documented_headers(self, tmp_path):
        result = self.run_tiny(tmp_path)
        assert result.metrics_path.exists()
        assert result.episodes_path.exists()
        assert (tmp_path / "run" / "manifest.yaml").exists()
        with open(result.metrics_path) as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == METRICS_FIELDS
        with open(result.episodes_path) as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == EPISODES_FIELDS
        final = tmp_path / "run" / "checkpoints" / "final.ckpt"
        assert final.exists()
        assert final in result.checkpoint_paths

    def test_single_update_budget(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=64)
        assert result.global_steps == 64
        with open(result.metrics_path) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 2  # header + one update

    def test_reward_normalization_active_every_step(self, tmp_path, monkeypatch):
        calls = []
        original = RewardNormalizer.scale

        def recording(self, rewards, dones):
            out = original(self, rewards, dones)
            calls.append((rewards.copy(), out.copy()))
            return out

        monkeypatch.setattr(RewardNormalizer, "scale", recording)
        self.run_tiny(tmp_path)  # 128 steps = 2 updates x 32 steps
        assert len(calls) == 64
        assert any(not np.array_equal(r, o) for r, o in calls)

    def test_learning_rate_anneals_linearly(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=256)  # 4 updates
        with open(result.metrics_path) as fh:
            reader = csv.DictReader(fh)
            lrs = [float(row["learning_rate"]) for row in reader]
        base = TrainConfig().learning_rate
        expected = [base * (1 - k / 4) for k in range(4)]
        np.testing.assert_allclose(lrs, expected, rtol=1e-12)
        assert lrs[2] == pytest.approx(base / 2)

    def test_anneal_disabled_keeps_lr_constant(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=256, anneal_lr=False)
        with open(result.metrics_path) as fh:
            reader = csv.DictReader(fh)
            lrs = {float(row["learning_rate"]) for row in reader}
        assert lrs == {TrainConfig().learning_rate}

    def test_periodic_and_final_checkpoints(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=256)
        names = sorted(p.name for p in result.checkpoint_paths)
        assert "final.ckpt" in names
        assert any(n.startswith("step_") for n in names)

    def test_rerun_is_byte_identical(self, tmp_path):
        r1 = self.run_tiny(tmp_path, seed=5, subdir="a")
        r2 = self.run_tiny(tmp_path, seed=5, subdir="b")
        assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()
        assert r1.episodes_path.read_bytes() == r2.episodes_path.read_bytes()
        c1 = (tmp_path / "a" / "checkpoints" / "final.ckpt").read_bytes()
        c2 = (tmp_path / "b" / "checkpoints" / "final.ckpt").read_bytes()
        assert c1 == c2

    def test_different_seed_changes_outputs(self, tmp_path):
        r1 = self.run_tiny(tmp_path, seed=5, subdir="a")
        r2 = self.run_tiny(tmp_path, seed=6, subdir="b")
        assert r1.metrics_path.read_bytes() != r2.metrics_path.read_bytes()

    def test_ema_column_is_function_of_raw_returns(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=256)
        with open(result.episodes_path) as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        raw = np.array([float(r["episode_return"]) for r in rows])
        logged = np.array([float(r["ema_return"]) for r in rows])
        np.testing.assert_allclose(logged, ema(raw, 0.99), rtol=1e-12)
        assert result.final_ema_return == pytest.approx(logged[-1])

    def test_episode_count_matches_log(self, tmp_path):
        result = self.run_tiny(tmp_path, total_timesteps=256)
        with open(result.episodes_path) as fh:
            n_rows = sum(1 for _ in fh) - 1
        assert result.n_episodes == n_rows

    def test_budget_smaller_than_rollout_rejected(self, tmp_path):
        cfg = tiny_train_config(total_timesteps=63)
        with pytest.raises(ValueError, match="smaller than"):
            train(TINY_ENV, cfg, seed=0, out_dir=tmp_path / "x")

    def test_bad_ema_smoothing_rejected(self, tmp_path):
        cfg = tiny_train_config()
        with pytest.raises(ValueError, match="ema_smoothing"):
            train(
                TINY_ENV, cfg, seed=0, out_dir=tmp_path / "x",
                ema_smoothing=1.0,
            )
