"""On-policy training loop: rollouts, GAE, clipped-surrogate updates.

The loop alternates fixed-length rollout collection over a handful of
auto-resetting environments with minibatch optimization of the clipped
surrogate objective plus a (optionally clipped) value loss, advantages from
generalized advantage estimation, linear learning-rate annealing, and
periodic checkpoints. Episode returns and per-update diagnostics stream to
CSV logs.

Rewards entering the optimizer are scaled by the running standard deviation
of the per-environment discounted return (and clipped to +-10), the
convention of the training recipe this loop follows. The raw step penalty
here is so much larger than the per-episode entry bonuses that unscaled
value targets are hundreds of reward units; their loss gradient then
consumes the entire shared gradient-norm clip and freezes the actor.
Episode returns in logs and statistics are always the raw environment
rewards.

Randomness is organized as named PCG64 streams spawned from the run seed:
weight init, action sampling (dropout masks, Gaussian draws and mean
perturbations, consumed in a fixed order per step), update-phase draws
(minibatch shuffles, plus fresh masks and perturbations for epochs after
the first), and one simulation stream per environment. Dropout masks and
mean perturbations are recorded with each transition and replayed on the
first optimization epoch, so its probability ratios reflect parameter
change only; later epochs re-jitter the means, which sustains exploration.
Replaying the same seed replays the run bit-for-bit on a single worker.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .csvio import fmt_float
from .encoding import Encoder, make_encoder
from .environment import EnvConfig, EvacuationEnv
from .geometry import spawn_rngs
from .policy import ACTION_DIM, ActorCritic, save_checkpoint

__all__ = [
    "TrainConfig",
    "RolloutBuffer",
    "RolloutStats",
    "EpisodeRecord",
    "RewardNormalizer",
    "TrainingDiverged",
    "TrainResult",
    "collect_rollout",
    "compute_gae",
    "update",
    "train",
    "METRICS_FIELDS",
    "EPISODES_FIELDS",
]

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
ADAM_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters (defaults are the reference recipe)."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    learning_rate: float = 5e-4
    anneal_lr: bool = True
    update_epochs: int = 10
    num_minibatches: int = 32
    max_grad_norm: float = 0.5
    norm_adv: bool = True
    clip_vloss: bool = True
    total_timesteps: int = 3_000_000
    target_kl: float | None = None
    rpo_alpha: float = 0.5
    num_envs: int = 3
    num_steps: int = 2048
    dropout: float = 0.1
    deterministic: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_coef <= 0.0:
            raise ValueError(f"clip_coef must be positive, got {self.clip_coef}")
        if self.vf_coef < 0.0 or self.ent_coef < 0.0:
            raise ValueError("vf_coef and ent_coef must be >= 0")
        if self.learning_rate <= 0.0:
            raise ValueError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        if self.update_epochs < 1 or self.num_minibatches < 1:
            raise ValueError("update_epochs and num_minibatches must be >= 1")
        if self.max_grad_norm <= 0.0:
            raise ValueError(
                f"max_grad_norm must be positive, got {self.max_grad_norm}"
            )
        if self.total_timesteps < 1:
            raise ValueError(
                f"total_timesteps must be >= 1, got {self.total_timesteps}"
            )
        if self.target_kl is not None and self.target_kl <= 0.0:
            raise ValueError(f"target_kl must be positive or null, got {self.target_kl}")
        if self.rpo_alpha < 0.0:
            raise ValueError(f"rpo_alpha must be >= 0, got {self.rpo_alpha}")
        if self.num_envs < 1 or self.num_steps < 1:
            raise ValueError("num_envs and num_steps must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size % self.num_minibatches != 0:
            raise ValueError(
                f"num_minibatches ({self.num_minibatches}) must divide the "
                f"rollout size ({self.batch_size})"
            )

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.num_steps

    @property
    def minibatch_size(self) -> int:
        return self.batch_size // self.num_minibatches


class TrainingDiverged(RuntimeError):
    """Non-finite losses or parameters; carries last diagnostics."""


class RewardNormalizer:
    """Scales rewards by the running std of the discounted return.

    Each environment keeps a discounted accumulator G <- gamma * G + r; a
    shared running variance over those accumulators supplies the scale, and
    scaled rewards are clipped to +-clip. Accumulators reset when their
    episode ends. The mapping is a deterministic function of the reward
    stream (no randomness), so seeded runs stay bit-reproducible.
    """

    def __init__(
        self, gamma: float, num_envs: int, clip: float = 10.0, eps: float = 1e-8
    ) -> None:
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {gamma}")
        if num_envs < 1:
            raise ValueError(f"num_envs must be >= 1, got {num_envs}")
        if clip <= 0.0:
            raise ValueError(f"clip must be positive, got {clip}")
        self.gamma = float(gamma)
        self.clip = float(clip)
        self.eps = float(eps)
        self.accumulators = np.zeros(num_envs)
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def _update(self, batch: np.ndarray) -> None:
        batch_mean = float(batch.mean())
        batch_var = float(batch.var())
        batch_count = batch.size
        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean += delta * batch_count / total
        m_a = self.var * self.count
        m_b = batch_var * batch_count
        self.var = (m_a + m_b + delta**2 * self.count * batch_count / total) / total
        self.count = total

    def scale(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        """Scaled copy of one (num_envs,) reward slice; updates the state."""
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != self.accumulators.shape:
            raise ValueError(
                f"expected {self.accumulators.shape[0]} rewards, got {rewards.shape}"
            )
        self.accumulators = self.accumulators * self.gamma + rewards
        self._update(self.accumulators)
        scaled = np.clip(
            rewards / math.sqrt(self.var + self.eps), -self.clip, self.clip
        )
        self.accumulators[np.asarray(dones, dtype=bool)] = 0.0
        return scaled


class RolloutBuffer:
    """Fixed-length (num_steps, num_envs) transition storage.

    Besides the usual transition fields it records the per-sample
    stochasticity of the collection pass — the mean perturbation added for
    each stored log-prob and, when mask_shape is given, the dropout
    multiplier arrays — so the optimizer can replay the exact distribution
    each action was scored under.
    """

    def __init__(
        self,
        num_steps: int,
        num_envs: int,
        obs_dim: int,
        mask_shape: tuple[int, ...] | None = None,
    ) -> None:
        if num_steps < 1 or num_envs < 1 or obs_dim < 1:
            raise ValueError("buffer dimensions must be >= 1")
        self.num_steps = num_steps
        self.num_envs = num_envs
        self.obs_dim = obs_dim
        self.obs = np.zeros((num_steps, num_envs, obs_dim))
        self.actions = np.zeros((num_steps, num_envs, ACTION_DIM))
        self.log_probs = np.zeros((num_steps, num_envs))
        self.rewards = np.zeros((num_steps, num_envs))
        self.values = np.zeros((num_steps, num_envs))
        self.dones = np.zeros((num_steps, num_envs))
        self.rpo_shifts = np.zeros((num_steps, num_envs, ACTION_DIM))
        self.masks = (
            np.zeros((num_steps, num_envs) + tuple(mask_shape))
            if mask_shape is not None
            else None
        )
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.num_steps

    def clear(self) -> None:
        self.pos = 0

    def add(
        self,
        obs: np.ndarray,
        actions: np.ndarray,
        log_probs: np.ndarray,
        rewards: np.ndarray,
        values: np.ndarray,
        dones: np.ndarray,
        rpo_shifts: np.ndarray | None = None,
        masks: np.ndarray | None = None,
    ) -> None:
        """Store one time slice across all environments."""
        if self.full:
            raise RuntimeError("rollout buffer is full")
        if self.masks is not None and masks is None:
            raise ValueError("buffer stores dropout masks but none were given")
        if self.masks is None and masks is not None:
            raise ValueError("buffer was built without dropout mask storage")
        t = self.pos
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        if rpo_shifts is not None:
            self.rpo_shifts[t] = rpo_shifts
        if masks is not None:
            self.masks[t] = masks
        self.pos = t + 1


@dataclass
class EpisodeRecord:
    """A finished episode observed during collection."""

    env_index: int
    step_index: int  # buffer row at which the episode ended
    episode_return: float
    length: int


@dataclass
class RolloutStats:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    last_values: np.ndarray | None = None  # bootstrap values of post-rollout states


def _batch_logp(actions: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    z = (actions - means) / stds
    return (-0.5 * z * z - np.log(stds) - 0.5 * _LOG_2PI).sum(-1)


def collect_rollout(
    envs: list[EvacuationEnv],
    model: ActorCritic,
    encoder: Encoder,
    buffer: RolloutBuffer,
    action_rng: np.random.Generator,
    reward_normalizer: RewardNormalizer | None = None,
) -> RolloutStats:
    """Fill the buffer with one fixed-length rollout phase.

    Environments auto-reset when an episode ends; finished episodes are
    recorded with their undiscounted *raw* return and length. Per time step
    the action stream is consumed in a fixed order: one dropout-mask block
    (when the model has dropout), one (num_envs, 2) Gaussian block for the
    actions, then one (num_envs, 2) uniform block for the log-prob means
    (when rpo_alpha > 0). Masks and mean perturbations are stored alongside
    each transition for replay on the first optimization epoch; one extra
    mask block is consumed for the bootstrap values of the post-rollout
    states. When a reward normalizer is given the buffer stores scaled
    rewards (episode statistics stay raw).
    """
    if len(envs) != buffer.num_envs:
        raise ValueError(f"expected {buffer.num_envs} envs, got {len(envs)}")
    if encoder.dim != model.input_dim:
        raise ValueError(
            f"encoder dim {encoder.dim} does not match policy input "
            f"{model.input_dim}"
        )
    if model.dropout_rate > 0.0 and buffer.masks is None:
        raise ValueError(
            "model has dropout but the buffer has no mask storage; build the "
            "buffer with mask_shape=model.mask_shape"
        )
    for env in envs:
        if encoder.kind == "ff" and env.config.n_individuals != encoder.n_individuals:
            raise ValueError(
                f"ff encoder built for N={encoder.n_individuals} cannot observe "
                f"an env with N={env.config.n_individuals}"
            )
        if env.state is None:
            env.reset()

    buffer.clear()
    stats = RolloutStats()
    n_envs = len(envs)
    rpo_alpha = model.rpo_alpha
    rewards = np.empty(n_envs)
    dones = np.empty(n_envs)
    for step_index in range(buffer.num_steps):
        obs = np.stack([encoder(env.state) for env in envs])
        masks = model.draw_dropout_masks(action_rng, n_envs)
        with torch.no_grad():
            mean_t, log_std_t, value_t = model.forward(
                torch.from_numpy(obs),
                actor_masks=None if masks is None else masks[:, 0],
                critic_masks=None if masks is None else masks[:, 1],
            )
        means = mean_t.numpy()
        stds = np.exp(log_std_t.detach().numpy())
        values = value_t.numpy()
        actions = means + stds * action_rng.standard_normal((n_envs, ACTION_DIM))
        if rpo_alpha > 0.0:
            shifts = action_rng.uniform(-rpo_alpha, rpo_alpha, (n_envs, ACTION_DIM))
        else:
            shifts = np.zeros((n_envs, ACTION_DIM))
        log_probs = _batch_logp(actions, means + shifts, stds)
        for i, env in enumerate(envs):
            outcome = env.step(actions[i])
            rewards[i] = outcome.reward
            done = outcome.terminated or outcome.truncated
            dones[i] = 1.0 if done else 0.0
            if done:
                ep = outcome.info["episode"]
                stats.episodes.append(
                    EpisodeRecord(
                        env_index=i,
                        step_index=step_index,
                        episode_return=ep["r"],
                        length=ep["l"],
                    )
                )
                env.reset()
        if reward_normalizer is not None:
            stored_rewards = reward_normalizer.scale(rewards, dones)
        else:
            stored_rewards = rewards
        buffer.add(
            obs, actions, log_probs, stored_rewards, values, dones,
            rpo_shifts=shifts, masks=masks,
        )

    final_obs = np.stack([encoder(env.state) for env in envs])
    final_masks = model.draw_dropout_masks(action_rng, n_envs)
    with torch.no_grad():
        _, _, last_values = model.forward(
            torch.from_numpy(final_obs),
            actor_masks=None if final_masks is None else final_masks[:, 0],
            critic_masks=None if final_masks is None else final_masks[:, 1],
        )
    stats.last_values = last_values.numpy()
    return stats


def compute_gae(
    buffer: RolloutBuffer,
    last_values: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets, shape (T, E).

    done flags are stored at the step they occur, so the bootstrap beyond a
    terminal row is masked by that row's own flag and the recursion resets
    across episode boundaries.
    """
    if not buffer.full:
        raise ValueError("buffer must be full before GAE")
    T = buffer.num_steps
    advantages = np.zeros((T, buffer.num_envs))
    lastgaelam = np.zeros(buffer.num_envs)
    last_values = np.asarray(last_values, dtype=np.float64)
    for t in reversed(range(T)):
        nonterminal = 1.0 - buffer.dones[t]
        next_values = last_values if t == T - 1 else buffer.values[t + 1]
        delta = (
            buffer.rewards[t] + gamma * nonterminal * next_values - buffer.values[t]
        )
        lastgaelam = delta + gamma * gae_lambda * nonterminal * lastgaelam
        advantages[t] = lastgaelam
    returns = advantages + buffer.values
    return advantages, returns


def update(
    model: ActorCritic,
    optimizer: torch.optim.Optimizer,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> dict:
    """Optimize the clipped surrogate + value loss over shuffled minibatches.

    The first epoch replays the dropout masks and mean perturbations
    recorded in the buffer, so its first minibatch reproduces the stored
    log-probs exactly (probability ratios 1). Every later epoch draws fresh
    perturbations and masks per minibatch: re-evaluating actions under
    jittered means is what keeps the policy from collapsing onto a brittle
    deterministic optimum. rng is consumed in a fixed order — one shuffle
    permutation per epoch, then per minibatch of epochs after the first a
    dropout-mask block followed by a uniform perturbation block. Returns
    mean diagnostics across all minibatches plus the max |ratio - 1|
    observed on the first minibatch.
    """
    if not buffer.full:
        raise ValueError("buffer must be full before update")
    if model.dropout_rate > 0.0 and buffer.masks is None:
        raise ValueError(
            "model has dropout but the buffer carries no masks to replay"
        )
    batch = buffer.num_steps * buffer.num_envs
    b_obs = torch.from_numpy(buffer.obs.reshape(batch, buffer.obs_dim).copy())
    b_actions = torch.from_numpy(buffer.actions.reshape(batch, ACTION_DIM).copy())
    b_logprobs = torch.from_numpy(buffer.log_probs.reshape(batch).copy())
    b_values = torch.from_numpy(buffer.values.reshape(batch).copy())
    b_advantages = torch.from_numpy(np.asarray(advantages).reshape(batch).copy())
    b_returns = torch.from_numpy(np.asarray(returns).reshape(batch).copy())
    b_shifts = torch.from_numpy(buffer.rpo_shifts.reshape(batch, ACTION_DIM).copy())
    b_masks = (
        torch.from_numpy(
            buffer.masks.reshape((batch,) + buffer.masks.shape[2:]).copy()
        )
        if buffer.masks is not None
        else None
    )

    mb_size = batch // config.num_minibatches
    pg_losses: list[float] = []
    v_losses: list[float] = []
    entropies: list[float] = []
    approx_kls: list[float] = []
    clip_fracs: list[float] = []
    ratio_dev_first: float | None = None

    for epoch in range(config.update_epochs):
        perm = rng.permutation(batch)
        for start in range(0, batch, mb_size):
            idx = torch.from_numpy(perm[start : start + mb_size].copy())
            mb_adv = b_advantages[idx]
            if config.norm_adv:
                mb_adv = (mb_adv - mb_adv.mean()) / (mb_adv.std() + 1e-8)

            if epoch == 0:
                mb_shifts = b_shifts[idx]
                mb_masks = None if b_masks is None else b_masks[idx]
            else:
                mb_masks = model.draw_dropout_masks(rng, len(idx))
                if model.rpo_alpha > 0.0:
                    mb_shifts = torch.from_numpy(
                        rng.uniform(
                            -model.rpo_alpha, model.rpo_alpha, (len(idx), ACTION_DIM)
                        )
                    )
                else:
                    mb_shifts = b_shifts[idx]

            new_logprob, entropy, new_value = model.evaluate_actions(
                b_obs[idx],
                b_actions[idx],
                rpo_shifts=mb_shifts,
                dropout_masks=mb_masks,
            )
            logratio = new_logprob - b_logprobs[idx]
            ratio = logratio.exp()
            with torch.no_grad():
                approx_kl = ((ratio - 1.0) - logratio).mean()
                clip_frac = (
                    ((ratio - 1.0).abs() > config.clip_coef).double().mean()
                )
                if ratio_dev_first is None:
                    ratio_dev_first = float((ratio - 1.0).abs().max())

            pg_loss1 = -mb_adv * ratio
            pg_loss2 = -mb_adv * torch.clamp(
                ratio, 1.0 - config.clip_coef, 1.0 + config.clip_coef
            )
            pg_loss = torch.max(pg_loss1, pg_loss2).mean()

            if config.clip_vloss:
                v_unclipped = (new_value - b_returns[idx]) ** 2
                v_clipped = b_values[idx] + torch.clamp(
                    new_value - b_values[idx], -config.clip_coef, config.clip_coef
                )
                v_loss = 0.5 * torch.max(
                    v_unclipped, (v_clipped - b_returns[idx]) ** 2
                ).mean()
            else:
                v_loss = 0.5 * ((new_value - b_returns[idx]) ** 2).mean()

            entropy_loss = entropy.mean()
            loss = pg_loss - config.ent_coef * entropy_loss + config.vf_coef * v_loss
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: "
                    f"policy={float(pg_loss.detach())!r} "
                    f"value={float(v_loss.detach())!r} "
                    f"entropy={float(entropy_loss.detach())!r}"
                )

            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()

            pg_losses.append(float(pg_loss.detach()))
            v_losses.append(float(v_loss.detach()))
            entropies.append(float(entropy_loss.detach()))
            approx_kls.append(float(approx_kl))
            clip_fracs.append(float(clip_frac))

        if config.target_kl is not None and approx_kls[-1] > config.target_kl:
            break

    for name, param in model.parameter_manifest():
        if not torch.all(torch.isfinite(param)):
            raise TrainingDiverged(f"non-finite parameter after update: {name}")

    return {
        "policy_loss": float(np.mean(pg_losses)),
        "value_loss": float(np.mean(v_losses)),
        "entropy": float(np.mean(entropies)),
        "approx_kl": float(np.mean(approx_kls)),
        "clip_fraction": float(np.mean(clip_fracs)),
        "ratio_dev_first_minibatch": float(ratio_dev_first),
    }


METRICS_FIELDS = (
    "global_step",
    "ema_return",
    "episode_return_mean",
    "episode_length_mean",
    "n_episodes",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "learning_rate",
)

EPISODES_FIELDS = ("global_step", "episode_return", "ema_return", "episode_length")


@dataclass
class TrainResult:
    out_dir: Path
    global_steps: int
    n_episodes: int
    final_ema_return: float
    mean_episode_length: float
    checkpoint_paths: list[Path]
    metrics_path: Path
    episodes_path: Path


def train(
    env_config: EnvConfig,
    train_config: TrainConfig,
    encoder_kind: str = "grav",
    alpha: float = 1.0,
    seed: int = 0,
    out_dir: str | Path = "run",
    checkpoint_interval: int = 500_000,
    log_interval: int = 1,
    ema_smoothing: float = 0.99,
    manifest: dict | None = None,
) -> TrainResult:
    """Run the full loop; writes metrics.csv, episodes.csv and checkpoints.

    Layout under out_dir: manifest.yaml (when a resolved-config dict is
    given), metrics.csv (one row per update), episodes.csv (one row per
    finished episode, with the running EMA of returns),
    checkpoints/step_<k>.ckpt at every checkpoint_interval global steps and
    checkpoints/final.ckpt for the finished model.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if not 0.0 < ema_smoothing < 1.0:
        raise ValueError(f"ema_smoothing must be in (0, 1), got {ema_smoothing}")

    if train_config.deterministic:
        torch.set_num_threads(1)

    num_updates = train_config.total_timesteps // train_config.batch_size
    if num_updates < 1:
        raise ValueError(
            f"total_timesteps ({train_config.total_timesteps}) is smaller than "
            f"one rollout ({train_config.batch_size})"
        )

    init_rng, action_rng, update_rng, *env_rngs = spawn_rngs(
        seed, 3 + train_config.num_envs
    )
    encoder = make_encoder(encoder_kind, env_config, alpha)
    model = ActorCritic(
        encoder.dim,
        dropout_rate=train_config.dropout,
        rpo_alpha=train_config.rpo_alpha,
        init_rng=init_rng,
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.learning_rate, eps=ADAM_EPS
    )
    envs = [EvacuationEnv(env_config, rng=r) for r in env_rngs]
    for env in envs:
        env.reset()
    buffer = RolloutBuffer(
        train_config.num_steps,
        train_config.num_envs,
        encoder.dim,
        mask_shape=model.mask_shape if train_config.dropout > 0.0 else None,
    )

    if manifest is not None:
        (out_dir / "manifest.yaml").write_text(
            yaml.safe_dump(manifest, sort_keys=True)
        )

    metrics_path = out_dir / "metrics.csv"
    episodes_path = out_dir / "episodes.csv"
    checkpoint_paths: list[Path] = []
    ema: float | None = None
    n_episodes = 0
    length_total = 0
    global_step = 0
    next_ckpt = checkpoint_interval if checkpoint_interval > 0 else None
    started = time.monotonic()
    reward_normalizer = RewardNormalizer(train_config.gamma, train_config.num_envs)

    with open(metrics_path, "w", newline="") as mfh, open(
        episodes_path, "w", newline=""
    ) as efh:
        metrics_writer = csv.writer(mfh)
        metrics_writer.writerow(METRICS_FIELDS)
        episodes_writer = csv.writer(efh)
        episodes_writer.writerow(EPISODES_FIELDS)

        for k in range(num_updates):
            if train_config.anneal_lr:
                lr_now = train_config.learning_rate * (1.0 - k / num_updates)
                optimizer.param_groups[0]["lr"] = lr_now
            else:
                lr_now = train_config.learning_rate

            stats = collect_rollout(
                envs, model, encoder, buffer, action_rng,
                reward_normalizer=reward_normalizer,
            )
            advantages, returns = compute_gae(
                buffer, stats.last_values, train_config.gamma, train_config.gae_lambda
            )
            diag = update(
                model, optimizer, buffer, advantages, returns, train_config, update_rng
            )

            ep_returns = []
            ep_lengths = []
            for rec in stats.episodes:
                end_step = global_step + (rec.step_index + 1) * train_config.num_envs
                if ema is None:
                    ema = rec.episode_return
                else:
                    ema = ema_smoothing * ema + (1.0 - ema_smoothing) * rec.episode_return
                episodes_writer.writerow(
                    [
                        end_step,
                        fmt_float(rec.episode_return),
                        fmt_float(ema),
                        rec.length,
                    ]
                )
                ep_returns.append(rec.episode_return)
                ep_lengths.append(rec.length)
                length_total += rec.length
            n_episodes += len(stats.episodes)
            global_step += train_config.batch_size

            metrics_writer.writerow(
                [
                    global_step,
                    fmt_float(ema if ema is not None else math.nan),
                    fmt_float(np.mean(ep_returns) if ep_returns else math.nan),
                    fmt_float(np.mean(ep_lengths) if ep_lengths else math.nan),
                    len(stats.episodes),
                    fmt_float(diag["policy_loss"]),
                    fmt_float(diag["value_loss"]),
                    fmt_float(diag["entropy"]),
                    fmt_float(diag["approx_kl"]),
                    fmt_float(diag["clip_fraction"]),
                    fmt_float(lr_now),
                ]
            )

            if next_ckpt is not None and global_step >= next_ckpt:
                path = ckpt_dir / f"step_{global_step}.ckpt"
                save_checkpoint(
                    path, model, encoder_kind, env_config.n_individuals, alpha
                )
                checkpoint_paths.append(path)
                while next_ckpt <= global_step:
                    next_ckpt += checkpoint_interval

            if log_interval > 0 and (k % log_interval == 0 or k == num_updates - 1):
                logger.info(
                    "update %d/%d step %d ema_return %s episodes %d elapsed %.0fs",
                    k + 1,
                    num_updates,
                    global_step,
                    "n/a" if ema is None else f"{ema:.2f}",
                    n_episodes,
                    time.monotonic() - started,
                )

    final_path = ckpt_dir / "final.ckpt"
    save_checkpoint(final_path, model, encoder_kind, env_config.n_individuals, alpha)
    checkpoint_paths.append(final_path)

    return TrainResult(
        out_dir=out_dir,
        global_steps=global_step,
        n_episodes=n_episodes,
        final_ema_return=ema if ema is not None else math.nan,
        mean_episode_length=(length_total / n_episodes) if n_episodes else math.nan,
        checkpoint_paths=checkpoint_paths,
        metrics_path=metrics_path,
        episodes_path=episodes_path,
    )
