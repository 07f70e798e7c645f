"""Gaussian actor-critic for the leader.

Separate actor and critic trunks (three tanh layers of 64 by default), a
2-d action mean head, a scalar value head, and a state-independent learned
log-std initialized to zero. Action log-probabilities are evaluated against a
mean perturbed by a uniform draw in [-rpo_alpha, rpo_alpha] per dimension,
which keeps the policy from collapsing to a deterministic one during
training; rpo_alpha = 0 recovers the plain Gaussian policy.

Training-mode stochasticity (dropout masks and the mean perturbation) is
drawn once when an action is sampled and can be *replayed* when the
optimizer re-evaluates that action: passing the recorded perturbation and
masks to evaluate_actions reproduces the perturbed mean and the masked
sub-network that produced a stored log-probability exactly, so probability
ratios at unchanged parameters are exactly 1 and carry no injected noise.
Masks are explicit multiplier arrays, never hidden generator state.

Everything runs in float64 on CPU. All randomness (weight init, action
sampling, perturbations, dropout masks) comes from numpy generators, never
from torch's global RNG, so runs are reproducible from a single integer seed.

Checkpoints are a small binary format: a fixed header (magic, version,
encoder kind, input width, crowd size, exponent) followed by the raw
little-endian float64 parameter data in a documented order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .geometry import make_rng

__all__ = [
    "ActorCritic",
    "ActionSample",
    "CheckpointMeta",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "HIDDEN_DIMS",
    "ACTION_DIM",
]

HIDDEN_DIMS = (64, 64, 64)
ACTION_DIM = 2

_LOG_2PI = math.log(2.0 * math.pi)


def _orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal (rows, cols) matrix scaled by gain, from a numpy stream."""
    a = rng.standard_normal((rows, cols))
    tall = a if rows >= cols else a.T
    q, r = np.linalg.qr(tall)
    # Fix the signs so the factorization (and hence the init) is unique.
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _init_linear(layer: nn.Linear, gain: float, rng: np.random.Generator) -> None:
    with torch.no_grad():
        w = _orthogonal(layer.out_features, layer.in_features, gain, rng)
        layer.weight.copy_(torch.from_numpy(w))
        layer.bias.zero_()


def _gaussian_logp(action: np.ndarray, mean: np.ndarray, std: np.ndarray) -> float:
    z = (np.asarray(action) - mean) / std
    return float((-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI).sum())


@dataclass
class ActionSample:
    """One sampled (or deterministic) action with its log-prob and value."""

    action: np.ndarray
    log_prob: float
    value: float


class ActorCritic(nn.Module):
    """Two-headed tanh MLP policy/value network.

    Hidden layers use orthogonal init with gain sqrt(2); the action head uses
    gain 0.01 (near-zero initial means) and the value head gain 1. Dropout is
    applied after each hidden activation only when explicit mask arrays are
    passed to the forward call (training-phase passes); plain forwards are
    deterministic functions of the parameters.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dims: tuple[int, ...] = HIDDEN_DIMS,
        dropout_rate: float = 0.1,
        rpo_alpha: float = 0.5,
        init_rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        if input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {input_dim}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if rpo_alpha < 0.0:
            raise ValueError(f"rpo_alpha must be >= 0, got {rpo_alpha}")
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.dropout_rate = float(dropout_rate)
        self.rpo_alpha = float(rpo_alpha)

        def make_trunk() -> nn.ModuleList:
            layers = nn.ModuleList()
            prev = self.input_dim
            for width in self.hidden_dims:
                layers.append(nn.Linear(prev, width, dtype=torch.float64))
                prev = width
            return layers

        self.actor_trunk = make_trunk()
        self.actor_head = nn.Linear(
            self.hidden_dims[-1], ACTION_DIM, dtype=torch.float64
        )
        self.critic_trunk = make_trunk()
        self.critic_head = nn.Linear(self.hidden_dims[-1], 1, dtype=torch.float64)
        self.log_std = nn.Parameter(torch.zeros(ACTION_DIM, dtype=torch.float64))

        rng = init_rng if init_rng is not None else make_rng(0)
        for layer in self.actor_trunk:
            _init_linear(layer, math.sqrt(2.0), rng)
        _init_linear(self.actor_head, 0.01, rng)
        for layer in self.critic_trunk:
            _init_linear(layer, math.sqrt(2.0), rng)
        _init_linear(self.critic_head, 1.0, rng)

    # -- dropout masks ----------------------------------------------------------

    @property
    def mask_shape(self) -> tuple[int, int, int]:
        """Per-sample dropout mask shape: (trunks, hidden layers, width)."""
        return (2, len(self.hidden_dims), max(self.hidden_dims))

    def draw_dropout_masks(
        self, rng: np.random.Generator, batch_size: int
    ) -> np.ndarray | None:
        """Inverted-dropout multipliers for one forward pass, or None.

        Shape (batch_size, 2, layers, width): index 0 of the second axis
        masks the actor trunk, index 1 the critic trunk. Values are 0 (unit
        dropped) or 1/(1 - dropout_rate). Consumes exactly one uniform block
        of that shape from rng; with dropout_rate = 0 nothing is consumed.
        """
        if self.dropout_rate == 0.0:
            return None
        u = rng.random((batch_size,) + self.mask_shape)
        return (u >= self.dropout_rate) / (1.0 - self.dropout_rate)

    # -- forward passes -------------------------------------------------------

    def _run_trunk(
        self,
        trunk: nn.ModuleList,
        x: torch.Tensor,
        masks: torch.Tensor | None,
    ) -> torch.Tensor:
        for i, layer in enumerate(trunk):
            x = torch.tanh(layer(x))
            if masks is not None:
                x = x * masks[:, i, : x.shape[-1]]
        return x

    @staticmethod
    def _as_mask_tensor(masks: np.ndarray | torch.Tensor | None) -> torch.Tensor | None:
        if masks is None or isinstance(masks, torch.Tensor):
            return masks
        return torch.from_numpy(np.asarray(masks, dtype=np.float64))

    def forward(
        self,
        obs: torch.Tensor,
        actor_masks: np.ndarray | torch.Tensor | None = None,
        critic_masks: np.ndarray | torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(mean (B, 2), log_std (2,), value (B,)) for a batch of observations.

        Mask arrays of shape (B, layers, width) multiply the hidden
        activations of the matching trunk (training-phase passes replay the
        masks stored with each transition); without masks the pass is a
        deterministic function of the parameters.
        """
        if obs.dim() == 1:
            obs = obs.unsqueeze(0)
        mean = self.actor_head(
            self._run_trunk(self.actor_trunk, obs, self._as_mask_tensor(actor_masks))
        )
        value = self.critic_head(
            self._run_trunk(self.critic_trunk, obs, self._as_mask_tensor(critic_masks))
        ).squeeze(-1)
        return mean, self.log_std, value

    # -- numpy-facing single-observation ops ----------------------------------

    def _forward_np(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        with torch.no_grad():
            mean, log_std, value = self.forward(
                torch.from_numpy(np.asarray(obs, dtype=np.float64)).unsqueeze(0)
            )
        return (
            mean[0].numpy(),
            log_std.detach().numpy().copy(),
            float(value[0]),
        )

    def sample_action(
        self,
        obs: np.ndarray,
        rng: np.random.Generator | None,
        mode: str = "train",
    ) -> ActionSample:
        """Draw an action (mode="train") or return the mean (mode="eval").

        Train mode consumes, in order: one dropout-mask block (when
        dropout_rate > 0), one 2-d Gaussian draw for the action, and one 2-d
        uniform draw (when rpo_alpha > 0) perturbing the mean the log-prob is
        evaluated against. Eval mode consumes no randomness, applies no
        dropout, and reports the log-prob of the mean under the unperturbed
        Gaussian.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval":
            mean, log_std, value = self._forward_np(obs)
            std = np.exp(log_std)
            return ActionSample(
                action=mean.copy(),
                log_prob=_gaussian_logp(mean, mean, std),
                value=value,
            )
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        masks = self.draw_dropout_masks(rng, 1)
        obs_t = torch.from_numpy(np.asarray(obs, dtype=np.float64)).unsqueeze(0)
        with torch.no_grad():
            mean_t, log_std_t, value_t = self.forward(
                obs_t,
                actor_masks=None if masks is None else masks[:, 0],
                critic_masks=None if masks is None else masks[:, 1],
            )
        mean = mean_t[0].numpy()
        std = np.exp(log_std_t.detach().numpy())
        action = mean + std * rng.standard_normal(ACTION_DIM)
        if self.rpo_alpha > 0.0:
            logp_mean = mean + rng.uniform(-self.rpo_alpha, self.rpo_alpha, ACTION_DIM)
        else:
            logp_mean = mean
        return ActionSample(
            action=action,
            log_prob=_gaussian_logp(action, logp_mean, std),
            value=float(value_t[0]),
        )

    def action_log_prob(
        self,
        obs: np.ndarray,
        action: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> float:
        """Log-density of an action, mean perturbed when rpo_alpha > 0."""
        mean, log_std, _ = self._forward_np(obs)
        if self.rpo_alpha > 0.0:
            if rng is None:
                raise ValueError("rpo_alpha > 0 needs an rng for the perturbation")
            mean = mean + rng.uniform(-self.rpo_alpha, self.rpo_alpha, ACTION_DIM)
        return _gaussian_logp(action, mean, np.exp(log_std))

    # -- batched, differentiable op for the optimizer -------------------------

    def evaluate_actions(
        self,
        obs: torch.Tensor,
        actions: torch.Tensor,
        rpo_shifts: np.ndarray | torch.Tensor | None = None,
        dropout_masks: np.ndarray | torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(log_prob (B,), entropy (B,), value (B,)), differentiable.

        Replays the stochasticity recorded when the actions were sampled:
        rpo_shifts (B, 2) are added to the action means before the log
        density, and dropout_masks (B, 2, layers, width) reproduce the
        masked sub-network of the original pass. With the parameters
        unchanged, the returned log-probs therefore equal the stored ones
        exactly. No randomness is consumed.
        """
        masks = self._as_mask_tensor(dropout_masks)
        mean, log_std, value = self.forward(
            obs,
            actor_masks=None if masks is None else masks[:, 0],
            critic_masks=None if masks is None else masks[:, 1],
        )
        if self.rpo_alpha > 0.0:
            if rpo_shifts is None:
                raise ValueError(
                    "rpo_alpha > 0 needs the recorded perturbations (rpo_shifts)"
                )
            if not isinstance(rpo_shifts, torch.Tensor):
                rpo_shifts = torch.from_numpy(
                    np.asarray(rpo_shifts, dtype=np.float64)
                )
            mean = mean + rpo_shifts
        std = torch.exp(log_std)
        z = (actions - mean) / std
        log_prob = (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(-1)
        entropy = (0.5 + 0.5 * _LOG_2PI + log_std).sum().expand(log_prob.shape)
        return log_prob, entropy, value

    def parameter_manifest(self) -> list[tuple[str, nn.Parameter]]:
        """Parameters in the fixed checkpoint order."""
        out: list[tuple[str, nn.Parameter]] = []
        for i, layer in enumerate(self.actor_trunk):
            out.append((f"actor_trunk.{i}.weight", layer.weight))
            out.append((f"actor_trunk.{i}.bias", layer.bias))
        out.append(("actor_head.weight", self.actor_head.weight))
        out.append(("actor_head.bias", self.actor_head.bias))
        for i, layer in enumerate(self.critic_trunk):
            out.append((f"critic_trunk.{i}.weight", layer.weight))
            out.append((f"critic_trunk.{i}.bias", layer.bias))
        out.append(("critic_head.weight", self.critic_head.weight))
        out.append(("critic_head.bias", self.critic_head.bias))
        out.append(("log_std", self.log_std))
        return out


# --- checkpoint format --------------------------------------------------------

_MAGIC = b"EVACPOL\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sBBIId")  # magic, version, kind, input_dim, N, alpha
_KIND_CODES = {"ff": 0, "grav": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(Exception):
    """Raised for unreadable, corrupt, or mismatched checkpoint files."""


@dataclass(frozen=True)
class CheckpointMeta:
    """Header contents of a checkpoint file."""

    version: int
    encoder_kind: str
    input_dim: int
    n_individuals: int
    alpha: float


def save_checkpoint(
    path: str | Path,
    model: ActorCritic,
    encoder_kind: str,
    n_individuals: int,
    alpha: float,
) -> None:
    """Write header + raw float64 parameter data (little-endian).

    Parameter order is actor trunk (weight, bias per layer), actor head,
    critic trunk, critic head, log-std; weights are row-major (out, in). The
    architecture is implied by the header, so only default-width networks can
    be checkpointed.
    """
    if model.hidden_dims != HIDDEN_DIMS:
        raise ValueError(
            f"only the default architecture {HIDDEN_DIMS} can be checkpointed, "
            f"got {model.hidden_dims}"
        )
    if encoder_kind not in _KIND_CODES:
        raise ValueError(f"unknown encoder kind {encoder_kind!r}")
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        _KIND_CODES[encoder_kind],
        model.input_dim,
        int(n_individuals),
        float(alpha),
    )
    chunks = [header]
    for _, param in model.parameter_manifest():
        chunks.append(
            np.ascontiguousarray(param.detach().numpy(), dtype="<f8").tobytes()
        )
    Path(path).write_bytes(b"".join(chunks))


def _expected_param_floats(input_dim: int) -> int:
    total = 0
    prev = input_dim
    for width in HIDDEN_DIMS:
        total += prev * width + width
        prev = width
    total += prev * ACTION_DIM + ACTION_DIM  # actor head
    prev = input_dim
    for width in HIDDEN_DIMS:
        total += prev * width + width
        prev = width
    total += prev * 1 + 1  # critic head
    total += ACTION_DIM  # log-std
    return total


def load_checkpoint(
    path: str | Path,
    dropout_rate: float = 0.1,
    rpo_alpha: float = 0.5,
) -> tuple[ActorCritic, CheckpointMeta]:
    """Read a checkpoint; returns the rebuilt model and its header.

    dropout_rate / rpo_alpha are runtime behaviors, not stored weights; pass
    the training values if the model will be optimized further.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic, version, kind_code, input_dim, n_individuals, alpha = _HEADER.unpack_from(
        raw
    )
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a policy checkpoint")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if kind_code not in _KIND_NAMES:
        raise CheckpointError(f"{path}: unknown encoder code {kind_code}")
    expected = _HEADER.size + 8 * _expected_param_floats(input_dim)
    if len(raw) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} bytes for input_dim={input_dim}, "
            f"got {len(raw)}"
        )
    meta = CheckpointMeta(
        version=version,
        encoder_kind=_KIND_NAMES[kind_code],
        input_dim=input_dim,
        n_individuals=n_individuals,
        alpha=alpha,
    )
    model = ActorCritic(
        input_dim, dropout_rate=dropout_rate, rpo_alpha=rpo_alpha, init_rng=make_rng(0)
    )
    offset = _HEADER.size
    with torch.no_grad():
        for _, param in model.parameter_manifest():
            count = param.numel()
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            param.copy_(torch.from_numpy(values.reshape(tuple(param.shape)).copy()))
            offset += 8 * count
    return model, meta
