"""Observation encodings for the leader's policy.

Two layouts:

* Feed-forward ("ff"): leader position, exit offset, and one relative offset
  per individual, with saved individuals' slots replaced by the exit offset.
  Length 2N + 4; grows with the crowd.
* Pseudo-gravitational ("grav"): leader position plus two synthetic force
  vectors. Free individuals attract the leader like point masses with an
  interaction kernel |d|^-alpha (the "catch" force); the exit attracts with a
  strength proportional to the number of caught individuals (the "exit"
  force). Length 6, independent of N.

Forces are the negative gradients of the corresponding potentials. Distances
are floored at D_MIN to keep both finite when the leader sits on top of an
individual or the exit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import CrowdState, EnvConfig, Phase

__all__ = [
    "D_MIN",
    "catch_potential",
    "exit_potential",
    "catch_force",
    "exit_force",
    "encode_ff",
    "encode_grav",
    "Encoder",
    "make_encoder",
    "ENCODER_KINDS",
]

# Distance floor for the singular kernels.
D_MIN = 1e-4

ENCODER_KINDS = ("ff", "grav")


def _free_offsets(point: np.ndarray, state: CrowdState) -> np.ndarray:
    free = np.asarray(state.phases) == Phase.FREE
    return state.positions[free] - np.asarray(point, dtype=np.float64)[None, :]


def catch_potential(point: np.ndarray, state: CrowdState, alpha: float) -> float:
    """-sum over free individuals of |r_i - point|^-alpha (0 with no free)."""
    offsets = _free_offsets(point, state)
    if offsets.shape[0] == 0:
        return 0.0
    d = np.maximum(np.hypot(offsets[:, 0], offsets[:, 1]), D_MIN)
    return float(-(d**-alpha).sum())


def catch_force(point: np.ndarray, state: CrowdState, alpha: float) -> np.ndarray:
    """Negative gradient of the catch potential at ``point``.

    Each free individual contributes alpha * (r_i - point) * d^-(alpha+2),
    pulling the point toward it. Zero vector with no free individuals or
    alpha = 0.
    """
    offsets = _free_offsets(point, state)
    if offsets.shape[0] == 0 or alpha == 0.0:
        return np.zeros(2)
    d = np.maximum(np.hypot(offsets[:, 0], offsets[:, 1]), D_MIN)
    w = alpha * d ** (-alpha - 2.0)
    return w @ offsets


def _n_caught(state: CrowdState) -> int:
    return int(np.count_nonzero(np.asarray(state.phases) == Phase.CAUGHT))


def exit_potential(
    point: np.ndarray, state: CrowdState, alpha: float, exit_point: np.ndarray
) -> float:
    """-N_caught * |exit - point|^-alpha (0 with nobody caught)."""
    n_caught = _n_caught(state)
    if n_caught == 0:
        return 0.0
    offset = np.asarray(exit_point, dtype=np.float64) - np.asarray(
        point, dtype=np.float64
    )
    d = max(float(np.hypot(offset[0], offset[1])), D_MIN)
    return -n_caught * d**-alpha


def exit_force(
    point: np.ndarray, state: CrowdState, alpha: float, exit_point: np.ndarray
) -> np.ndarray:
    """Negative gradient of the exit potential: pulls toward the exit with
    strength proportional to the caught head-count."""
    n_caught = _n_caught(state)
    if n_caught == 0 or alpha == 0.0:
        return np.zeros(2)
    offset = np.asarray(exit_point, dtype=np.float64) - np.asarray(
        point, dtype=np.float64
    )
    d = max(float(np.hypot(offset[0], offset[1])), D_MIN)
    return (n_caught * alpha * d ** (-alpha - 2.0)) * offset


def encode_ff(state: CrowdState, exit_point: np.ndarray) -> np.ndarray:
    """Flat observation: [leader, exit - leader, r_i - leader per individual].

    Saved individuals' slots are overwritten with the exit offset so the
    layout (and the policy input width 2N + 4) never changes mid-episode.
    """
    exit_point = np.asarray(exit_point, dtype=np.float64)
    n = state.n_individuals
    obs = np.empty(2 * n + 4)
    obs[0:2] = state.leader_pos
    exit_offset = exit_point - state.leader_pos
    obs[2:4] = exit_offset
    rel = state.positions - state.leader_pos[None, :]
    saved = np.asarray(state.phases) == Phase.SAVED
    if np.any(saved):
        rel = rel.copy()
        rel[saved] = exit_offset
    obs[4:] = rel.reshape(-1)
    return obs


def encode_grav(
    state: CrowdState, alpha: float, exit_point: np.ndarray
) -> np.ndarray:
    """Six-component observation: [leader, catch force, exit force]."""
    obs = np.empty(6)
    obs[0:2] = state.leader_pos
    obs[2:4] = catch_force(state.leader_pos, state, alpha)
    obs[4:6] = exit_force(state.leader_pos, state, alpha, exit_point)
    return obs


@dataclass(frozen=True)
class Encoder:
    """Bound encoding: kind, exponent and exit point fixed at construction."""

    kind: str
    alpha: float
    exit_point: tuple[float, float]
    n_individuals: int

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ValueError(
                f"unknown encoder kind {self.kind!r}, expected one of {ENCODER_KINDS}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def dim(self) -> int:
        if self.kind == "ff":
            return 2 * self.n_individuals + 4
        return 6

    def __call__(self, state: CrowdState) -> np.ndarray:
        exit_pt = np.asarray(self.exit_point, dtype=np.float64)
        if self.kind == "ff":
            return encode_ff(state, exit_pt)
        return encode_grav(state, self.alpha, exit_pt)


def make_encoder(kind: str, config: EnvConfig, alpha: float = 1.0) -> Encoder:
    """Encoder bound to a room configuration."""
    return Encoder(
        kind=kind,
        alpha=float(alpha),
        exit_point=config.exit_point,
        n_individuals=config.n_individuals,
    )
