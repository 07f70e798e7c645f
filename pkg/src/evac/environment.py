"""Crowd evacuation dynamics with an optional leader.

The room is the square [-half_width, half_width]^2 with an exit point on (or
near) its boundary. N individuals move at constant speed; each step their
headings relax toward the circular mean of their neighbours' headings plus
uniform noise (Vicsek alignment). A leader, steered by a 2-d action, attracts
individuals within its influence radius: a "caught" individual blends the
leader's heading into its alignment at weight ``enslaving_degree``.

Phases per individual:

* FREE      - aligns with neighbours only.
* CAUGHT    - within the leader radius; leader heading blended in.
* EXIT_ZONE - entered the exit disc; walks straight to the exit. Permanent.
* SAVED     - within the save radius of the exit; stops moving. Permanent.

Step order: the leader moves first, phases are refreshed from the new leader
position, headings update synchronously from the pre-step headings/positions,
everyone moves, walls clamp positions and reflect headings. The reward grants
a time-decaying bonus per individual newly entering the exit zone, minus a
constant per-step penalty.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .csvio import fmt_float as _fmt_float
from .geometry import (
    ZERO_RESULTANT_EPS,
    _canonicalize_fast,
    canonicalize_angles,
    make_rng,
)

__all__ = [
    "Phase",
    "EnvConfig",
    "CrowdState",
    "StepOutcome",
    "EvacuationEnv",
    "classify_phases",
    "reset",
    "step",
    "no_leader_step",
    "vicsek_heading",
    "compute_reward",
    "save_state",
    "load_state",
    "TrajectoryWriter",
    "TRAJECTORY_FIELDS",
]


class Phase(IntEnum):
    FREE = 0
    CAUGHT = 1
    EXIT_ZONE = 2
    SAVED = 3


# Plain ints for hot loops (IntEnum attribute access is surprisingly costly).
_FREE = 0
_CAUGHT = 1
_EXIT_ZONE = 2
_SAVED = 3


@dataclass(frozen=True)
class EnvConfig:
    """Room geometry, crowd dynamics and reward constants.

    Defaults are the desk-scale working point: unit half-width room, alignment
    radius 0.1, leader radius twice that, noise amplitude 0.2, speed 0.01,
    60 individuals, exit disc radius 0.4 at the middle of the bottom wall,
    full enslaving (caught individuals copy the leader's heading exactly).
    """

    half_width: float = 1.0
    vicsek_radius: float = 0.1
    leader_radius: float = 0.2
    noise: float = 0.2
    speed: float = 0.01
    t_max: int = 2000
    n_individuals: int = 60
    exit_radius: float = 0.4
    enslaving_degree: float = 1.0
    exit_point: tuple[float, float] | None = None
    save_radius: float = 0.01
    entry_reward_base: float = 15.0
    entry_reward_bonus: float = 10.0
    step_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.half_width <= 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")
        if self.vicsek_radius <= 0:
            raise ValueError(
                f"vicsek_radius must be positive, got {self.vicsek_radius}"
            )
        if self.leader_radius < self.vicsek_radius:
            raise ValueError(
                f"leader_radius ({self.leader_radius}) must be >= vicsek_radius "
                f"({self.vicsek_radius})"
            )
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.speed <= 0:
            raise ValueError(f"speed must be positive, got {self.speed}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.n_individuals < 0:
            raise ValueError(
                f"n_individuals must be >= 0, got {self.n_individuals}"
            )
        if not 0.0 <= self.enslaving_degree <= 1.0:
            raise ValueError(
                f"enslaving_degree must be in [0, 1], got {self.enslaving_degree}"
            )
        if self.exit_point is None:
            object.__setattr__(self, "exit_point", (0.0, -self.half_width))
        else:
            ep = tuple(float(c) for c in self.exit_point)
            if len(ep) != 2:
                raise ValueError(f"exit_point must have 2 coordinates, got {ep}")
            if max(abs(ep[0]), abs(ep[1])) > self.half_width:
                raise ValueError(f"exit_point {ep} lies outside the room")
            object.__setattr__(self, "exit_point", ep)
        if not 0 < self.exit_radius:
            raise ValueError(f"exit_radius must be positive, got {self.exit_radius}")
        if not 0 < self.save_radius < self.exit_radius:
            raise ValueError(
                f"save_radius must be in (0, exit_radius), got {self.save_radius}"
            )
        if self.entry_reward_base < 0 or self.entry_reward_bonus < 0:
            raise ValueError("entry reward constants must be >= 0")
        if self.step_penalty < 0:
            raise ValueError(f"step_penalty must be >= 0, got {self.step_penalty}")

    @property
    def exit_array(self) -> np.ndarray:
        return np.asarray(self.exit_point, dtype=np.float64)


@dataclass
class CrowdState:
    """Full simulation state at one time step."""

    positions: np.ndarray  # (N, 2) float64
    headings: np.ndarray  # (N,) float64, canonical angles
    phases: np.ndarray  # (N,) int8, Phase values
    leader_pos: np.ndarray  # (2,) float64
    leader_heading: float
    t: int
    n_saved: int

    @property
    def n_individuals(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "CrowdState":
        return CrowdState(
            positions=self.positions.copy(),
            headings=self.headings.copy(),
            phases=self.phases.copy(),
            leader_pos=self.leader_pos.copy(),
            leader_heading=self.leader_heading,
            t=self.t,
            n_saved=self.n_saved,
        )

    def phase_counts(self) -> dict[Phase, int]:
        return {p: int(np.count_nonzero(self.phases == p)) for p in Phase}


@dataclass
class StepOutcome:
    """Transition result: the new state plus reward and episode flags."""

    state: CrowdState
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


def _refresh_phases(
    positions: np.ndarray,
    leader_pos: np.ndarray | None,
    phases: np.ndarray,
    config: EnvConfig,
) -> tuple[np.ndarray, int, int]:
    """Re-evaluate phases against the zone tests.

    EXIT_ZONE and SAVED are permanent; CAUGHT is re-decided every call (pass
    leader_pos=None to disable catching). Returns (new_phases,
    n_new_exit_entries, n_newly_saved) where exit entries count individuals
    leaving {FREE, CAUGHT} for {EXIT_ZONE, SAVED} this call.
    """
    ex, ey = config.exit_point
    new = phases.copy()
    d_exit = np.hypot(positions[:, 0] - ex, positions[:, 1] - ey)

    was_active = phases <= _CAUGHT
    newly_saved = (phases != _SAVED) & (d_exit <= config.save_radius)
    new[newly_saved] = _SAVED

    entering = was_active & ~newly_saved & (d_exit < config.exit_radius)
    new[entering] = _EXIT_ZONE

    still_active = was_active & ~newly_saved & ~entering
    if leader_pos is not None and still_active.any():
        d_lead = np.hypot(
            positions[:, 0] - leader_pos[0], positions[:, 1] - leader_pos[1]
        )
        caught = still_active & (d_lead < config.leader_radius)
        new[still_active & ~caught] = _FREE
        new[caught] = _CAUGHT
    else:
        new[still_active] = _FREE

    n_exit_entries = int(entering.sum() + (newly_saved & was_active).sum())
    return new, n_exit_entries, int(newly_saved.sum())


def classify_phases(
    positions: np.ndarray, leader_pos: np.ndarray | None, config: EnvConfig
) -> np.ndarray:
    """History-free zone classification (reset semantics).

    Save disc beats exit disc beats the leader's catch radius;
    leader_pos=None disables catching.
    """
    blank = np.zeros(positions.shape[0], dtype=np.int8)
    phases, _, _ = _refresh_phases(positions, leader_pos, blank, config)
    return phases


def reset(config: EnvConfig, rng: np.random.Generator) -> CrowdState:
    """Fresh state: crowd uniform in the room, leader at the origin.

    Positions are drawn uniformly over the room, headings uniformly over
    (-pi, pi]. Phases follow the zone tests immediately (an individual spawned
    inside the exit disc starts in EXIT_ZONE; inside the save disc, SAVED with
    no reward granted).
    """
    n = config.n_individuals
    hw = config.half_width
    positions = rng.uniform(-hw, hw, size=(n, 2))
    headings = canonicalize_angles(rng.uniform(-math.pi, math.pi, size=n))
    leader_pos = np.zeros(2)
    phases = classify_phases(positions, leader_pos, config)
    return CrowdState(
        positions=positions,
        headings=headings,
        phases=phases,
        leader_pos=leader_pos,
        leader_heading=0.0,
        t=0,
        n_saved=int(np.count_nonzero(phases == Phase.SAVED)),
    )


def _alignment_headings(
    positions: np.ndarray,
    headings: np.ndarray,
    active: np.ndarray,
    noise: np.ndarray,
    config: EnvConfig,
) -> np.ndarray:
    """Noisy neighbourhood alignment direction for every active individual.

    The neighbourhood of i is every active k (including i itself) with
    |r_i - r_k| < vicsek_radius; the direction is the circular mean of their
    current headings plus the per-individual noise draw. An undefined mean
    falls back to the individual's current heading (noise still applies).
    Returns a full-length array; entries at inactive indices are the current
    headings, untouched.
    """
    out = headings.copy()
    idx = np.nonzero(active)[0]
    if idx.size == 0:
        return out
    pos = positions[idx]
    diff = pos[:, None, :] - pos[None, :, :]
    within = (diff[..., 0] ** 2 + diff[..., 1] ** 2) < config.vicsek_radius**2
    h = headings[idx]
    w = within.astype(np.float64)
    s = w @ np.sin(h)
    c = w @ np.cos(h)
    resultant = np.hypot(c, s)
    mean = np.where(resultant > ZERO_RESULTANT_EPS, np.arctan2(s, c), h)
    out[idx] = _canonicalize_fast(mean + noise[idx])
    return out


def vicsek_heading(
    i: int, state: CrowdState, config: EnvConfig, rng: np.random.Generator
) -> float:
    """Next alignment heading for individual i.

    Consumes one uniform draw from rng when the noise amplitude is positive.
    """
    active = np.asarray(state.phases) <= Phase.CAUGHT
    if not active[i]:
        raise ValueError(f"individual {i} is not in an aligning phase")
    noise = np.zeros(state.n_individuals)
    noise[i] = rng.uniform(-0.5 * config.noise, 0.5 * config.noise) if config.noise else 0.0
    return float(
        _alignment_headings(state.positions, state.headings, active, noise, config)[i]
    )


def compute_reward(n_exiting_new: int, t: int, config: EnvConfig) -> float:
    """Per-step reward: time-decaying entry bonus minus the step penalty.

    Each individual newly entering the exit zone at step t earns
    base + bonus * (1 - t / t_max); every step costs the flat penalty.
    """
    if n_exiting_new < 0:
        raise ValueError(f"n_exiting_new must be >= 0, got {n_exiting_new}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    tau = 1.0 - t / config.t_max
    return (
        config.entry_reward_base + config.entry_reward_bonus * tau
    ) * n_exiting_new - config.step_penalty


def _reflect_at_walls(
    positions: np.ndarray, headings: np.ndarray, hw: float
) -> tuple[np.ndarray, np.ndarray]:
    """Clamp positions to the room, reflecting headings at touched walls."""
    outside = np.abs(positions) > hw
    if not outside.any():
        return positions, headings
    hit_x = outside[:, 0]
    hit_y = outside[:, 1]
    np.clip(positions, -hw, hw, out=positions)
    if hit_x.any():
        headings[hit_x] = math.pi - headings[hit_x]
    if hit_y.any():
        headings[hit_y] = -headings[hit_y]
    return positions, _canonicalize_fast(headings)


def _advance(
    state: CrowdState,
    action: np.ndarray | None,
    config: EnvConfig,
    rng: np.random.Generator,
) -> tuple[CrowdState, int, int, dict]:
    """Shared core of step / no_leader_step. action=None disables the leader."""
    hw = config.half_width
    exit_pt = config.exit_array
    n = state.n_individuals

    leader_pos = state.leader_pos.copy()
    leader_heading = state.leader_heading
    info: dict = {}
    if action is not None:
        a = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"action must be finite, got {a}")
        norm = math.hypot(float(a[0]), float(a[1]))
        if norm == 0.0:
            info["leader_held"] = True
        else:
            leader_heading = math.atan2(float(a[1]), float(a[0]))
            leader_pos += (config.speed / norm) * a
            if abs(leader_pos[0]) > hw or abs(leader_pos[1]) > hw:
                hdg = np.array([leader_heading])
                pos = leader_pos[None, :]
                pos, hdg = _reflect_at_walls(pos, hdg, hw)
                leader_pos = pos[0]
                leader_heading = float(hdg[0])

    phases, n_exit_entries, n_newly_saved = _refresh_phases(
        state.positions,
        leader_pos if action is not None else None,
        state.phases,
        config,
    )

    positions = state.positions.copy()
    headings = state.headings
    active = phases <= _CAUGHT
    noise = (
        rng.uniform(-0.5 * config.noise, 0.5 * config.noise, size=n)
        if config.noise
        else np.zeros(n)
    )
    # The alignment array doubles as the new headings: active entries hold the
    # noisy neighbourhood mean, the rest keep their current heading. Caught and
    # exit-zone entries are overwritten below.
    new_headings = _alignment_headings(positions, headings, active, noise, config)

    caught = phases == _CAUGHT
    if caught.any():
        q = config.enslaving_degree
        if q == 1.0:
            new_headings[caught] = leader_heading
        elif q != 0.0:
            s = q * math.sin(leader_heading) + (1.0 - q) * np.sin(new_headings[caught])
            c = q * math.cos(leader_heading) + (1.0 - q) * np.cos(new_headings[caught])
            resultant = np.hypot(c, s)
            blended = np.where(
                resultant > ZERO_RESULTANT_EPS, np.arctan2(s, c), headings[caught]
            )
            new_headings[caught] = _canonicalize_fast(blended)

    exiting = phases == _EXIT_ZONE
    if exiting.any():
        to_exit = exit_pt[None, :] - positions[exiting]
        new_headings[exiting] = np.arctan2(to_exit[:, 1], to_exit[:, 0])

    if state.n_saved + n_newly_saved == 0:
        # Nobody saved yet: everyone moves.
        positions[:, 0] += config.speed * np.cos(new_headings)
        positions[:, 1] += config.speed * np.sin(new_headings)
        positions, new_headings = _reflect_at_walls(positions, new_headings, hw)
    else:
        movers = phases != _SAVED
        if movers.any():
            moved = new_headings[movers]
            positions[movers, 0] += config.speed * np.cos(moved)
            positions[movers, 1] += config.speed * np.sin(moved)
            positions, new_headings = _reflect_at_walls(positions, new_headings, hw)

    new_state = CrowdState(
        positions=positions,
        headings=new_headings,
        phases=phases,
        leader_pos=leader_pos,
        leader_heading=leader_heading,
        t=state.t + 1,
        n_saved=state.n_saved + n_newly_saved,
    )
    info["entered_exit_zone"] = n_exit_entries
    info["newly_saved"] = n_newly_saved
    return new_state, n_exit_entries, n_newly_saved, info


def step(
    state: CrowdState,
    action: np.ndarray,
    config: EnvConfig,
    rng: np.random.Generator,
) -> StepOutcome:
    """Advance one step under a leader action.

    The action is a direction; the leader moves speed * action / |action|.
    A zero action holds the leader in place (flagged in info). The reward is
    evaluated at the pre-step counter, so the first step of an episode gets
    the full time bonus. The episode terminates when everyone is saved and
    truncates at t_max otherwise.
    """
    if state.n_individuals != config.n_individuals:
        raise ValueError(
            f"state has {state.n_individuals} individuals, config expects "
            f"{config.n_individuals}"
        )
    new_state, n_exit_entries, _, info = _advance(state, action, config, rng)
    reward = compute_reward(n_exit_entries, state.t, config)
    terminated = new_state.n_saved == config.n_individuals
    truncated = new_state.t >= config.t_max and not terminated
    return StepOutcome(
        state=new_state,
        reward=reward,
        terminated=terminated,
        truncated=truncated,
        info=info,
    )


def no_leader_step(
    state: CrowdState, config: EnvConfig, rng: np.random.Generator
) -> CrowdState:
    """Advance one step with no leader: nobody is caught, dynamics otherwise
    identical. The baseline for leaderless evacuation."""
    if state.n_individuals != config.n_individuals:
        raise ValueError(
            f"state has {state.n_individuals} individuals, config expects "
            f"{config.n_individuals}"
        )
    new_state, _, _, _ = _advance(state, None, config, rng)
    return new_state


class EvacuationEnv:
    """Stateful wrapper with reset/step and episode bookkeeping.

    Holds its own RNG stream (seeded from config.seed unless an explicit
    generator is given). step() on a finished episode raises; call reset().
    info gains an "episode" dict with total return and length when an episode
    ends.
    """

    def __init__(
        self,
        config: EnvConfig,
        rng: np.random.Generator | None = None,
        seed: int | None = None,
    ) -> None:
        self.config = config
        if rng is not None and seed is not None:
            raise ValueError("pass rng or seed, not both")
        self.rng = rng if rng is not None else make_rng(
            config.seed if seed is None else seed
        )
        self.state: CrowdState | None = None
        self._done = True
        self.episode_return = 0.0
        self.episode_length = 0

    def reset(self) -> CrowdState:
        self.state = reset(self.config, self.rng)
        self._done = False
        self.episode_return = 0.0
        self.episode_length = 0
        return self.state

    def step(self, action: np.ndarray) -> StepOutcome:
        if self.state is None or self._done:
            raise RuntimeError("episode is finished; call reset()")
        outcome = step(self.state, action, self.config, self.rng)
        self.state = outcome.state
        self.episode_return += outcome.reward
        self.episode_length += 1
        if outcome.terminated or outcome.truncated:
            self._done = True
            outcome.info["episode"] = {
                "r": self.episode_return,
                "l": self.episode_length,
            }
        return outcome

    @property
    def done(self) -> bool:
        return self._done


# --- state serialization and trajectory logs ---------------------------------

_SNAPSHOT_FORMAT = "evac-state-v1"


def save_state(state: CrowdState, path: str | Path) -> None:
    """Write a state snapshot as JSON (exact float64 round-trip via repr)."""
    payload = {
        "format": _SNAPSHOT_FORMAT,
        "positions": state.positions.tolist(),
        "headings": state.headings.tolist(),
        "phases": [int(p) for p in state.phases],
        "leader_pos": state.leader_pos.tolist(),
        "leader_heading": float(state.leader_heading),
        "t": int(state.t),
        "n_saved": int(state.n_saved),
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_state(path: str | Path) -> CrowdState:
    """Read a snapshot written by :func:`save_state`."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != _SNAPSHOT_FORMAT:
        raise ValueError(
            f"{path}: not a state snapshot (format={payload.get('format')!r})"
        )
    positions = np.asarray(payload["positions"], dtype=np.float64).reshape(-1, 2)
    n = positions.shape[0]
    headings = np.asarray(payload["headings"], dtype=np.float64)
    phases = np.asarray(payload["phases"], dtype=np.int8)
    if headings.shape != (n,) or phases.shape != (n,):
        raise ValueError(f"{path}: inconsistent array lengths")
    if np.any(phases < Phase.FREE) or np.any(phases > Phase.SAVED):
        raise ValueError(f"{path}: phase values out of range")
    return CrowdState(
        positions=positions,
        headings=headings,
        phases=phases,
        leader_pos=np.asarray(payload["leader_pos"], dtype=np.float64).reshape(2),
        leader_heading=float(payload["leader_heading"]),
        t=int(payload["t"]),
        n_saved=int(payload["n_saved"]),
    )


TRAJECTORY_FIELDS = (
    "t",
    "leader_x",
    "leader_y",
    "n_free",
    "n_caught",
    "n_exit_zone",
    "n_saved",
    "reward",
)


class TrajectoryWriter:
    """CSV log of per-step aggregates: leader position, phase counts, reward."""

    def __init__(self, stream: IO[str]) -> None:
        self._writer = csv.writer(stream)
        self._writer.writerow(TRAJECTORY_FIELDS)

    def write(self, state: CrowdState, reward: float) -> None:
        counts = state.phase_counts()
        self._writer.writerow(
            [
                state.t,
                _fmt_float(float(state.leader_pos[0])),
                _fmt_float(float(state.leader_pos[1])),
                counts[Phase.FREE],
                counts[Phase.CAUGHT],
                counts[Phase.EXIT_ZONE],
                counts[Phase.SAVED],
                _fmt_float(reward),
            ]
        )

    def write_episode(
        self, states: Iterable[CrowdState], rewards: Iterable[float]
    ) -> None:
        for state, reward in zip(states, rewards):
            self.write(state, reward)
