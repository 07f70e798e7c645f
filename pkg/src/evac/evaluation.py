"""Evaluation harness: evacuation curves, policy fields, EMA, exponent sweep.

Evacuation curves report, per time step, the fraction of evaluation episodes
in which not everyone has been saved yet; runs still incomplete at the
horizon contribute probability mass 1 throughout ("censored"). Policy fields
place the leader on a regular grid over the room with the crowd frozen and
record the deterministic action direction per cell. The exponent sweep trains
one policy per interaction exponent under identical seeds and budget.

Episodes are embarrassingly parallel: each draws its RNG from a child of the
evaluation seed, ordered by episode index, so results are identical for any
worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .csvio import fmt_float, write_csv
from .encoding import Encoder
from .environment import (
    CrowdState,
    EnvConfig,
    EvacuationEnv,
    Phase,
    classify_phases,
    no_leader_step,
)
from .environment import reset as env_reset
from .geometry import canonicalize_angles
from .policy import ActorCritic
from .trainer import TrainConfig, TrainResult, train

__all__ = [
    "EvacCurve",
    "EvalSummary",
    "PolicyField",
    "eval_policy",
    "eval_no_leader",
    "policy_field",
    "ema",
    "alpha_sweep",
    "canonical_snapshot",
    "CANONICAL_SNAPSHOTS",
    "curve_to_csv",
    "summary_to_text",
    "field_to_csv",
    "CURVE_FIELDS",
    "FIELD_FIELDS",
    "SWEEP_SUMMARY_FIELDS",
]

CURVE_FIELDS = ("t", "p_incomplete")
FIELD_FIELDS = ("cell_x", "cell_y", "dir_x", "dir_y", "flag")
SWEEP_SUMMARY_FIELDS = (
    "alpha",
    "final_ema_return",
    "mean_episode_length",
    "n_episodes",
    "global_steps",
)


@dataclass
class EvacCurve:
    """P(evacuation incomplete at time t) over a shared step grid."""

    times: np.ndarray  # 0..t_max inclusive
    probability_incomplete: np.ndarray
    n_runs: int
    seed: int  # base seed; episode i uses spawn child i
    completion_times: list[int | None]  # None = censored at t_max

    def __post_init__(self) -> None:
        p = self.probability_incomplete
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.diff(p) > 0.0):
            raise ValueError("probability_incomplete must be non-increasing")


@dataclass
class EvalSummary:
    """Completion statistics over the evaluation episodes."""

    n_runs: int
    n_completed: int
    completion_rate: float
    mean_completion_time: float  # over completed runs only; nan if none
    median_completion_time: float


@dataclass
class PolicyField:
    """Deterministic action directions on a leader-placement grid."""

    cell_x: np.ndarray
    cell_y: np.ndarray
    dir_x: np.ndarray
    dir_y: np.ndarray
    flags: np.ndarray  # True where the action mean was exactly zero
    grid_res: int
    descriptor: str


def _curve_and_summary(
    completion_times: list[int | None], t_max: int, n_runs: int, seed: int
) -> tuple[EvacCurve, EvalSummary]:
    times = np.arange(t_max + 1)
    completed = np.sort(
        np.array([t for t in completion_times if t is not None], dtype=np.int64)
    )
    if n_runs > 0:
        counts = np.searchsorted(completed, times, side="right")
        p_incomplete = 1.0 - counts / n_runs
    else:
        p_incomplete = np.zeros_like(times, dtype=np.float64)
    curve = EvacCurve(
        times=times,
        probability_incomplete=p_incomplete,
        n_runs=n_runs,
        seed=seed,
        completion_times=list(completion_times),
    )
    summary = EvalSummary(
        n_runs=n_runs,
        n_completed=int(completed.size),
        completion_rate=float(completed.size / n_runs) if n_runs else math.nan,
        mean_completion_time=float(completed.mean()) if completed.size else math.nan,
        median_completion_time=(
            float(np.median(completed)) if completed.size else math.nan
        ),
    )
    return curve, summary


def _policy_episode(
    model: ActorCritic,
    encoder: Encoder,
    env_config: EnvConfig,
    seed_seq: np.random.SeedSequence,
) -> int | None:
    """First step at which everyone is saved, or None if censored."""
    env = EvacuationEnv(env_config, rng=np.random.default_rng(seed_seq))
    state = env.reset()
    if state.n_saved == env_config.n_individuals:
        return 0
    while not env.done:
        sample = model.sample_action(encoder(state), rng=None, mode="eval")
        outcome = env.step(sample.action)
        state = outcome.state
        if outcome.terminated:
            return state.t
    return None


def _policy_episode_star(args) -> int | None:
    return _policy_episode(*args)


def _baseline_episode(
    env_config: EnvConfig, seed_seq: np.random.SeedSequence
) -> int | None:
    rng = np.random.default_rng(seed_seq)
    state = env_reset(env_config, rng)
    if state.n_saved == env_config.n_individuals:
        return 0
    while state.t < env_config.t_max:
        state = no_leader_step(state, env_config, rng)
        if state.n_saved == env_config.n_individuals:
            return state.t
    return None


def _baseline_episode_star(args) -> int | None:
    return _baseline_episode(*args)


def _run_episodes(worker_fn, tasks: list, workers: int) -> list:
    if workers <= 1:
        return [worker_fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker_fn, tasks))


def eval_policy(
    model: ActorCritic,
    encoder: Encoder,
    env_config: EnvConfig,
    n_runs: int,
    seed: int,
    workers: int = 1,
) -> tuple[EvacCurve, EvalSummary]:
    """Evacuation curve of the deterministic (mean-action) policy.

    Episode i runs on the i-th child stream of the seed; the aggregation is a
    reduction over episode indices, so any worker count gives identical
    results.
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    if encoder.dim != model.input_dim:
        raise ValueError(
            f"encoder dim {encoder.dim} does not match policy input "
            f"{model.input_dim}"
        )
    if encoder.kind == "ff" and encoder.n_individuals != env_config.n_individuals:
        raise ValueError(
            f"ff encoder built for N={encoder.n_individuals} cannot evaluate "
            f"an env with N={env_config.n_individuals}"
        )
    children = np.random.SeedSequence(seed).spawn(n_runs)
    tasks = [(model, encoder, env_config, child) for child in children]
    completion = _run_episodes(_policy_episode_star, tasks, workers)
    return _curve_and_summary(completion, env_config.t_max, n_runs, seed)


def eval_no_leader(
    env_config: EnvConfig,
    n_runs: int,
    seed: int,
    workers: int = 1,
) -> tuple[EvacCurve, EvalSummary]:
    """Evacuation curve with no leader (pure noisy alignment dynamics)."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    children = np.random.SeedSequence(seed).spawn(n_runs)
    tasks = [(env_config, child) for child in children]
    completion = _run_episodes(_baseline_episode_star, tasks, workers)
    return _curve_and_summary(completion, env_config.t_max, n_runs, seed)


def policy_field(
    model: ActorCritic,
    encoder: Encoder,
    frozen_state: CrowdState,
    grid_res: int,
    env_config: EnvConfig,
    descriptor: str = "custom",
) -> PolicyField:
    """Deterministic action direction per leader placement on a grid.

    The crowd's positions are frozen; phases are re-derived per cell from the
    zone tests (the placed leader may catch different individuals at
    different cells). Directions are unit vectors; a cell where the action
    mean is exactly zero is flagged and stores a zero vector instead.
    """
    if grid_res < 2:
        raise ValueError(f"grid_res must be >= 2, got {grid_res}")
    hw = env_config.half_width
    axis = np.linspace(-hw, hw, grid_res)
    cells = np.array([(x, y) for y in axis for x in axis])
    n_cells = cells.shape[0]

    obs = np.empty((n_cells, encoder.dim))
    for j, cell in enumerate(cells):
        placed = CrowdState(
            positions=frozen_state.positions,
            headings=frozen_state.headings,
            phases=classify_phases(frozen_state.positions, cell, env_config),
            leader_pos=cell,
            leader_heading=frozen_state.leader_heading,
            t=frozen_state.t,
            n_saved=frozen_state.n_saved,
        )
        obs[j] = encoder(placed)

    with torch.no_grad():
        means, _, _ = model.forward(torch.from_numpy(obs))
    means = means.numpy()
    norms = np.hypot(means[:, 0], means[:, 1])
    flags = norms == 0.0
    safe = np.where(flags, 1.0, norms)
    dirs = means / safe[:, None]
    dirs[flags] = 0.0
    return PolicyField(
        cell_x=cells[:, 0],
        cell_y=cells[:, 1],
        dir_x=dirs[:, 0],
        dir_y=dirs[:, 1],
        flags=flags,
        grid_res=grid_res,
        descriptor=descriptor,
    )


def ema(series, smoothing: float) -> np.ndarray:
    """Exponential moving average: y_0 = x_0, y_t = s*y_{t-1} + (1-s)*x_t."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("ema of an empty series")
    if not 0.0 < smoothing < 1.0:
        raise ValueError(f"smoothing must be in (0, 1), got {smoothing}")
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = smoothing * out[t - 1] + (1.0 - smoothing) * x[t]
    return out


# --- exponent sweep -----------------------------------------------------------


def _sweep_branch(args) -> tuple[float, TrainResult]:
    (
        alpha,
        env_config,
        train_config,
        encoder_kind,
        seed,
        branch_dir,
        checkpoint_interval,
        ema_smoothing,
        manifest,
    ) = args
    result = train(
        env_config,
        train_config,
        encoder_kind=encoder_kind,
        alpha=alpha,
        seed=seed,
        out_dir=branch_dir,
        checkpoint_interval=checkpoint_interval,
        ema_smoothing=ema_smoothing,
        manifest=manifest,
    )
    return alpha, result


def alpha_branch_name(alpha: float) -> str:
    return f"alpha_{alpha:g}"


def alpha_sweep(
    env_config: EnvConfig,
    train_config: TrainConfig,
    alphas: list[float],
    seed: int,
    out_dir: str | Path,
    encoder_kind: str = "grav",
    checkpoint_interval: int = 500_000,
    ema_smoothing: float = 0.99,
    workers: int = 1,
    manifests: dict[float, dict] | None = None,
) -> list[dict]:
    """Train one policy per exponent under identical seed and budget.

    Writes each branch under out_dir/alpha_<value>/ (full trainer layout) and
    a summary.csv comparing final EMA return and mean episode length. Returns
    the summary rows in the order the exponents were given.
    """
    if not alphas:
        raise ValueError("alphas must be a non-empty list")
    if len(set(alphas)) != len(alphas):
        raise ValueError(f"duplicate exponents in {alphas}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (
            float(a),
            env_config,
            train_config,
            encoder_kind,
            seed,
            out_dir / alpha_branch_name(a),
            checkpoint_interval,
            ema_smoothing,
            (manifests or {}).get(a),
        )
        for a in alphas
    ]
    if workers <= 1:
        results = [_sweep_branch(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_branch, tasks))

    rows = []
    for alpha, result in results:
        rows.append(
            {
                "alpha": alpha,
                "final_ema_return": result.final_ema_return,
                "mean_episode_length": result.mean_episode_length,
                "n_episodes": result.n_episodes,
                "global_steps": result.global_steps,
            }
        )
    write_csv(
        out_dir / "summary.csv",
        SWEEP_SUMMARY_FIELDS,
        [
            [
                fmt_float(row["alpha"]),
                fmt_float(row["final_ema_return"]),
                fmt_float(row["mean_episode_length"]),
                row["n_episodes"],
                row["global_steps"],
            ]
            for row in rows
        ],
    )
    return rows


# --- canonical frozen snapshots ------------------------------------------------

CANONICAL_SNAPSHOTS = ("clustered", "dispersed")

# Fixed, artifact-defined frozen crowds for policy-field rendering. The
# clustered one puts every individual in a small disc well away from the exit
# and the parked leader, so all phases are FREE and the crowd acts as one
# localized attractor for the catch force.
_SNAPSHOT_SEED = 715225
_CLUSTER_CENTER = (0.55, 0.62)  # in units of half_width
_CLUSTER_RADIUS = 0.04
_PARKED_LEADER = (-0.9, -0.9)


def canonical_snapshot(kind: str, config: EnvConfig) -> CrowdState:
    """One of the two named frozen crowds ("clustered" / "dispersed")."""
    if kind not in CANONICAL_SNAPSHOTS:
        raise ValueError(
            f"unknown snapshot {kind!r}, expected one of {CANONICAL_SNAPSHOTS}"
        )
    rng = np.random.default_rng(_SNAPSHOT_SEED)
    n = config.n_individuals
    hw = config.half_width
    if kind == "clustered":
        center = np.asarray(_CLUSTER_CENTER) * hw
        radii = _CLUSTER_RADIUS * hw * np.sqrt(rng.random(n))
        angles = rng.uniform(-math.pi, math.pi, n)
        positions = center[None, :] + radii[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
        leader_pos = np.asarray(_PARKED_LEADER) * hw
    else:
        positions = rng.uniform(-hw, hw, size=(n, 2))
        leader_pos = np.zeros(2)
    headings = canonicalize_angles(rng.uniform(-math.pi, math.pi, size=n))
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


# --- CSV / text exports ---------------------------------------------------------


def curve_to_csv(curve: EvacCurve, path: str | Path) -> None:
    write_csv(
        path,
        CURVE_FIELDS,
        (
            [int(t), fmt_float(p)]
            for t, p in zip(curve.times, curve.probability_incomplete)
        ),
    )


def summary_to_text(summary: EvalSummary, path: str | Path) -> None:
    """Flat key=value lines."""
    lines = [
        f"n_runs={summary.n_runs}",
        f"n_completed={summary.n_completed}",
        f"completion_rate={fmt_float(summary.completion_rate)}",
        f"mean_completion_time={fmt_float(summary.mean_completion_time)}",
        f"median_completion_time={fmt_float(summary.median_completion_time)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def field_to_csv(field: PolicyField, path: str | Path) -> None:
    write_csv(
        path,
        FIELD_FIELDS,
        (
            [
                fmt_float(field.cell_x[j]),
                fmt_float(field.cell_y[j]),
                fmt_float(field.dir_x[j]),
                fmt_float(field.dir_y[j]),
                int(field.flags[j]),
            ]
            for j in range(field.cell_x.size)
        ),
    )
