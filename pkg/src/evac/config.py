"""Run configuration: strict schema, defaults, YAML load/dump.

A run config has five sections (env, train, encoder, eval, io) plus a
top-level seed. Unknown sections or keys are rejected by name; omitted keys
fall back to the package defaults. The same schema is written back out as a
run manifest, so a manifest is itself a valid config file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .encoding import ENCODER_KINDS
from .environment import EnvConfig
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "EvalConfig",
    "IoConfig",
    "RunConfig",
    "load_config_file",
    "build_run_config",
    "resolved_dict",
]


class ConfigError(Exception):
    """Invalid configuration file, key, value, or combination."""


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "grav"
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ValueError(
                f"kind must be one of {ENCODER_KINDS}, got {self.kind!r}"
            )
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class EvalConfig:
    n_runs: int = 200
    grid_res: int = 21
    ema_smoothing: float = 0.99

    def __post_init__(self) -> None:
        if self.n_runs < 1:
            raise ValueError(f"n_runs must be >= 1, got {self.n_runs}")
        if self.grid_res < 2:
            raise ValueError(f"grid_res must be >= 2, got {self.grid_res}")
        if not 0.0 < self.ema_smoothing < 1.0:
            raise ValueError(
                f"ema_smoothing must be in (0, 1), got {self.ema_smoothing}"
            )


@dataclass(frozen=True)
class IoConfig:
    out_dir: str | None = None  # fallback: $EVAC_OUTDIR, then ./runs
    run_name: str | None = None  # default derived from command parameters
    checkpoint_interval: int = 500_000  # global steps; <= 0 = final only
    log_interval: int = 1  # progress log every k updates; <= 0 silences


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    train: TrainConfig
    encoder: EncoderConfig
    eval: EvalConfig
    io: IoConfig
    seed: int = 0


_SECTION_TYPES = {
    "env": EnvConfig,
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "eval": EvalConfig,
    "io": IoConfig,
}

# Value shapes per key. "float" accepts ints; "int" and "bool" are strict
# (YAML makes the distinction, and a bool is not a count).
_SCHEMA: dict[str, dict[str, str]] = {
    "env": {
        "half_width": "float",
        "vicsek_radius": "float",
        "leader_radius": "float",
        "noise": "float",
        "speed": "float",
        "t_max": "int",
        "n_individuals": "int",
        "exit_radius": "float",
        "enslaving_degree": "float",
        "exit_point": "point_or_null",
        "save_radius": "float",
        "entry_reward_base": "float",
        "entry_reward_bonus": "float",
        "step_penalty": "float",
    },
    "train": {
        "gamma": "float",
        "gae_lambda": "float",
        "clip_coef": "float",
        "vf_coef": "float",
        "ent_coef": "float",
        "learning_rate": "float",
        "anneal_lr": "bool",
        "update_epochs": "int",
        "num_minibatches": "int",
        "max_grad_norm": "float",
        "norm_adv": "bool",
        "clip_vloss": "bool",
        "total_timesteps": "int",
        "target_kl": "float_or_null",
        "rpo_alpha": "float",
        "num_envs": "int",
        "num_steps": "int",
        "dropout": "float",
        "deterministic": "bool",
    },
    "encoder": {
        "kind": "str",
        "alpha": "float",
    },
    "eval": {
        "n_runs": "int",
        "grid_res": "int",
        "ema_smoothing": "float",
    },
    "io": {
        "out_dir": "str_or_null",
        "run_name": "str_or_null",
        "checkpoint_interval": "int",
        "log_interval": "int",
    },
}


def _coerce(value, shape: str, section: str, key: str):
    where = f"key '{key}' in section '{section}'"
    if shape == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if shape == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if shape == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if shape == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if shape == "float_or_null":
        if value is None:
            return None
        return _coerce(value, "float", section, key)
    if shape == "str_or_null":
        if value is None:
            return None
        return _coerce(value, "str", section, key)
    if shape == "point_or_null":
        if value is None:
            return None
        if (
            not isinstance(value, (list, tuple))
            or len(value) != 2
            or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in value)
        ):
            raise ConfigError(
                f"{where}: expected a pair of numbers [x, y], got {value!r}"
            )
        return (float(value[0]), float(value[1]))
    raise AssertionError(f"unhandled shape {shape}")


def load_config_file(path: str | Path) -> dict:
    """YAML text -> raw mapping (top level must be a mapping or empty)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return data


def _merge_section(section: str, *sources: dict) -> dict:
    """Validate + coerce keys of one section across file data and overrides."""
    schema = _SCHEMA[section]
    merged: dict = {}
    for source in sources:
        if not source:
            continue
        if not isinstance(source, dict):
            raise ConfigError(f"section '{section}' must be a mapping")
        for key, value in source.items():
            if key not in schema:
                raise ConfigError(f"unknown key '{key}' in section '{section}'")
            merged[key] = _coerce(value, schema[key], section, key)
    return merged


def build_run_config(data: dict, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults <- file data <- overrides into a validated RunConfig.

    ``overrides`` uses the same nested layout as the file. Raises ConfigError
    naming the offending section/key for any unknown or ill-typed entry, and
    for values the component configs reject.
    """
    overrides = overrides or {}
    known = set(_SECTION_TYPES) | {"seed"}
    for source in (data, overrides):
        for key in source:
            if key not in known:
                raise ConfigError(
                    f"unknown section '{key}' (expected one of "
                    f"{sorted(_SECTION_TYPES)} or 'seed')"
                )

    seed = 0
    for source in (data, overrides):
        if "seed" in source:
            value = source["seed"]
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"key 'seed': expected an integer, got {value!r}")
            seed = value

    sections: dict[str, object] = {}
    for section, cls in _SECTION_TYPES.items():
        kwargs = _merge_section(section, data.get(section), overrides.get(section))
        if section == "env":
            kwargs["seed"] = seed
        try:
            sections[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid section '{section}': {exc}") from exc

    return RunConfig(
        env=sections["env"],
        train=sections["train"],
        encoder=sections["encoder"],
        eval=sections["eval"],
        io=sections["io"],
        seed=seed,
    )


def resolved_dict(config: RunConfig) -> dict:
    """RunConfig -> plain schema-valid mapping (manifest payload).

    The result round-trips through build_run_config to an identical config.
    """
    out: dict = {"seed": config.seed}
    for section, cls in _SECTION_TYPES.items():
        obj = getattr(config, section)
        body = {}
        for f in fields(cls):
            if section == "env" and f.name == "seed":
                continue  # mirrored from the top-level seed
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            body[f.name] = value
        out[section] = body
    return out
