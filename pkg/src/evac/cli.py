"""Command-line front end: train / eval / field / sweep.

Each command reads an optional YAML config (strict schema, see config.py),
applies flag overrides, resolves an output directory
(--outdir > io.out_dir > $EVAC_OUTDIR > ./runs), and writes its artifacts
under <outdir>/<run-name>/ together with a manifest of the fully resolved
configuration. Re-running a command from a manifest reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_config_file,
    resolved_dict,
)
from .encoding import ENCODER_KINDS, make_encoder
from .environment import load_state, save_state
from .evaluation import (
    CANONICAL_SNAPSHOTS,
    alpha_branch_name,
    alpha_sweep,
    canonical_snapshot,
    curve_to_csv,
    eval_no_leader,
    eval_policy,
    field_to_csv,
    policy_field,
    summary_to_text,
)
from .policy import CheckpointError, load_checkpoint
from .trainer import train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH", help="YAML run config")
    sub.add_argument("--seed", type=int, help="run seed (overrides config)")
    sub.add_argument("--outdir", metavar="DIR", help="output root directory")
    sub.add_argument(
        "--workers",
        type=int,
        default=1,
        help="parallel workers for evaluation episodes / sweep branches",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evac",
        description="Leader-guided evacuation: simulate, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"evac {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p_train = commands.add_parser("train", help="train a leader policy")
    _add_common(p_train)
    p_train.add_argument("--encoder", choices=ENCODER_KINDS, help="observation encoding")
    p_train.add_argument("--alpha", type=float, help="interaction exponent")
    p_train.add_argument("--n", type=int, help="number of individuals")
    p_train.add_argument("--total-timesteps", type=int, help="training budget")
    p_train.set_defaults(func=cmd_train)

    p_eval = commands.add_parser("eval", help="evaluate a trained checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, metavar="PATH")
    p_eval.add_argument("--n", type=int, help="number of individuals")
    p_eval.add_argument(
        "--baseline",
        action="store_true",
        help="also evaluate the no-leader baseline on the same seeds",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_field = commands.add_parser(
        "field", help="render the policy's direction field on a leader grid"
    )
    _add_common(p_field)
    p_field.add_argument("--checkpoint", required=True, metavar="PATH")
    p_field.add_argument(
        "--snapshot",
        default="clustered",
        help=f"frozen-crowd snapshot: one of {CANONICAL_SNAPSHOTS} or a JSON path",
    )
    p_field.add_argument("--grid-res", type=int, help="grid resolution per axis")
    p_field.set_defaults(func=cmd_field)

    p_sweep = commands.add_parser(
        "sweep", help="train one policy per interaction exponent"
    )
    _add_common(p_sweep)
    p_sweep.add_argument(
        "--alphas",
        default="1,2,3,4",
        help="comma-separated exponent list (default 1,2,3,4)",
    )
    p_sweep.add_argument("--encoder", choices=ENCODER_KINDS, help="observation encoding")
    p_sweep.add_argument("--n", type=int, help="number of individuals")
    p_sweep.add_argument("--total-timesteps", type=int, help="budget per branch")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    data = load_config_file(args.config) if args.config else {}
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    env_over = {}
    if getattr(args, "n", None) is not None:
        env_over["n_individuals"] = args.n
    if env_over:
        overrides["env"] = env_over
    train_over = {}
    if getattr(args, "total_timesteps", None) is not None:
        train_over["total_timesteps"] = args.total_timesteps
    if train_over:
        overrides["train"] = train_over
    enc_over = {}
    if getattr(args, "encoder", None) is not None:
        enc_over["kind"] = args.encoder
    if getattr(args, "alpha", None) is not None:
        enc_over["alpha"] = args.alpha
    if enc_over:
        overrides["encoder"] = enc_over
    eval_over = {}
    if getattr(args, "grid_res", None) is not None:
        eval_over["grid_res"] = args.grid_res
    if eval_over:
        overrides["eval"] = eval_over
    if args.outdir is not None:
        overrides["io"] = {"out_dir": args.outdir}
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    return build_run_config(data, overrides)


def _resolve_out_root(config: RunConfig) -> Path:
    if config.io.out_dir:
        return Path(config.io.out_dir)
    env_dir = os.environ.get("EVAC_OUTDIR")
    if env_dir:
        return Path(env_dir)
    return Path("runs")


def _prepare_run_dir(config: RunConfig, default_name: str) -> tuple[Path, RunConfig]:
    """Create <outdir>/<run-name>/ and pin the resolved io paths into config."""
    out_root = _resolve_out_root(config)
    run_name = config.io.run_name or default_name
    config = replace(
        config, io=replace(config.io, out_dir=str(out_root), run_name=run_name)
    )
    run_dir = out_root / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir, config


def _write_manifest(run_dir: Path, config: RunConfig) -> None:
    (run_dir / "manifest.yaml").write_text(
        yaml.safe_dump(resolved_dict(config), sort_keys=True)
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    default_name = (
        f"train-{config.encoder.kind}-a{config.encoder.alpha:g}"
        f"-n{config.env.n_individuals}-s{config.seed}"
    )
    run_dir, config = _prepare_run_dir(config, default_name)
    result = train(
        config.env,
        config.train,
        encoder_kind=config.encoder.kind,
        alpha=config.encoder.alpha,
        seed=config.seed,
        out_dir=run_dir,
        checkpoint_interval=config.io.checkpoint_interval,
        log_interval=config.io.log_interval,
        ema_smoothing=config.eval.ema_smoothing,
        manifest=resolved_dict(config),
    )
    print(
        f"trained {result.global_steps} steps, {result.n_episodes} episodes, "
        f"final EMA return {result.final_ema_return:.17g}; artifacts in {run_dir}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    config = _load_run_config(args)
    if (
        meta.encoder_kind == "ff"
        and meta.input_dim != 2 * config.env.n_individuals + 4
    ):
        raise ConfigError(
            f"checkpoint expects a feed-forward observation of width "
            f"{meta.input_dim} (N={meta.n_individuals}); the environment has "
            f"N={config.env.n_individuals} (width "
            f"{2 * config.env.n_individuals + 4}). Pass --n {meta.n_individuals}."
        )
    encoder = make_encoder(meta.encoder_kind, config.env, meta.alpha)
    ckpt_stem = Path(args.checkpoint).stem
    run_dir, config = _prepare_run_dir(config, f"eval-{ckpt_stem}-s{config.seed}")
    _write_manifest(run_dir, config)
    eval_dir = run_dir / "eval"
    eval_dir.mkdir(exist_ok=True)

    curve, summary = eval_policy(
        model,
        encoder,
        config.env,
        config.eval.n_runs,
        config.seed,
        workers=args.workers,
    )
    curve_to_csv(curve, eval_dir / "curve.csv")
    summary_to_text(summary, eval_dir / "summary.txt")
    print(
        f"policy: completion rate {summary.completion_rate:.3f} over "
        f"{summary.n_runs} episodes"
    )
    if args.baseline:
        base_curve, base_summary = eval_no_leader(
            config.env, config.eval.n_runs, config.seed, workers=args.workers
        )
        curve_to_csv(base_curve, eval_dir / "baseline.csv")
        summary_to_text(base_summary, eval_dir / "baseline_summary.txt")
        print(
            f"no-leader baseline: completion rate {base_summary.completion_rate:.3f} "
            f"over {base_summary.n_runs} episodes"
        )
    return EXIT_OK


def cmd_field(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    config = _load_run_config(args)

    if args.snapshot in CANONICAL_SNAPSHOTS:
        env_config = config.env
        if meta.encoder_kind == "ff" and env_config.n_individuals != meta.n_individuals:
            raise ConfigError(
                f"checkpoint was trained with N={meta.n_individuals} "
                f"(feed-forward); pass --n {meta.n_individuals}"
            )
        snapshot = canonical_snapshot(args.snapshot, env_config)
        snap_name = args.snapshot
    else:
        snap_path = Path(args.snapshot)
        if not snap_path.is_file():
            raise ConfigError(
                f"--snapshot must be one of {CANONICAL_SNAPSHOTS} or an existing "
                f"file, got {args.snapshot!r}"
            )
        snapshot = load_state(snap_path)
        env_config = config.env
        if snapshot.n_individuals != env_config.n_individuals:
            env_config = replace(
                env_config, n_individuals=snapshot.n_individuals
            )
        if meta.encoder_kind == "ff" and snapshot.n_individuals != meta.n_individuals:
            raise ConfigError(
                f"snapshot has N={snapshot.n_individuals} but the feed-forward "
                f"checkpoint expects N={meta.n_individuals}"
            )
        snap_name = snap_path.stem

    encoder = make_encoder(meta.encoder_kind, env_config, meta.alpha)
    if encoder.dim != meta.input_dim:
        raise ConfigError(
            f"encoder width {encoder.dim} does not match checkpoint input "
            f"width {meta.input_dim}"
        )
    grid_res = config.eval.grid_res
    ckpt_stem = Path(args.checkpoint).stem
    run_dir, config = _prepare_run_dir(config, f"field-{ckpt_stem}-{snap_name}")
    _write_manifest(run_dir, config)
    field = policy_field(
        model, encoder, snapshot, grid_res, env_config, descriptor=snap_name
    )
    field_to_csv(field, run_dir / "field.csv")
    save_state(snapshot, run_dir / "snapshot.json")
    print(
        f"wrote {field.cell_x.size} grid cells ({grid_res}x{grid_res}, "
        f"snapshot {snap_name}) to {run_dir / 'field.csv'}"
    )
    return EXIT_OK


def _parse_alphas(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--alphas must name at least one exponent")
    try:
        alphas = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"--alphas: {exc}") from exc
    if len(set(alphas)) != len(alphas):
        raise ConfigError(f"--alphas: duplicate exponents in {text!r}")
    return alphas


def cmd_sweep(args: argparse.Namespace) -> int:
    alphas = _parse_alphas(args.alphas)
    config = _load_run_config(args)
    default_name = (
        f"sweep-{config.encoder.kind}-n{config.env.n_individuals}-s{config.seed}"
    )
    run_dir, config = _prepare_run_dir(config, default_name)
    _write_manifest(run_dir, config)
    manifests = {
        a: resolved_dict(
            replace(
                config,
                encoder=replace(config.encoder, alpha=float(a)),
                io=replace(
                    config.io,
                    run_name=f"{config.io.run_name}/{alpha_branch_name(a)}",
                ),
            )
        )
        for a in alphas
    }
    rows = alpha_sweep(
        config.env,
        config.train,
        alphas,
        config.seed,
        run_dir,
        encoder_kind=config.encoder.kind,
        checkpoint_interval=config.io.checkpoint_interval,
        ema_smoothing=config.eval.ema_smoothing,
        workers=args.workers,
        manifests=manifests,
    )
    for row in rows:
        print(
            f"alpha {row['alpha']:g}: final EMA return "
            f"{row['final_ema_return']:.17g}, mean episode length "
            f"{row['mean_episode_length']:.1f}"
        )
    print(f"summary in {run_dir / 'summary.csv'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures: one-line diagnostic, exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
