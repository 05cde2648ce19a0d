"""Command-line entry points.

Subcommands mirror the experiment kinds plus `replay` for checkpoint
resumption.  Exit codes: 0 success, 2 configuration error, 3 numerical
divergence (CFL violation or non-finite state).
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, Checkpoint, assert_compatible
from .dynamics import CflError, DivergenceError, Integrator
from .experiments import ConfigError, ExperimentConfig, run
from .rng import NoiseStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML config file")
    sub.add_argument("--seed", type=int, help="master seed (overrides config)")
    sub.add_argument("--out", help="output directory (overrides config)")
    sub.add_argument("--threads", type=int, help="worker count for ensembles")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bqlab",
        description="Pseudo-spectral laboratory for the 2D stochastic Boussinesq system",
    )
    subs = p.add_subparsers(dest="command", required=True)
    for kind in (
        "simulate",
        "lyapunov",
        "control-demo",
        "bracket-check",
        "malliavin-probe",
        "span-check",
        "energy-audit",
    ):
        sub = subs.add_parser(kind, help=f"run the {kind} experiment")
        _add_common(sub)
    rep = subs.add_parser("replay", help="resume a trajectory from a checkpoint")
    rep.add_argument("--checkpoint", required=True)
    rep.add_argument("--steps", type=int, default=100)
    rep.add_argument("--save", help="write a new checkpoint here after stepping")
    return p


def load_config(args: argparse.Namespace, kind: str) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_toml(args.config)
        cfg.kind = kind
    else:
        cfg = ExperimentConfig(kind=kind)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def cmd_replay(args: argparse.Namespace) -> int:
    cp = load_checkpoint(args.checkpoint)
    assert_compatible(cp, cp.grid)
    integ = Integrator(cp.grid, cp.params, cp.dt)
    stream = NoiseStream(cp.master_seed, cp.stream_index)
    U = cp.state
    step = cp.step_index
    for k in range(args.steps):
        U = integ.step(U, stream.increment(step + k, cp.dt), context=f"replay step={step + k}")
    if args.save:
        save_checkpoint(
            args.save,
            Checkpoint(cp.grid, cp.params, cp.dt, step + args.steps, cp.master_seed, cp.stream_index, U, cp.ext),
        )
    print(f"replayed {args.steps} steps from step {step}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        cfg = load_config(args, args.command)
        record = run(cfg)
        print(f"{cfg.kind}: ok in {record.wall_clock:.1f}s -> {cfg.out}")
        return EXIT_OK
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CflError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
