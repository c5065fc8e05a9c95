"""Command-line entry point: ``adfp <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, grid_from_flags
from .pipeline import BENIGN, Run, RunLockedError, StageError, audit, render_plots

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

SUBCOMMANDS = ("pipeline", "train-dm", "train-victim", "attack", "transform", "train-detector", "evaluate",
               "ablate-steps", "transfer", "spectrum", "plot", "audit")

log = logging.getLogger("adfp.cli")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    common.add_argument("--data", help="'toy' or 'cifar10:PATH'")
    common.add_argument("--attacks", type=_csv_list, help="comma-separated attack families")
    common.add_argument("--eps", type=_csv_list, help="comma-separated budgets, e.g. 1/255,8/255")
    common.add_argument("--dm-steps", type=int, dest="dm_steps", help="diffusion length T")
    common.add_argument("--subsample", type=int, help="DDIM steps S used by transforms")
    common.add_argument("--epochs", type=int, help="epochs for victim, denoiser and detector training")
    common.add_argument("--resume", action="store_true", help="continue a run directory that already has a config")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="adfp", description="Diffusion-fingerprint adversarial detection")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate-steps":
            p.add_argument("--steps", type=_int_list, help="DDIM step counts to compare, e.g. 2,10,50")
        if name in ("ablate-steps", "attack", "transform", "train-detector"):
            p.add_argument("--only", type=_csv_list, help="restrict to these attack names, e.g. pgd_8-255")
    return parser


def resolve_config(args) -> RunConfig:
    """Saved run config or --config file or defaults, then flag overrides.

    ``pipeline`` reads the saved config only with --resume; single-stage commands always extend an existing run.
    """
    saved = args.out / "config.json"
    if saved.exists() and (args.resume or args.command != "pipeline"):
        cfg = RunConfig.from_json(saved.read_text())
    elif args.config is not None:
        cfg = RunConfig.from_toml(args.config)
    else:
        cfg = RunConfig()
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
        for spec in raw["attacks"]:
            spec["seed"] = args.seed
    if args.data is not None:
        raw["data"] = args.data
    if args.dm_steps is not None:
        raw["diffusion"]["T"] = args.dm_steps
        raw["diffusion"]["S"] = min(raw["diffusion"]["S"], args.dm_steps)
    if args.subsample is not None:
        raw["diffusion"]["S"] = args.subsample
    if args.epochs is not None:
        for section in ("victim", "diffusion", "detector"):
            raw[section]["epochs"] = args.epochs
    if args.attacks is not None or args.eps is not None:
        families = args.attacks if args.attacks is not None else sorted({s.family for s in cfg.attacks})
        eps = args.eps if args.eps is not None else sorted({s.epsilon for s in cfg.attacks if s.epsilon is not None})
        grid = grid_from_flags(families, eps, raw["seed"], cfg.attacks)
        raw["attacks"] = [s.to_dict() for s in grid]
        names = set(RunConfig(attacks=grid).attack_names)
        raw["ablation"]["attacks"] = [n for n in raw["ablation"]["attacks"] if n in names]
    return RunConfig.from_dict(raw)


def _names(run: Run, only) -> list[str]:
    names = run.config.attack_names
    if only:
        unknown = sorted(set(only) - set(names))
        if unknown:
            raise ConfigError(f"--only names {unknown} are not in the attack grid {names}")
        names = [n for n in names if n in only]
    return names


def dispatch(args) -> None:
    if args.command == "audit":
        problems = audit(args.out)
        for p in problems:
            print(p)
        if problems:
            raise StageError("audit", f"{len(problems)} problem(s) in {args.out}")
        print(f"{args.out}: ok")
        return
    if args.command == "plot":
        for path in render_plots(args.out):
            print(path)
        return
    cfg = resolve_config(args)
    if (args.out / "config.json").exists() and not args.resume and args.command == "pipeline":
        raise ConfigError(f"{args.out} already holds a run; pass --resume to continue it")
    refresh = {"train-dm": {"dm"}, "train-victim": {"victim"}, "attack": {"attack"},
               "transform": {"transform"}, "train-detector": {"detector"}}.get(args.command, set())
    with Run(cfg, args.out, refresh=refresh) as run:
        cmd = args.command
        if cmd == "pipeline":
            run.pipeline()
        elif cmd == "train-victim":
            run.victim()
            run.report_victim()
        elif cmd == "train-dm":
            run.denoiser()
        elif cmd == "attack":
            for name in _names(run, args.only):
                run.attack_set(name)
            run.report_attacks()
        elif cmd == "transform":
            for name in [BENIGN] + _names(run, args.only):
                run.transformed(name)
        elif cmd == "train-detector":
            for name in _names(run, args.only):
                run.detector(name)
        elif cmd == "evaluate":
            run.report_table3()
            if cfg.reports.identification:
                run.report_identification()
            run.report_dm()
        elif cmd == "ablate-steps":
            run.report_ablation(args.steps, _names(run, args.only) if args.only else None)
        elif cmd == "transfer":
            run.report_transfer()
        elif cmd == "spectrum":
            run.report_spectrum()


def _thread_limit():
    value = os.environ.get("ADFP_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(f"ADFP_THREADS must be a positive integer, got {value!r}") from exc
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("adfp").addHandler(console)
    try:
        with _thread_limit():
            dispatch(args)
    except (ConfigError, RunLockedError) as exc:
        print(f"adfp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, FileNotFoundError) as exc:
        print(f"adfp: {exc}", file=sys.stderr)
        return EXIT_STAGE
    finally:
        logging.getLogger("adfp").removeHandler(console)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
