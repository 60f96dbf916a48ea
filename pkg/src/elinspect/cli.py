"""Command-line entry point: ``elinspect <subcommand> --workspace DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DependencyError, InspectError, NumericError
from .pipeline import PipelineConfig, Workspace, audit, report, run_all, run_stage

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("elinspect")

SUBCOMMANDS = {
    "synth": ["synth"],
    "train-gan": ["train-gan"],
    "train-encoder": ["train-encoder"],
    "train-ae": ["train-ae"],
    "calibrate": ["calibrate"],
    "score": ["score"],
    "autolabel": ["autolabel"],
    "train-unet": None,
    "evaluate": ["evaluate"],
    "report": ["report"],
    "audit": None,
    "run": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elinspect", description="Solar-cell defect inspection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--workspace", type=Path, required=True)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("whole", "patch"))
        p.add_argument("--labels", choices=("manual", "auto"))
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config is not None:
        config = PipelineConfig.load(args.config)
    else:
        config = Workspace(args.workspace).load_config() or PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    return replace(config, **changes) if changes else config


def _dispatch(args: argparse.Namespace) -> int:
    ws = Workspace(args.workspace)
    if args.command == "audit":
        result = audit(ws)
        for kind in ("orphans", "missing", "modified"):
            for rel in getattr(result, kind):
                print(f"{kind[:-1] if kind == 'orphans' else kind}: {rel}")
        print("audit ok" if result.ok else "audit failed")
        return EXIT_OK if result.ok else EXIT_FAILURE
    config = resolve_config(args)
    if args.command == "run":
        run_all(config, ws)
    elif args.command == "train-unet":
        labels = [args.labels] if args.labels else ["manual", "auto"]
        for lab in labels:
            run_stage(f"train-unet:{lab}", config, ws)
    else:
        for stage in SUBCOMMANDS[args.command]:
            paths = run_stage(stage, config, ws)
            log.info("%s: %d artifacts", stage, len(paths))
    if args.command in ("report", "run"):
        print(report(ws))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InspectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

