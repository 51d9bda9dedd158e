"""
Command-line entry point.

    photocal <simulate|calibrate|tomography|report> <subtype> --config <path>
             --out <dir> [--seed N] [--threads N] [--data PATH ...]
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from ..config import get_settings
from ..core.error_handlers import handle_cli_exception
from ..logging_config import LogMessages, generate_run_id, get_run_logger, setup_logging
from .commands import (
    CALIBRATE_SUBTYPES,
    SIMULATE_SUBTYPES,
    TOMOGRAPHY_SUBTYPES,
    RunContext,
    cmd_calibrate,
    cmd_report,
    cmd_simulate,
    cmd_tomography,
)


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True):
    if needs_config:
        parser.add_argument("--config", type=Path, required=True,
                            help="experiment file (.toml or .json)")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads (default: PHOTOCAL_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="photocal",
                                description="Photon-counting detector calibration and tomography")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic datasets")
    s.add_argument("subtype", choices=SIMULATE_SUBTYPES)
    _add_common(s)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")

    c = sub.add_parser("calibrate", help="absolute efficiency from recorded counts")
    c.add_argument("subtype", choices=CALIBRATE_SUBTYPES)
    _add_common(c)
    c.add_argument("--data", type=Path, nargs="+", required=True, help="data files")
    c.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("tomography", help="POVM reconstruction")
    t.add_argument("subtype", choices=TOMOGRAPHY_SUBTYPES)
    _add_common(t)
    t.add_argument("--data", type=Path, nargs="+", required=True, help="data files")
    t.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("report", help="aggregate run manifests")
    r.add_argument("manifests", type=Path, nargs="+", help="manifest.json files")
    _add_common(r, needs_config=False)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    tool_logger = setup_logging(settings.tool_name, settings.log_level, settings.log_json)

    run_id = generate_run_id()
    operation = f"{args.command} {getattr(args, 'subtype', '')}".strip()
    log = get_run_logger(tool_logger, run_id, operation)

    threads = args.threads if args.threads is not None else settings.threads
    ctx = RunContext(
        out_dir=args.out,
        config_path=getattr(args, "config", None),
        data=getattr(args, "data", None) or (),
        seed=getattr(args, "seed", None),
        threads=max(1, threads),
        run_id=run_id,
        settings=settings,
    )

    log.info(LogMessages.RUN_STARTED)
    try:
        if args.command == "simulate":
            manifest = cmd_simulate(args.subtype, ctx)
        elif args.command == "calibrate":
            manifest = cmd_calibrate(args.subtype, ctx)
        elif args.command == "tomography":
            manifest = cmd_tomography(args.subtype, ctx)
        else:
            manifest = cmd_report(args.manifests, ctx)
    except Exception as exc:
        log.info(LogMessages.RUN_FAILED)
        return handle_cli_exception(exc, operation, run_id)

    log.info(LogMessages.RUN_COMPLETED, extra={"outputs": len(manifest.outputs)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
