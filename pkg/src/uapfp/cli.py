"""Command line entry point: ``uapfp <command> --config <path> [--seed S] [--out DIR] [--set key=value ...]``.

Exit status 0 on success, 1 on a runtime failure, 2 on an invalid config.
Errors are printed to stderr as one JSON record.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, Run, run_stage

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="uapfp", description="UAP-based black-box model fingerprinting pipeline")
    p.add_argument("command", choices=list(STAGES) + ["all"], help="pipeline stage to run ('all' runs every stage)")
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", help="output root, overrides the config (UAPFP_OUT overrides both)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. fingerprint.n=50; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error(kind, message, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
    except ConfigError as exc:
        _error("config", str(exc), fields=[{"field": k, "message": m} for k, m in exc.errors])
        return EXIT_CONFIG

    commands = list(STAGES) if args.command == "all" else [args.command]
    run = Run(cfg)
    bundles = []
    for command in commands:
        try:
            bundles.append(run_stage(cfg, command, run))
        except Exception as exc:  # runtime failure: report what completed
            logging.getLogger("uapfp").debug("stage failed", exc_info=True)
            _error("runtime", f"{type(exc).__name__}: {exc}", command=command,
                   partial=[a for b in bundles for a in b["artifacts"]], run_dir=str(run.dir))
            return EXIT_RUNTIME
    for b in bundles:
        print(json.dumps({k: b[k] for k in ("command", "run_dir", "seed")} | {"n_artifacts": len(b["artifacts"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
