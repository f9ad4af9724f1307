"""``gradmatch <experiment> --config PATH`` entry point.

Exit codes: 0 success, 1 usage or config error, 2 when the fraction of
failed runs exceeds ``failure_tolerance``.
"""
from __future__ import annotations

import argparse
import sys

from . import config as cfgmod
from .output import write_outputs
from .runners import RUNNERS, output_stem

EXIT_OK, EXIT_USAGE, EXIT_RUN_FAILURES = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradmatch", description="Gradient-matching experiments at desk scale.")
    sub = parser.add_subparsers(dest="experiment", metavar="experiment")
    sub.required = True
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--output-dir", help="override output_dir (the environment variable wins over both)")
        if name == "early-stopping":
            p.add_argument("--panel", choices=("a", "b", "c", "d", "e"))
        if name == "bootstrap":
            p.add_argument("--mode", choices=("recovery", "sigma-sweep"))
    return parser


def exceeds_tolerance(failures: int, total: int, tolerance: float) -> bool:
    return total > 0 and failures / total > tolerance


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    overrides = {}
    for key in ("panel", "mode", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    try:
        cfg = cfgmod.load(args.experiment, args.config, overrides)
    except (cfgmod.ConfigError, OSError) as exc:
        print(f"gradmatch: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = RUNNERS[args.experiment](cfg)
    for line in out.summary:
        print(line)
    for path in write_outputs(cfg, out, output_stem(cfg)):
        print(f"wrote {path}")
    if exceeds_tolerance(out.failures, out.total, cfg["failure_tolerance"]):
        print(f"gradmatch: {out.failures}/{out.total} runs failed "
              f"(tolerance {cfg['failure_tolerance']:g})", file=sys.stderr)
        return EXIT_RUN_FAILURES
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
