"""Command line: shim <script> --workspace DIR [--seed N]."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .runner import shim_run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shim",
        description=(
            "Run one generated experiment script inside a workspace, "
            "injecting the seed and emitting manifest.json afterwards."
        ),
    )
    parser.add_argument("script", help="experiment script to run")
    parser.add_argument("--workspace", required=True, help="working directory for the run")
    parser.add_argument("--seed", type=int, default=None, help="seed to inject into the script header")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _manifest, status = shim_run(args.script, args.workspace, args.seed)
    except FileNotFoundError as exc:
        print(f"shim: {exc}", file=sys.stderr)
        return 2
    return status


if __name__ == "__main__":
    sys.exit(main())
