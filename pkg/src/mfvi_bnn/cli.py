"""Command-line entry point: ``mfvi-bnn <experiment> [--config F] [--set k=v ...] [--out DIR] [--seed S]``.

Exit status is 0 on success, 1 for a bad configuration or input file and 2
when a run fails (for example a diverging optimizer).
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from importlib import metadata
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, load_file, resolve
from .data import FormatError
from .experiments import RUNNERS, json_safe, write_json
from .limit import UnsupportedConfiguration

MANIFEST_VERSION = 1
log = logging.getLogger("mfvi_bnn")


def code_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5, check=True,
        )
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfvi-bnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file or a previous manifest.json")
        p.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, dotted keys, JSON values (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_cfg = load_file(args.config) if args.config else None
        cfg = resolve(args.experiment, file_cfg, args.assignments, args.out, args.seed)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    before = _snapshot(out)
    try:
        result = RUNNERS[args.experiment](cfg, out)
    except (ConfigError, FormatError, UnsupportedConfiguration) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    after = _snapshot(out)
    outputs = sorted(name for name, stamp in after.items() if before.get(name) != stamp)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "experiment": args.experiment,
        "version": code_version(),
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": [o for o in outputs if o != "manifest.json"],
        "result": result,
    }
    write_json(out / "manifest.json", manifest)
    print(json.dumps(json_safe(result), sort_keys=True))
    return 0


def _snapshot(out: Path) -> dict:
    # a file counts as an output when it is new or was rewritten by this run
    return {p.name: p.stat().st_mtime_ns for p in out.iterdir() if p.is_file()}


if __name__ == "__main__":
    sys.exit(main())
