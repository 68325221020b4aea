"""Command-line entry point: ``cpotfs <experiment> --config FILE --out CSV``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, load_toml
from .harness import KINDS, default_spec, run, spec_from_mapping, write_outputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpotfs", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="TOML experiment file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="master seed (overrides the file)")
        p.add_argument("--out", default=f"{kind}.csv", help="CSV output path")
        p.add_argument("--trials", type=int, help="trial count override")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("--full-scale", action="store_true",
                       help="use the full-size system (slow)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            spec = spec_from_mapping(load_toml(args.config), args.experiment, args.full_scale)
        else:
            spec = default_spec(args.experiment, args.full_scale)
        changes = {k: getattr(args, k) for k in ("seed", "trials", "workers")
                   if getattr(args, k) is not None}
        if any(v < 0 for v in changes.values()):
            raise ConfigError("seed, trials and workers must be non-negative")
        spec = replace(spec, **changes)
        rows = run(spec)
    except (ConfigError, OSError) as exc:
        print(f"cpotfs: error: {exc}", file=sys.stderr)
        return 2
    csv_path, json_path = write_outputs(rows, spec, args.out)
    print(f"wrote {len(rows)} rows to {csv_path} (config in {json_path})")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
