"""Command-line wrapper: `hieradv-plots landscape ...` and `hieradv-plots early ...`."""

from __future__ import annotations

import argparse
import sys

from .render import STYLES, render_early_curve, render_landscape


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hieradv-plots", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    landscape = sub.add_parser("landscape", help="contour or surface view of grid CSVs")
    landscape.add_argument("grids", nargs="+", help="grid CSV files (sidecar required)")
    landscape.add_argument("--style", choices=STYLES, default="contour2d")
    landscape.add_argument("--out", help="output PNG (default: next to the first input)")

    early = sub.add_parser("early", help="accuracy-vs-k curves from k,accuracy CSVs")
    early.add_argument("csvs", nargs="+", help="early-detection CSV files")
    early.add_argument("--out", help="output PNG (default: next to the first input)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "landscape":
            out = render_landscape(args.grids, style=args.style, out=args.out)
        else:
            out = render_early_curve(args.csvs, out=args.out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
