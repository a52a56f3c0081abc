"""ovir-export command line."""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .export import AdapterConfig, export_detections, export_query
from .formats import AdapterError
from .stub import VOCABULARIES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovir-export",
        description="Export detector output as .ovf frames and .qe query embeddings",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detections", help="export per-frame region files from an RGB-D sequence")
    p.add_argument("--input", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output directory (frames/ created inside)")
    p.add_argument("--vocab", default="lvis", choices=sorted(VOCABULARIES))
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--min-region-pixels", type=int, default=25)
    p.set_defaults(func=cmd_detections)

    p = sub.add_parser("query", help="encode query text into a .qe file")
    p.add_argument("text")
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dim", type=int, default=32)
    p.set_defaults(func=cmd_query)
    return parser


def cmd_detections(args) -> int:
    cfg = AdapterConfig(
        vocabulary=args.vocab,
        score_floor=args.score_floor,
        feature_dim=args.feature_dim,
        min_region_pixels=args.min_region_pixels,
    )
    paths = export_detections(args.input, args.out, cfg)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def cmd_query(args) -> int:
    cfg = AdapterConfig(feature_dim=args.feature_dim)
    path = export_query(args.text, args.out, cfg)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except AdapterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
