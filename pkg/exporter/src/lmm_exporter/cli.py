"""Exporter command line: extract features or dump per-layer states."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import extract, layer_dump
from .models import CheckpointLoadError, ExporterConfig


def _video_paths(args) -> list[Path]:
    if args.manifest:
        base = Path(args.manifest).parent
        paths = []
        for line in Path(args.manifest).read_text(encoding="utf-8").splitlines():
            if line.strip():
                paths.append(base / line.split("\t")[0])
        return paths
    return [Path(p) for p in args.videos]


def _add_common(p):
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--videos", nargs="+", help="clip container files")
    group.add_argument("--manifest", help="corpus manifest (tab-separated)")
    p.add_argument("--vision", default="tiny",
                   help="vision checkpoint id/path, or 'tiny'")
    p.add_argument("--lm", default="tiny",
                   help="language model checkpoint id/path, or 'tiny'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interval", type=float, default=6.0,
                   help="frame sampling interval in seconds")
    p.add_argument("--max-tokens", type=int, default=64,
                   help="fixed greedy generation budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmm-export",
        description="offline vision/LM feature extraction into the MMFR format")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write an MMFR feature file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--out", required=True, help="feature file path")

    p = sub.add_parser("layer-dump", help="write per-layer feature CSVs",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExporterConfig(vision=args.vision, lm=args.lm, seed=args.seed,
                         interval_s=args.interval, max_tokens=args.max_tokens)
    paths = _video_paths(args)
    try:
        if args.command == "extract":
            count, warnings = extract(paths, cfg, args.out)
            print(f"wrote {count} records to {args.out} "
                  f"({len(warnings)} files skipped)")
        else:
            count, warnings = layer_dump(paths, cfg, args.out_dir)
            print(f"dumped layer features for {count} frames under {args.out_dir} "
                  f"({len(warnings)} files skipped)")
        return 0
    except (CheckpointLoadError, OSError, ValueError) as exc:
        print(f"lmm-export: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
