"""Command-line wrapper around :func:`devkit_export.export.export`."""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportError, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="scenelog-export",
        description="Export nuScenes-format devkit tables to scenelog/1 files.",
    )
    parser.add_argument("--devkit-root", required=True, help="dataset root holding v1.0-*/")
    parser.add_argument("--output-dir", required=True)
    parser.add_argument("--split", default="mini", help="split name (default: mini)")
    parser.add_argument("--version", default=None, help="table directory (default: v1.0-<split>)")
    args = parser.parse_args(argv)

    try:
        manifest = export(args.devkit_root, args.output_dir, args.split, args.version)
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(manifest.as_dict(), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
