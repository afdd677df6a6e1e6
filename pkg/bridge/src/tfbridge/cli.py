"""Bridge CLI: export a checkpoint, emit fixtures, or write a manifest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bridge import BridgeError, BridgeManifest, default_manifest, emit_fixtures, export


def cmd_export(args) -> int:
    manifest = BridgeManifest.from_file(args.manifest)
    export(args.checkpoint, manifest, args.out)
    print(f"wrote {args.out} ({len(manifest.mapping)} tensors)")
    return 0


def cmd_fixtures(args) -> int:
    manifest = BridgeManifest.from_file(args.manifest)
    records = emit_fixtures(
        args.checkpoint, manifest.config, args.inputs, args.out,
        tolerance=args.tolerance,
    )
    manifest.fixtures = records
    Path(args.manifest).write_text(manifest.to_json() + "\n")
    print(f"wrote {len(records)} fixtures to {args.out}")
    return 0


def cmd_manifest(args) -> int:
    config = json.loads(Path(args.config).read_text())
    manifest = default_manifest(config, checkpoint=args.checkpoint)
    Path(args.out).write_text(manifest.to_json() + "\n")
    print(f"wrote {args.out} ({len(manifest.mapping)} tensor mappings)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tfbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a checkpoint into a weight container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("fixtures", help="emit golden logits for parity checks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_fixtures)

    p = sub.add_parser("manifest", help="write the default manifest for a config")
    p.add_argument("--config", required=True, help="JSON model config")
    p.add_argument("--checkpoint", required=True, help="checkpoint path to record")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_manifest)

    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
