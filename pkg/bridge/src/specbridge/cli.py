"""specbridge: move checkpoints between the torch ecosystem and the
interchange format.

    specbridge export --src <dir> --out <file> [--lora] [--manifest m.json]
                      [--dtype-policy preserve|cast_fp32]
    specbridge import --in <file> --dst <dir> [--manifest m.json]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .bridge import BridgeError, ExportManifest, export_checkpoint, import_merged
from .interchange import BridgeFormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    export_p = sub.add_parser("export", help="source checkpoint/adapter -> interchange file")
    export_p.add_argument("--src", required=True, help="source checkpoint directory")
    export_p.add_argument("--out", required=True, help="interchange file to write")
    export_p.add_argument("--lora", action="store_true", help="source is a PEFT adapter directory")
    export_p.add_argument("--manifest", help="manifest JSON (target_keys, dtype_policy)")
    export_p.add_argument(
        "--dtype-policy", choices=("preserve", "cast_fp32"), default=None,
        help="override the manifest dtype policy",
    )

    import_p = sub.add_parser("import", help="interchange file -> model.safetensors")
    import_p.add_argument("--in", dest="in_path", required=True, help="interchange file to read")
    import_p.add_argument("--dst", required=True, help="target directory")
    import_p.add_argument("--manifest", help="manifest JSON whose mapping is inverted")
    return parser


def _manifest_for(args: argparse.Namespace, src: str | None) -> ExportManifest | None:
    if args.manifest:
        manifest = ExportManifest.from_json(args.manifest)
        if src is not None:
            manifest.source_path = Path(src)
    elif src is not None:
        manifest = ExportManifest(source_path=Path(src))
    else:
        return None
    if getattr(args, "dtype_policy", None):
        manifest.dtype_policy = args.dtype_policy
    return manifest


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            export_checkpoint(_manifest_for(args, args.src), args.out, lora=args.lora)
        else:
            manifest = ExportManifest.from_json(args.manifest) if args.manifest else None
            import_merged(args.in_path, args.dst, manifest)
    except (BridgeError, BridgeFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
