"""Command line for the bridge: export/import between torch files and containers.

Exit codes: 0 success, 1 usage errors, 2 data errors (unreadable files,
malformed containers or manifests, shape mismatches).
"""

import argparse
import sys

import torch

from .bridge import (
    default_manifest_path,
    export_to_container,
    import_from_container,
)
from .container import BridgeError

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="replast-bridge",
        description="Convert torch state dicts to and from checkpoint containers.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")

    p_export = sub.add_parser("export", help="state dict file -> container")
    p_export.add_argument("native", help="torch file holding a state dict")
    p_export.add_argument("container", help="output container path")
    p_export.add_argument(
        "--manifest", help="manifest path (default: <container>.manifest.json)"
    )

    p_import = sub.add_parser("import", help="container -> state dict file")
    p_import.add_argument("container", help="input container path")
    p_import.add_argument("template", help="torch file with the target architecture")
    p_import.add_argument("out", help="output torch file")
    p_import.add_argument(
        "--manifest", help="manifest path (default: <container>.manifest.json)"
    )
    return parser


def _load_state_dict(path):
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise BridgeError(f"{path}: cannot load state dict: {exc}") from None


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.subcommand == "export":
            state = _load_state_dict(args.native)
            manifest = export_to_container(state, args.container, args.manifest)
            manifest_path = args.manifest or default_manifest_path(args.container)
            print(
                f"exported {len(manifest.name_map)} tensors "
                f"({len(manifest.skipped)} skipped) to {args.container}"
            )
            print(f"manifest: {manifest_path}")
        else:
            template = _load_state_dict(args.template)
            state = import_from_container(args.container, template, args.manifest)
            torch.save(state, args.out)
            print(f"imported {args.container} into {args.out}")
    except (BridgeError, OSError) as exc:
        print(f"replast-bridge: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
