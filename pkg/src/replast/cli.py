"""Command-line entry point.

Subcommands: surgery, inspect, hist, mwu, experiment.  Exit codes are
scriptable: 0 on success, 1 on usage errors, 2 on data or format errors.
Diagnostics go to stderr; tables and summaries go to stdout or files, so
output is pipe-safe.  When REPLAST_OUT_DIR is set, relative output paths
are resolved inside it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    DEFAULT_BINS,
    PANELS,
    AnalysisError,
    build_histogram_set,
    export_histograms,
    export_per_layer_csv,
)
from .container import (
    ClassificationRules,
    ContainerError,
    classify_params,
    load_checkpoint,
    save_checkpoint,
)
from .stats import StatsError, compare_cases, read_runs_file
from .surgery import (
    SurgeryConfig,
    SurgeryError,
    TagError,
    apply_surgery,
    load_config_file,
)
from .tinytrain import ProtocolError, TrainError, load_protocol, run_experiment

__all__ = ["main"]

OUT_DIR_ENV = "REPLAST_OUT_DIR"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class UsageError(ValueError):
    """Usage-level problem detected after argument parsing."""


def _out_path(raw) -> Path:
    """Resolve a user-supplied output path against REPLAST_OUT_DIR."""
    path = Path(raw)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# surgery


def _cmd_surgery(args) -> int:
    in_path = Path(args.checkpoint)
    out_path = _out_path(args.output)
    if out_path.resolve() == in_path.resolve():
        raise UsageError("output path must differ from the input checkpoint")
    rules = None
    if args.config:
        config, rules = load_config_file(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.scope is not None:
            overrides["scope"] = args.scope.replace("-", "_")
        if args.bias_reset is not None:
            overrides["bias_reset"] = args.bias_reset == "on"
        if overrides:
            config = SurgeryConfig.from_dict({**config.to_dict(), **overrides})
    else:
        config = SurgeryConfig.from_tag(
            args.tag,
            seed=args.seed if args.seed is not None else 0,
            scope=(args.scope or "per-tensor").replace("-", "_"),
            bias_reset=(args.bias_reset or "on") == "on",
        )
    cp = load_checkpoint(in_path)
    out_cp, report = apply_surgery(cp, config, rules=rules)
    _ensure_parent(out_path)
    save_checkpoint(out_cp, out_path)
    if args.report:
        report_path = _out_path(args.report)
        _ensure_parent(report_path)
        report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    totals = report.totals
    changed = totals["n_changed"]
    denom = totals["n_weights_total"] + totals["n_bias_total"]
    pct = 100.0 * changed / denom if denom else 0.0
    print(f"modified {changed} of {denom} entries ({pct:.2f}%) -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _cmd_inspect(args) -> int:
    cp = load_checkpoint(args.checkpoint, allow_nonfinite=True)
    classes = classify_params(cp)
    rows = []
    for name in cp.names():
        arr = cp.tensors[name]
        flat = arr.astype(np.float64, copy=False).ravel()
        if flat.size:
            mean, std = float(flat.mean()), float(flat.std())
            abs_mean = float(np.abs(flat).mean())
            stat = (f"{mean: .6g}", f"{std:.6g}", f"{abs_mean:.6g}")
        else:
            stat = ("n/a", "n/a", "n/a")
        rows.append(
            (name, _fmt_shape(arr.shape), arr.dtype.name, classes[name].value) + stat
        )
    headers = ("name", "shape", "dtype", "class", "mean", "std", "abs_mean")
    if args.json:
        payload = [dict(zip(headers, row)) for row in rows]
        print(json.dumps(payload, indent=2))
        return EXIT_OK
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# hist


def _cmd_hist(args) -> int:
    panels = tuple(p.strip() for p in args.panels.split(",")) if args.panels else PANELS
    bad = [p for p in panels if p not in PANELS]
    if bad:
        raise UsageError(f"unknown panels {bad}; valid: {', '.join(PANELS)}")
    if args.bins < 1:
        raise UsageError(f"--bins must be positive, got {args.bins}")
    base_cp = load_checkpoint(args.base)
    exp_cp = load_checkpoint(args.experimental)
    prefix = _out_path(args.out)
    _ensure_parent(prefix)
    hset = build_histogram_set(base_cp, exp_cp, bins=args.bins)
    written = export_histograms(hset, prefix, panels=panels)
    if args.per_layer:
        layer_path = Path(f"{prefix}_layers.csv")
        export_per_layer_csv(base_cp, exp_cp, layer_path, bins=args.bins)
        written.append(str(layer_path))
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# mwu


def _cmd_mwu(args) -> int:
    groups = read_runs_file(args.runs_file)
    if args.base not in groups:
        raise UsageError(f"base case {args.base!r} not present in {args.runs_file}")
    base_runs = groups.pop(args.base)
    if args.case is not None:
        if args.case not in groups:
            raise UsageError(f"case {args.case!r} not present in {args.runs_file}")
        groups = {args.case: groups[args.case]}
    if not groups:
        raise UsageError("runs file holds no cases besides the base")
    report = compare_cases(groups, base_runs, base_tag=args.base)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def _demo_protocol_path() -> Path:
    from importlib.resources import files

    return Path(str(files("replast").joinpath("protocols/demo.json")))


def _cmd_experiment(args) -> int:
    if args.demo == (args.protocol is not None):
        raise UsageError("give either a protocol file or --demo, not both")
    proto_path = _demo_protocol_path() if args.demo else Path(args.protocol)
    protocol = load_protocol(proto_path)
    out_dir = _out_path(args.out)
    result = run_experiment(protocol, out_dir)
    print(result.report.to_text())
    for path in result.out_files:
        print(path, file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="replast",
        description="Checkpoint weight surgery, analysis, and transfer experiments.",
        epilog=f"Set {OUT_DIR_ENV} to resolve relative output paths inside it.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("surgery", help="reinitialize low-utility weights of a checkpoint")
    p.add_argument("checkpoint", help="input checkpoint file")
    p.add_argument("-o", "--output", required=True, help="output checkpoint path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--tag", help="compact case tag such as 10M or 25NS")
    group.add_argument("--config", help="JSON config file (may embed rules)")
    p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
    p.add_argument("--scope", choices=["per-tensor", "global"], default=None,
                   help="prune within each tensor or across all weights")
    p.add_argument("--bias-reset", choices=["on", "off"], default=None,
                   help="zero bias-class tensors (default on)")
    p.add_argument("--report", default=None, help="also write a JSON report here")
    p.set_defaults(func=_cmd_surgery)

    p = sub.add_parser("inspect", help="list tensors with stats and classification")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("hist", help="compare weight distributions of two checkpoints")
    p.add_argument("base", help="base checkpoint")
    p.add_argument("experimental", help="experimental checkpoint")
    p.add_argument("--out", required=True, help="output prefix for CSV and SVG files")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--panels", default=None,
                   help=f"comma-separated subset of: {', '.join(PANELS)}")
    p.add_argument("--per-layer", action="store_true",
                   help="also write a per-tensor histogram CSV")
    p.set_defaults(func=_cmd_hist)

    p = sub.add_parser("mwu", help="rank-based comparison of recorded runs")
    p.add_argument("runs_file", help="CSV with columns case,seed,accuracy,epochs")
    p.add_argument("--base", default="Base", help="base case tag (default Base)")
    p.add_argument("--case", default=None, help="restrict the table to one case")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=_cmd_mwu)

    p = sub.add_parser("experiment", help="run a transfer experiment protocol")
    p.add_argument("protocol", nargs="?", default=None, help="protocol JSON file")
    p.add_argument("--demo", action="store_true", help="use the bundled demo protocol")
    p.add_argument("--out", default=".",
                   help=f"output directory (default: current dir or {OUT_DIR_ENV})")
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # -h/--help exits 0; usage errors exit 1 via _Parser.error
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TagError as exc:
        print(f"replast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"replast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, SurgeryError, StatsError, AnalysisError, TrainError,
            ProtocolError) as exc:
        print(f"replast: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"replast: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
