"""Command-line entry point: ``distgeom <experiment> --config run.toml``.

Exit codes: 0 when every enforced expectation passes, 1 when a numerical
verdict fails (report paths are printed), 2 for configuration errors.
The output directory defaults to ``runs/<config stem>``; the environment
variable ``DISTGEOM_OUT`` replaces the ``runs`` root.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .chart import ChartError
from .experiments import ConfigError, Section, apply_overrides, load_config, run_config, run_suite

OUT_ENV = "DISTGEOM_OUT"

SUBCOMMANDS = {
    "embed": "evaluate an embedded field on a grid",
    "curvature": "curvature component grids for a metric",
    "associate": "association of an embedded field against test densities",
    "cone": "curvature of the regularised cone against the delta weight",
    "compat": "regularised curvature of smooth metrics against closed-form oracles",
    "commute": "Lie derivative commutes with the embedding",
    "scaling": "sup-norm scaling exponents (moderate / negligible verdicts)",
    "suite": "every acceptance experiment listed in a manifest",
}


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError("need at least 2 levels")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distgeom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, helptext in SUBCOMMANDS.items():
        p = subs.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", required=True, type=Path, help="TOML experiment config")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default="json",
                       help="csv additionally writes every table as CSV")
        p.add_argument("--eps0", type=_positive_float, help="override net.eps0")
        p.add_argument("--ratio", type=_positive_float, help="override net.ratio")
        p.add_argument("--levels", type=_positive_int, help="override net.levels")
    return parser


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.config.stem


def _overrides(args) -> dict:
    if args.ratio is not None and not args.ratio < 1:
        raise ConfigError("must lie in (0, 1)", "--ratio")
    return {"eps0": args.eps0, "ratio": args.ratio, "levels": args.levels}


def _run_single(args, out: Path) -> int:
    cfg = load_config(args.config)
    kind = Section(cfg).get("experiment", str)
    if kind != args.command:
        raise ConfigError(f"config is for {kind!r}, not {args.command!r}", "experiment")
    cfg = apply_overrides(cfg, **_overrides(args))
    rec = run_config(cfg)
    path = rec.write(out, args.format)
    failed = [e["name"] for e in rec.expectations if e["enforced"] and not e["passed"]]
    for e in rec.expectations:
        mark = "ok  " if e["passed"] else ("FAIL" if e["enforced"] else "info")
        print(f"{mark} {e['name']}")
    for w in rec.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if failed:
        print(f"{len(failed)} failed expectation(s); report: {path}")
        return 1
    print(f"report: {path}")
    return 0


def _run_suite(args, out: Path) -> int:
    summary, _ = run_suite(args.config, out, args.format, _overrides(args))
    for entry in summary["runs"]:
        print(f"{'ok  ' if entry['passed'] else 'FAIL'} {entry['run']} ({entry['experiment']})")
    for check in summary["checks"]:
        print(f"{'ok  ' if check['passed'] else 'FAIL'} {check['name']}")
    if not summary["passed"]:
        for entry in summary["runs"]:
            if not entry["passed"]:
                print(f"failed: {entry['run']}: {', '.join(entry['failed'])} -> {out / entry['report']}")
        print(f"summary: {out / 'suite.json'}")
        return 1
    print(f"summary: {out / 'suite.json'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = _out_dir(args)
    try:
        if args.command == "suite":
            return _run_suite(args, out)
        return _run_single(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ChartError as exc:
        print(f"config error: chart: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
