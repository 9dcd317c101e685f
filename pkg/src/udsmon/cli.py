"""udsmon command line: replay, simulate, coverage, catalog, stats.

Exit codes: 0 success, 1 usage error, 2 parse error, 3 coverage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from udsmon import __version__
from udsmon._yamlio import ConfigError
from udsmon.catalog import UnknownTechniqueError, catalog
from udsmon.codec import FrameError, TraceFormatError, read_trace
from udsmon.coverage import coverage, format_matrix, format_stats, statistics
from udsmon.detection import AlertReport, RuleSet, load_rules, read_ti, run_pipeline
from udsmon.flow import load_topology
from udsmon.replay import collect_events
from udsmon.sensor import LoggingPolicy, load_policy
from udsmon.simulate import benign_traffic, simulate
from udsmon.store import load_store

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_COVERAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default; 2 is reserved for parse errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    else:
        print(text)


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False)


def _policy(args) -> LoggingPolicy:
    return load_policy(args.policy) if args.policy else LoggingPolicy.default()


def _rules(args) -> RuleSet:
    return load_rules(args.rules) if args.rules else RuleSet.default()


# --- subcommands --------------------------------------------------------------


def cmd_coverage(args) -> int:
    matrix = coverage(args.seed, _policy(args), _rules(args), args.technique or None)
    _emit(_dumps(matrix.to_mapping()) if args.format == "json" else format_matrix(matrix), args.out)
    return EXIT_OK if matrix.passed else EXIT_COVERAGE


def _scenario_file(base: Optional[Path], explicit: Optional[str], name: str) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    if base is not None and (base / name).exists():
        return base / name
    return None


def format_report(report: AlertReport, n_events: int) -> str:
    lines = []
    for a in report.alerts:
        ts = "-" if a.timestamp is None else str(a.timestamp)
        where = "/".join(x for x in (a.vehicle_id, a.ecu_id) if x) or "fleet"
        lines.append(
            f"{ts:>8} {a.strategy} {a.severity:<8} {a.rule_id:<36} {where:<20} "
            f"{','.join(a.techniques)}: {a.explanation}"
        )
    lines.append(f"events: {n_events}; alerts: {len(report.alerts)}; deferred checks: {len(report.deferred)}")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    trace_arg = Path(args.trace)
    base = trace_arg if trace_arg.is_dir() else None
    trace_path = trace_arg / "trace.ndjson" if base else trace_arg
    store_path = _scenario_file(base, args.store, "store.yaml")
    topo_path = _scenario_file(base, args.topology, "topology.yaml")
    ti_path = _scenario_file(base, args.ti, "ti.ndjson")

    trace = read_trace(trace_path)
    policy, rules = _policy(args), _rules(args)
    store = load_store(store_path) if store_path else None
    topology = load_topology(topo_path) if topo_path else None
    ti = read_ti(ti_path) if ti_path else []

    events = collect_events(trace, policy, store, topology)
    report = run_pipeline(rules, events, store, ti)
    if args.format == "json":
        doc = {"events": len(events), **report.to_mapping()}
        _emit(_dumps(doc), args.out)
    else:
        _emit(format_report(report, len(events)), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.out is None:
        raise UsageError("simulate needs --out DIR")
    scenario = benign_traffic(args.seed) if args.technique == "benign" else simulate(args.technique, args.seed)
    scenario.save(args.out)
    summary = scenario.manifest()
    if args.format == "json":
        print(_dumps(summary))
    else:
        print(f"{summary['technique'] or 'benign'} seed={args.seed}: {summary['exchanges']} exchanges -> {args.out}")
    return EXIT_OK


def cmd_catalog(args) -> int:
    rows = list(catalog())
    if args.format == "json":
        doc = [
            {
                "id": t.id,
                "name": t.raw[0],
                "sids": t.raw[1],
                "logging": t.raw[2],
                "autosar": t.raw[3],
                "autosar_support": t.autosar,
                "detection": t.raw[4],
            }
            for t in rows
        ]
        _emit(_dumps(doc), args.out)
    else:
        text = "\n".join("\t".join((t.id,) + t.raw) for t in rows)
        _emit(text, args.out)
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = statistics()
    _emit(_dumps(stats) if args.format == "json" else format_stats(stats), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--out", help="output file (simulate: output directory)")

    pipeline = _Parser(add_help=False)
    pipeline.add_argument("--policy", help="logging policy YAML (default: shipped policy)")
    pipeline.add_argument("--rules", help="detection rules YAML (default: shipped rules)")

    parser = _Parser(prog="udsmon", description="UDS security event logging and detection harness")
    parser.add_argument("--version", action="version", version=f"udsmon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("coverage", parents=[common, pipeline], help="simulate every technique and score coverage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--technique", action="append", help="restrict to these technique ids (repeatable)")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("replay", parents=[common, pipeline], help="run the pipeline over a recorded trace")
    p.add_argument("trace", help="NDJSON trace, or a directory written by `simulate`")
    p.add_argument("--store", help="context store YAML")
    p.add_argument("--topology", help="gateway routing topology YAML")
    p.add_argument("--ti", help="threat intel NDJSON")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("simulate", parents=[common], help="write a labeled scenario to a directory")
    p.add_argument("technique", help="technique id such as AT-PE-4, or 'benign'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("catalog", parents=[common], help="print the attack technique catalog")
    p.set_defaults(func=cmd_catalog)

    p = sub.add_parser("stats", parents=[common], help="print AUTOSAR support statistics")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, UnknownTechniqueError) as exc:
        print(f"udsmon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TraceFormatError, FrameError) as exc:
        print(f"udsmon: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"udsmon: parse error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
