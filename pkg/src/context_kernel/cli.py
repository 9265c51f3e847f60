"""Command-line entry point.

Exit codes: 0 success, 1 expectation failure (or trace mismatch), 2 for
configuration, IO and usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MEETING_SCENARIO, load_config
from .errors import ContextKernelError
from .facts import format_value, parse_pattern, parse_time
from .kb import KnowledgeBase
from .kernel import ContextKernel
from .simulator import ScenarioTrace, load_scenario, run_scenario

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: $CONTEXT_KERNEL_CONFIG, "
                                         "then the bundled config)")
    strict = common.add_mutually_exclusive_group()
    strict.add_argument("--strict", dest="strict", action="store_true", default=None,
                        help="reject facts the ontology does not validate")
    strict.add_argument("--lenient", dest="strict", action="store_false",
                        help="store unvalidated facts with a flag")
    common.add_argument("--journal", help="append-only journal file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="context-kernel", description="Context knowledge base, reasoner "
                                                        "and software-sensor simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run a scenario script")
    run.add_argument("scenario", nargs="?", default=str(MEETING_SCENARIO),
                     help="scenario file (default: the bundled meeting scenario)")
    run.add_argument("--format", choices=("human", "json"), default="human")

    query = sub.add_parser("query", parents=[common], help="query a journaled KB")
    query.add_argument("pattern", help='e.g. "Activity(John, ?a)"')
    query.add_argument("--at", help="ISO-8601 time point the facts must cover")

    serve = sub.add_parser("serve", parents=[common], help="serve the wire protocol")
    serve.add_argument("--listen", help="host:port (port 0 picks a free port)")

    check = sub.add_parser("replay-check", parents=[common],
                           help="re-run a scenario and compare with a JSON trace")
    check.add_argument("trace", nargs="?", default="-",
                       help="JSON trace file, or - for stdin (default)")
    check.add_argument("--scenario", default=str(MEETING_SCENARIO))
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.strict is not None:
        cfg.strict = args.strict
    if args.journal:
        cfg.journal = Path(args.journal)
    return cfg


def _trace(args, cfg, scenario_path) -> ScenarioTrace:
    script = load_scenario(scenario_path)
    ontology, rules, mapping = cfg.load_stack()
    return run_scenario(script, ontology, rules, mapping, cfg)


def cmd_run(args) -> int:
    cfg = _config(args)
    trace = _trace(args, cfg, args.scenario)
    print(trace.to_json() if args.format == "json" else trace.format_human())
    return EXIT_OK if trace.passed else EXIT_FAIL


def format_binding(binding: dict) -> str:
    if not binding:
        return "true"
    return " ".join(f"{var}={format_value(binding[var])}" for var in sorted(binding))


def cmd_query(args) -> int:
    cfg = _config(args)
    if cfg.journal is None:
        raise ContextKernelError("query needs a journal (--journal or config)")
    pattern = parse_pattern(args.pattern, time_at=parse_time(args.at) if args.at else None)
    ontology, _, _ = cfg.load_stack()
    kb = KnowledgeBase.replay(cfg.journal, ontology, strict=cfg.strict)
    for binding in kb.query(pattern):
        print(format_binding(binding))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    cfg = _config(args)
    kernel = ContextKernel.from_config(cfg)
    serve(kernel, args.listen or cfg.listen, announce=lambda line: print(line, flush=True))
    return EXIT_OK


def cmd_replay_check(args) -> int:
    cfg = _config(args)
    if args.trace == "-":
        text = sys.stdin.read()
    else:
        text = Path(args.trace).read_text(encoding="utf-8")
    try:
        recorded = ScenarioTrace.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise ContextKernelError(f"not a JSON trace: {exc}") from None
    cfg.journal = None
    replayed = _trace(args, cfg, args.scenario)
    if replayed.to_json() == recorded.to_json():
        print(f"trace {recorded.name}: {len(recorded.entries)} entries match")
        return EXIT_OK
    for old, new in zip(recorded.entries, replayed.entries):
        if old != new:
            print(f"first difference at entry {old.index}", file=sys.stderr)
            break
    else:
        print(f"entry count differs: {len(recorded.entries)} recorded, "
              f"{len(replayed.entries)} replayed", file=sys.stderr)
    return EXIT_FAIL


COMMANDS = {"run": cmd_run, "query": cmd_query, "serve": cmd_serve,
            "replay-check": cmd_replay_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ContextKernelError, OSError, ValueError) as exc:
        code = getattr(exc, "code", None)
        prefix = f"{code}: " if isinstance(code, str) and code != "error" else ""
        print(f"error: {prefix}{exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
