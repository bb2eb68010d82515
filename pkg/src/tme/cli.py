"""Command-line entry point.

Exit codes: 0 success, 1 scoring failure under ``--strict``, 2 usage error,
3 fixture or backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import IO, Any

from . import engine, harness
from .gateway import API_KEY_ENV, GatewayError, HttpResponder, StaticResponder
from .memory import TaskMemoryError, snapshot, to_dot
from .trim import TrimError, make_classifier

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_BACKEND = 0, 1, 2, 3
BASE_URL_ENV = "TME_BASE_URL"
DEFAULT_BASE_URL = "https://api.openai.com"

log = logging.getLogger("tme")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--offline", dest="live", action="store_false", help="no network access (default)")
    mode.add_argument("--live", dest="live", action="store_true", help="allow http backends")
    common.set_defaults(live=False)
    common.add_argument("--fixtures", type=Path, help=f"fixture directory (or ${harness.FIXTURE_ENV})")
    common.add_argument("--out", type=Path, help="write output here instead of stdout")

    parser = argparse.ArgumentParser(prog="tme", description="Task memory engine tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", parents=[common], help="replay one scenario and score it")
    p.add_argument("--scenario", required=True, choices=harness.SCENARIOS)
    p.add_argument("--variant", default=engine.TME_DAG, choices=engine.VARIANTS)
    p.add_argument("--seed", type=int, help="override the fixture's random seed")
    p.add_argument("--no-adaptation", action="store_true", help="use the scenario's unadapted intents")
    p.add_argument("--format", default="text", choices=("text", "json"))
    p.add_argument("--strict", action="store_true", help="exit 1 unless the run is consistent")

    p = sub.add_parser("suite", parents=[common], help="replay scenarios under several variants")
    p.add_argument("--variants", nargs="+", default=[engine.TME_DAG, engine.TME_FLAT, engine.TME_RANDOM_TRIM],
                   choices=engine.VARIANTS)
    p.add_argument("--scenarios", nargs="+", default=list(harness.SUITE_SCENARIOS), choices=harness.SCENARIOS)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", default="text", choices=("text", "csv", "json"))
    p.add_argument("--reference-rows", action="store_true", help="append the display-only reference rows")
    p.add_argument("--strict", action="store_true", help="exit 1 if any tme_dag cell is inconsistent")

    p = sub.add_parser("tokens", parents=[common], help="per-round token comparison")
    p.add_argument("--scenario", default="form_filling", choices=harness.SCENARIOS)
    p.add_argument("--format", default="text", choices=("text", "csv", "json"))

    p = sub.add_parser("export", parents=[common], help="export memory after replaying a scenario")
    p.add_argument("--scenario", required=True, choices=harness.SCENARIOS)
    p.add_argument("--round", type=int, help="stop after this round (default: all)")
    p.add_argument("--variant", default=engine.TME_DAG, choices=engine.DAG_VARIANTS)
    p.add_argument("--format", default="dot", choices=("dot", "json"))

    p = sub.add_parser("repl", parents=[common], help="interactive session")
    p.add_argument("--variant", default=engine.TME_DAG, choices=engine.VARIANTS)
    p.add_argument("--classifier", default="rule_based", choices=("rule_based", "random", "llm", "hybrid"))
    p.add_argument("--responder", default="static", choices=("static", "http"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-url", default=os.environ.get(BASE_URL_ENV, DEFAULT_BASE_URL))
    p.add_argument("--model", default="gpt-4o")
    return parser


def _emit(text: str, out: Path | None, stdout: IO[str]) -> None:
    if out is None:
        stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def cmd_replay(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    script = harness.load_scenario(args.scenario, args.fixtures)
    report = harness.replay(
        script,
        args.variant,
        adaptation=False if args.no_adaptation else None,
        seed=args.seed,
        fixtures=args.fixtures,
    )
    if args.format == "json":
        text = json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"
    else:
        lines = [harness.export_table([report]).rstrip("\n"), ""]
        for d in report.round_details:
            flags = [f for f, on in (("hallucination", d.hallucination), ("confusion", d.confusion)) if on]
            lines.append(f"round {d.round}: {', '.join(flags) or 'ok'}  tokens={d.tokens}")
            lines.extend(f"    failed: {a}" for a in d.failed_assertions)
            lines.extend(f"    contradicted: {a}" for a in d.contradicted)
            lines.extend(f"    warning: {w}" for w in d.warnings)
        text = "\n".join(lines) + "\n"
    _emit(text, args.out, stdout)
    return EXIT_FAILED if args.strict and not report.consistent else EXIT_OK


def cmd_suite(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    result = harness.run_suite(args.variants, args.scenarios, jobs=args.jobs, fixtures=args.fixtures)
    for bad in result.errors:
        print(f"tme: {bad.scenario} x {bad.variant}: {bad.error}", file=stderr)
    extra = harness.REFERENCE_CASE_STUDY_ROWS[:3] if args.reference_rows else ()
    _emit(harness.export_table(result.reports, args.format, extra_rows=extra), args.out, stdout)
    if result.errors:
        return EXIT_BACKEND
    if args.strict and not all(r.consistent for r in result.for_variant(engine.TME_DAG)):
        return EXIT_FAILED
    return EXIT_OK


def cmd_tokens(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    script = harness.load_scenario(args.scenario, args.fixtures)
    counter = harness.load_token_table(args.scenario, args.fixtures)
    report = harness.token_report(script, counter, args.fixtures)
    _emit(report.render(args.format), args.out, stdout)
    return EXIT_OK


def cmd_export(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    script = harness.load_scenario(args.scenario, args.fixtures)
    try:
        state = harness.session_at(script, args.variant, args.round, fixtures=args.fixtures)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = to_dot(state.forest) if args.format == "dot" else snapshot(state.forest, indent=2) + "\n"
    _emit(text, args.out, stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# repl


def repl_backends(args: argparse.Namespace) -> tuple[Any, Any]:
    http = None
    if args.responder == "http" or args.classifier in ("llm", "hybrid"):
        if not args.live:
            raise UsageError("http backends need --live")
        if not os.environ.get(API_KEY_ENV):
            log.warning("%s is not set; requests go out unauthenticated", API_KEY_ENV)
        http = HttpResponder(args.base_url)
    responder = http if args.responder == "http" else StaticResponder()
    if args.classifier in ("llm", "hybrid"):
        classifier = make_classifier(args.classifier, responder=http, model=args.model)
    elif args.classifier == "random":
        classifier = make_classifier("random", seed=args.seed)
    else:
        classifier = make_classifier("rule_based")
    return classifier, responder


def repl(args: argparse.Namespace, stdin: IO[str], stdout: IO[str], stderr: IO[str]) -> int:
    classifier, responder = repl_backends(args)
    state = engine.SessionState(variant=args.variant)
    interactive = stdin.isatty()
    while True:
        if interactive:
            stdout.write("you> ")
            stdout.flush()
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":tokens":
            for rnd, count in state.ledger.rows:
                stdout.write(f"round {rnd}: {count}\n")
            stdout.write(f"total: {state.ledger.total}\n")
            continue
        if line in (":state", ":dot"):
            if not state.uses_forest:
                stderr.write(f"{state.variant} keeps no task graph\n")
            elif line == ":state":
                stdout.write(snapshot(state.forest, indent=2) + "\n")
            else:
                stdout.write(to_dot(state.forest))
            continue
        if line.startswith(":"):
            stderr.write(f"unknown command {line}; try :state :dot :tokens :quit\n")
            continue
        try:
            state, response = engine.step(state, line, classifier, responder)
        except (TaskMemoryError, TrimError, GatewayError, engine.EngineError) as exc:
            stderr.write(f"error: {exc}\n")
            continue
        for warning in state.log[-1]["warnings"]:
            stderr.write(f"warning: {warning}\n")
        stdout.write(f"assistant> {response}\n")
    return EXIT_OK


COMMANDS = {"replay": cmd_replay, "suite": cmd_suite, "tokens": cmd_tokens, "export": cmd_export}


def main(
    argv: list[str] | None = None,
    stdin: IO[str] | None = None,
    stdout: IO[str] | None = None,
    stderr: IO[str] | None = None,
) -> int:
    stdin, stdout, stderr = stdin or sys.stdin, stdout or sys.stdout, stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=stderr,
    )
    started = time.perf_counter()
    try:
        if args.command == "repl":
            code = repl(args, stdin, stdout, stderr)
        else:
            code = COMMANDS[args.command](args, stdout, stderr)
    except UsageError as exc:
        print(f"tme: {exc}", file=stderr)
        return EXIT_USAGE
    except (harness.HarnessError, GatewayError, TaskMemoryError, TrimError, engine.EngineError, OSError) as exc:
        print(f"tme: {exc}", file=stderr)
        return EXIT_BACKEND
    log.info("%s finished in %.3fs", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
