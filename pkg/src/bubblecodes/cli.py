"""Command-line front end: ``bubblecodes run|check|fuzz|oracle``.

Exit status is 0 on success, 1 when an invariant fails (or the oracle
disagrees), 2 on usage, file or parse errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import oracle
from .controller import TimerConfig
from .scenario.checker import TraceMismatch, check_trace
from .scenario.format import ScenarioError, format_scenario, parse_scenario
from .scenario.fuzz import fuzz_generate
from .scenario.runner import run
from .trace import TraceFormatError, dumps, loads

TRACE_DIR_ENV = "BUBBLECODES_TRACE_DIR"
OK, VIOLATION, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def seed_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"empty or negative seed range {text!r}")
    return range(a, b + 1)


def _config(args) -> TimerConfig:
    try:
        return TimerConfig(heartbeat_interval_ms=args.heartbeat_ms,
                           missed_heartbeats_to_lost=args.missed_heartbeats)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


def _load_scenario(path: str):
    try:
        return parse_scenario(_read(path))
    except ScenarioError as e:
        raise UsageError(f"{path}: {e}") from None


def _trace_target(explicit: str | None, default_name: str) -> Path | None:
    """Where to write a trace; the env var redirects it into a directory."""
    env = os.environ.get(TRACE_DIR_ENV)
    if env:
        return Path(env) / Path(explicit or default_name).name
    return Path(explicit) if explicit else None


def cmd_run(args) -> int:
    sc = _load_scenario(args.scenario)
    trace = run(sc, args.seed, _config(args))
    target = _trace_target(args.trace, f"{Path(args.scenario).stem}-seed{args.seed}.trace")
    if target is not None:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(dumps(trace))
    for e in trace:
        if e.kind in ("end", "placement"):
            print(e.line())
    return OK


def cmd_check(args) -> int:
    sc = _load_scenario(args.scenario)
    try:
        trace = loads(_read(args.trace))
        report = check_trace(trace, sc)
    except (TraceFormatError, TraceMismatch) as e:
        raise UsageError(f"{args.trace}: {e}") from None
    except (KeyError, ValueError) as e:
        raise UsageError(f"{args.trace}: malformed trace ({e})") from None
    print(report.summary())
    return OK if report.ok else VIOLATION


def cmd_fuzz(args) -> int:
    if min(args.nodes, args.bubbles, args.events) < 1:
        raise UsageError("--nodes, --bubbles and --events must be positive")
    config = _config(args)
    out_dir = os.environ.get(TRACE_DIR_ENV)
    failures = []
    for seed in args.seeds:
        sc = fuzz_generate(seed, args.nodes, args.bubbles, args.events)
        trace = run(sc, seed, config)
        report = check_trace(trace, sc)
        if report.ok:
            continue
        failures.append(seed)
        print(f"seed={seed} {report.first()}")
        if out_dir:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"fuzz-{seed}.scn").write_text(format_scenario(sc))
            (d / f"fuzz-{seed}.trace").write_text(dumps(trace))
    if failures:
        print("failing seeds: " + ",".join(map(str, failures)))
    print(f"seeds={len(args.seeds)} failures={len(failures)}")
    return VIOLATION if failures else OK


def cmd_oracle(args) -> int:
    if not (1 <= args.nodes <= oracle.MAX_NODES and 1 <= args.bubbles <= oracle.MAX_BUBBLES):
        raise UsageError(f"oracle limits are --nodes 1..{oracle.MAX_NODES} --bubbles 1..{oracle.MAX_BUBBLES}")
    mismatches = 0
    for seed in args.seeds:
        _, want, got = oracle.compare(seed, args.nodes, args.bubbles)
        if want != got:
            mismatches += 1
            print(f"seed={seed} oracle={','.join(want)} simulated={','.join(got)}")
    print(f"seeds={len(args.seeds)} mismatches={mismatches}")
    return VIOLATION if mismatches else OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bubblecodes", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def timers(sp):
        sp.add_argument("--heartbeat-ms", type=int, default=TimerConfig.heartbeat_interval_ms)
        sp.add_argument("--missed-heartbeats", type=int, default=TimerConfig.missed_heartbeats_to_lost)

    r = sub.add_parser("run", help="simulate a scenario and print final placements")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trace", help="write the trace here")
    timers(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="evaluate invariants I1-I9 over a trace")
    c.add_argument("trace")
    c.add_argument("scenario")
    c.set_defaults(func=cmd_check)

    f = sub.add_parser("fuzz", help="generate, run and check random scenarios")
    f.add_argument("--seeds", type=seed_range, default=seed_range("0..99"))
    f.add_argument("--nodes", type=int, default=6)
    f.add_argument("--bubbles", type=int, default=4)
    f.add_argument("--events", type=int, default=80)
    timers(f)
    f.set_defaults(func=cmd_fuzz)

    o = sub.add_parser("oracle", help="compare greedy placement with exhaustive search")
    o.add_argument("--seeds", type=seed_range, default=seed_range("0..499"))
    o.add_argument("--nodes", type=int, default=oracle.MAX_NODES)
    o.add_argument("--bubbles", type=int, default=oracle.MAX_BUBBLES)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE if e.code else OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
