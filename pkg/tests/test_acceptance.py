"""The seven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; pytest repeats them in an
"acceptance criteria" section at the end of the run.
"""

import time
from pathlib import Path

import pytest

from bubblecodes import oracle, wire
from bubblecodes.controller import TimerConfig
from bubblecodes.scenario.checker import check_trace
from bubblecodes.scenario.format import parse_scenario
from bubblecodes.scenario.fuzz import fuzz_generate
from bubblecodes.scenario.runner import run
from bubblecodes.trace import dumps
from golden_cases import GOLDEN
from message_gen import RandomMessages

ROOT = Path(__file__).parent.parent
GOLDEN_DIR = ROOT / "tests" / "golden"
LEASE = TimerConfig().lease_ms


def scenario(name):
    return parse_scenario((ROOT / "scenarios" / f"{name}.scn").read_text())


def map_hosts(trace):
    """(time, {bubble: host}) for every sequenced map version."""
    return [
        (e.at, dict(tuple(x.split(":")[:2]) for x in e["entries"].split(",")))
        for e in trace if e.kind == "map"
    ]


@pytest.fixture(scope="module")
def fuzz_corpus():
    """Seeds 0..999 at the default bounds (6 nodes, 4 bubbles, 80 events)."""
    start = time.perf_counter()
    reports = []
    for seed in range(1000):
        sc = fuzz_generate(seed, max_nodes=6, max_bubbles=4, max_events=80)
        reports.append((seed, check_trace(run(sc, seed), sc)))
    return reports, time.perf_counter() - start


def test_1_fig1_room_walk(criterion):
    sc = scenario("fig1")
    start = time.perf_counter()
    trace = run(sc, 0)
    elapsed = time.perf_counter() - start
    home = {"video": "phone", "audio": "phone", "control": "phone"}
    rooms = {
        "bedroom": {"video": "desktop", "audio": "desktop", "control": "desktop"},
        "kitchen": {"video": "phone", "audio": "hifi2", "control": "phone"},
        "living": {"video": "tv", "audio": "hifi1", "control": "phone"},
    }
    moves = [0] + [e.at for e in sc.events if e.kind == "move"]
    maps = map_hosts(trace)
    # maps sequenced while the phone was in each room
    per_room = [
        [hosts for at, hosts in maps if lo <= at < hi]
        for lo, hi in zip(moves, moves[1:] + [float("inf")])
    ]
    expected = [
        [rooms["bedroom"]],
        [home, rooms["kitchen"]],
        [home, rooms["living"]],
    ]
    byte_exact = dumps(trace) == (GOLDEN_DIR / "fig1.trace").read_text()
    ok = per_room == expected and byte_exact and elapsed < 1.0
    criterion(1, "fig1 room walk", ok,
              f"{len(maps)} map versions, golden byte-exact={byte_exact}, {elapsed * 1000:.0f} ms")
    assert per_room == expected
    assert byte_exact
    assert elapsed < 1.0


def test_2_privilege_preemption(criterion):
    sc = scenario("fig1_claim")
    trace = run(sc, 0)
    report = check_trace(trace, sc)
    (pre,) = [e for e in trace if e.kind == "preempt"]
    t = pre.at
    left_tv = [e.at for e in trace if e.kind == "phase" and e["bubble"] == "video" and e["node"] == "tv"
               and e["old"] == "active" and e.at >= t]
    home = [e.at for e in trace if e.kind == "phase" and e["bubble"] == "video" and e["node"] == "phone"
            and e["new"] == "active" and e.at >= t]
    final = trace[-1]
    ok = (report.ok and report.exercised.get("I6", 0) >= 1 and left_tv and left_tv[0] <= t + LEASE
          and home and home[0] <= t + LEASE + sc.max_latency and final["video"] == "phone")
    criterion(2, "privilege preemption", ok,
              f"claim at {t}, video off tv after {left_tv[0] - t} ms, active on phone after "
              f"{home[0] - t} ms, I6 {'ok' if report.status()['I6'] else 'FAIL'}")
    assert ok


def test_3_retraction_bound(criterion, fuzz_corpus):
    reports, _ = fuzz_corpus
    failing = [seed for seed, r in reports if not r.status()["I5"]]
    windows = sum(r.exercised.get("I5", 0) for _, r in reports)
    runs = sum(1 for _, r in reports if r.exercised.get("I5"))
    ok = not failing and windows > 0
    criterion(3, "retraction bound", ok,
              f"I5 held over {windows} unreachability windows in {runs} of {len(reports)} runs, "
              f"failing seeds: {failing or 'none'}")
    assert ok


def test_4_fuzz_invariants(criterion, fuzz_corpus):
    reports, elapsed = fuzz_corpus
    failing = [seed for seed, r in reports if not r.ok]
    ends = {}
    for _, r in reports:
        ends[r.end_reason] = ends.get(r.end_reason, 0) + 1
    ok = not failing and elapsed < 30
    criterion(4, "fuzz invariants", ok,
              f"{len(reports)} seeds, {len(failing)} failing, {elapsed:.1f} s, end reasons {ends}")
    assert not failing, [str(r.first()) for s, r in reports if s in failing[:5]]
    assert elapsed < 30


def test_5_placement_oracle(criterion):
    mismatches = []
    for seed in range(500):
        inst, want, got = oracle.compare(seed, oracle.MAX_NODES, oracle.MAX_BUBBLES)
        if want != got:
            mismatches.append(seed)
    criterion(5, "placement oracle", not mismatches, f"500 instances, {len(mismatches)} mismatches")
    assert not mismatches


def test_6_wire_round_trip(criterion):
    kinds = wire.MESSAGE_TYPES
    gen = RandomMessages(20240601)
    bad = 0
    for i in range(10_000):
        m = gen.message(kinds[i % len(kinds)])
        data = wire.encode(m)
        if wire.decode(data) != m or wire.encode(m) != data or wire.encode(wire.decode(data)) != data:
            bad += 1
    golden_bad = [k for k in kinds
                  if wire.encode(GOLDEN[k]) != (GOLDEN_DIR / "wire" / f"{k}.xml").read_bytes()
                  or wire.decode((GOLDEN_DIR / "wire" / f"{k}.xml").read_bytes()) != GOLDEN[k]]
    ok = bad == 0 and not golden_bad
    criterion(6, "wire round-trip", ok,
              f"10000 messages over {len(kinds)} variants, {bad} failures; "
              f"golden documents {len(kinds) - len(golden_bad)}/{len(kinds)} byte-exact")
    assert ok


def test_7_determinism(criterion):
    cases = [("fig1", scenario("fig1"), 0)] + [(f"fuzz {s}", fuzz_generate(s), s) for s in range(100)]
    differ = [name for name, sc, seed in cases if dumps(run(sc, seed)) != dumps(run(sc, seed))]
    criterion(7, "determinism", not differ, f"{len(cases)} scenarios run twice, {len(differ)} differ")
    assert not differ
