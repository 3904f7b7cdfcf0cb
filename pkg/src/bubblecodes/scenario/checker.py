"""Offline invariant checker: replays a trace against its scenario.

The checker trusts nothing but the trace lines and the scenario file. It
reconstructs zones, liveness, replica phases and map history, then
evaluates I1-I9. Timing invariants (I5, I6) are evaluated in a second pass
over per-bubble activity timelines.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

from ..bubble import ALLOWED_EDGES
from ..trace import TraceEvent
from .format import ScenarioFile

INVARIANTS = ("I1", "I2", "I3", "I4", "I5", "I6", "I7", "I8", "I9")
TOPOLOGY = ("move", "fail", "recover")


class TraceMismatch(Exception):
    """The trace was not produced from this scenario."""


@dataclass
class Violation:
    invariant: str
    at: int
    line: int
    detail: str

    def __str__(self) -> str:
        return f"{self.invariant} violated at t={self.at} (trace line {self.line}): {self.detail}"


@dataclass
class InvariantReport:
    violations: list[Violation] = field(default_factory=list)
    lines: int = 0
    end_reason: str = ""
    # how many timing windows I5 and I6 actually evaluated
    exercised: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def first(self, invariant: str | None = None) -> Violation | None:
        vs = [v for v in self.violations if invariant is None or v.invariant == invariant]
        return min(vs, key=lambda v: (v.line, v.invariant)) if vs else None

    def status(self) -> dict[str, bool]:
        bad = {v.invariant for v in self.violations}
        return {i: i not in bad for i in INVARIANTS}

    def summary(self) -> str:
        out = [f"{i} {'ok' if good else 'FAIL'}" for i, good in self.status().items()]
        first = self.first()
        if first is not None:
            out.append(f"first violation: {first}")
        return "\n".join(out)


class _Checker:
    def __init__(self, sc: ScenarioFile):
        self.sc = sc
        self.report = InvariantReport()
        self.zone = {n: p.zone_id for n, p in sc.nodes.items()}
        self.zone.update({d: p.zone for d, p in sc.devices.items()})
        self.alive = set(sc.nodes)
        self.source = {a: m.source_device for a, m in sc.apps.items()}
        self.phase: dict[tuple[str, str, str], str] = {}
        self.launched: dict[str, set[str]] = {}
        self.started: dict[str, int] = {}
        self.perms: set[tuple[str, str, str]] = set()
        self.versions: dict[str, int] = {}
        self.current_map: dict[str, dict[str, tuple[str, str]]] = {}
        self.adopted: dict[tuple[str, str], int] = {}
        # (app, bubble) -> [(at, active_node or "", completed)]
        self.timeline: dict[tuple[str, str], list[tuple[int, str, bool]]] = {}
        self.completed: set[tuple[str, str]] = set()
        self.topology: list[tuple[int, int]] = []
        self.preempts: list[tuple[int, int, str, str, str]] = []
        self.map_hosts_at: list[tuple[int, int, str, dict]] = []
        self.lease = 0
        self.max_lat = sc.max_latency
        self.lineno = 0
        self.at = 0

    def bad(self, inv: str, detail: str) -> None:
        self.report.violations.append(Violation(inv, self.at, self.lineno, detail))

    def reachable(self, a: str, b: str, zone=None, alive=None) -> bool:
        zone = zone or self.zone
        alive = self.alive if alive is None else alive
        up = all(x not in self.sc.nodes or x in alive for x in (a, b))
        return up and zone[a] == zone[b]

    def actives(self, app: str, b: str) -> list[str]:
        return sorted(n for (a, bb, n), p in self.phase.items() if a == app and bb == b and p == "active")

    def record(self, app: str, b: str) -> None:
        act = self.actives(app, b)
        tl = self.timeline.setdefault((app, b), [])
        # same-millisecond changes are all kept: a bubble may bounce home and out again
        tl.append((self.at, act[0] if act else "", (app, b) in self.completed))

    # -- per kind -------------------------------------------------------------

    def header(self, e: TraceEvent) -> None:
        if e.kind != "run":
            raise TraceMismatch("trace does not start with a run header")
        if e.get("scenario") != self.sc.digest():
            raise TraceMismatch(f"trace was produced from scenario {e.get('scenario')}, "
                                f"this scenario is {self.sc.digest()}")
        self.lease = int(e["lease_ms"])

    def on_phase(self, e: TraceEvent) -> None:
        app, b, node = e["app"], e["bubble"], e["node"]
        old, new, cause = e["old"], e["new"], e["cause"]
        key = (app, b, node)
        src = self.source.get(app)
        tracked = self.phase.get(key, "none")
        if tracked == "destroyed" and old == "none":
            tracked = "none"
        if (old, new) not in ALLOWED_EDGES:
            self.bad("I8", f"illegal edge {old}->{new} for {b} on {node}")
        elif old != tracked:
            self.bad("I8", f"{b} on {node} moves from {old} but was {tracked}")
        if new == "dormant" and node != src:
            self.bad("I8", f"{b} dormant on {node}, off its source")
        if node == src:
            if new in ("destroyed", "switching"):
                self.bad("I1", f"source replica of {b} became {new}")
            if old == "none":
                if cause != "launch":
                    self.bad("I1", f"source replica of {b} created by {cause}")
                self.launched.setdefault(app, set()).add(b)
        if new == "active" and node != src:
            reqs = self.sc.apps[app].spec(b).requirements
            caps = self.sc.nodes[node].capabilities if node in self.sc.nodes else frozenset()
            if not reqs <= caps:
                self.bad("I3", f"{b} activated on {node} lacking {','.join(sorted(reqs - caps))}")
            if (app, b, node) not in self.perms:
                self.bad("I3", f"{b} activated on {node} without a granted permission")
        if new == "active":
            # a grant is good for one activation
            self.perms = {p for p in self.perms if p[:2] != (app, b)}
        self.phase[key] = new
        if len(self.actives(app, b)) > 1:
            self.bad("I2", f"{b} active on {','.join(self.actives(app, b))}")
        self.record(app, b)

    def on_map(self, e: TraceEvent) -> None:
        app, v = e["app"], int(e["v"])
        want = self.versions.get(app, 0) + 1
        if v != want:
            self.bad("I4", f"map version {v} after {want - 1}")
        self.versions[app] = max(v, self.versions.get(app, 0))
        entries = {}
        for item in filter(None, e["entries"].split(",")):
            b, host, status = item.split(":")
            entries[b] = (host, status)
        unused = set(filter(None, e["unused"].split(",")))
        src = self.source[app]
        hosts = {h for h, s in entries.values() if h != src}
        both = unused & hosts
        if both:
            self.bad("I9", f"map v{v} lists {','.join(sorted(both))} as both host and unused")
        for b, (host, status) in entries.items():
            if host != src and status != "completed":
                reqs = self.sc.apps[app].spec(b).requirements
                if host not in self.sc.nodes or not reqs <= self.sc.nodes[host].capabilities:
                    self.bad("I3", f"map v{v} places {b} on unqualified {host}")
            if status == "completed":
                self.completed.add((app, b))
                self.record(app, b)
        self.current_map[app] = entries
        self.map_hosts_at.append((self.at, self.lineno, app, entries))

    def on_adopt(self, e: TraceEvent) -> None:
        app, node, v = e["app"], e["node"], int(e["v"])
        held = self.adopted.get((app, node), 0)
        if v <= held:
            self.bad("I4", f"{node} adopted v{v} after v{held}")
        if v > self.versions.get(app, 0):
            self.bad("I4", f"{node} adopted v{v} before it was sequenced")
        self.adopted[(app, node)] = v

    def on_delivery(self, e: TraceEvent) -> None:
        src, dst = e["src"], e["dst"]
        sent = int(e["sent"])
        delay = 0 if src == dst else sum(self.sc.nodes[x].link_latency_ms for x in (src, dst) if x in self.sc.nodes)
        if self.at != sent + delay:
            self.bad("I7", f"{e['type']} {src}->{dst} sent at {sent} arrived at {self.at}, delay is {delay}")
        if e.kind == "deliver" and not self.reachable(src, dst):
            self.bad("I7", f"{e['type']} delivered {src}->{dst} across zones or to a failed node")

    def on_topology(self, e: TraceEvent) -> None:
        if e.kind == "move":
            self.zone[e["device"]] = e["zone"]
        elif e.kind == "fail":
            self.alive.discard(e["node"])
        else:
            self.alive.add(e["node"])
        self.topology.append((self.at, self.lineno))
        self.snapshots.append((self.at, dict(self.zone), set(self.alive)))

    def feed(self, lines: list[TraceEvent]) -> None:
        self.snapshots = [(0, dict(self.zone), set(self.alive))]
        for self.lineno, e in enumerate(lines, start=1):
            self.at = e.at
            if self.lineno == 1:
                self.header(e)
                continue
            k = e.kind
            if k == "phase":
                self.on_phase(e)
            elif k == "perm":
                if e["granted"] == "yes":
                    self.perms.add((e["app"], e["bubble"], e["node"]))
            elif k == "map":
                self.on_map(e)
            elif k == "adopt":
                self.on_adopt(e)
            elif k in ("deliver", "drop"):
                self.on_delivery(e)
            elif k in TOPOLOGY:
                if e.kind == "move" or e.get("was_up") != ("yes" if k == "recover" else "no"):
                    self.on_topology(e)
            elif k == "preempt":
                self.preempts.append((self.at, self.lineno, e["app"], e["bubble"], e["node"]))
            elif k == "start":
                self.started[e["app"]] = self.lineno
            elif k == "end":
                self.report.end_reason = e["reason"]
        self.report.lines = len(lines)
        self.lineno = len(lines)
        self.finish()

    # -- end-of-trace and timing checks ---------------------------------------

    def state_at(self, app: str, b: str, t: int) -> tuple[str, bool]:
        tl = self.timeline.get((app, b), [])
        i = bisect_right([x[0] for x in tl], t)
        if i == 0:
            return "", False
        _, node, done = tl[i - 1]
        return node, done

    def states_between(self, app: str, b: str, t0: int, t1: int) -> list[tuple[str, bool]]:
        """The state at ``t0`` followed by every change up to ``t1``."""
        tl = self.timeline.get((app, b), [])
        out = [self.state_at(app, b, t0)]
        out.extend((node, done) for at, node, done in tl if t0 < at <= t1)
        return out

    def moved_off(self, app: str, b: str, host: str, t0: int, t1: int) -> bool:
        return any(done or node not in ("", host) for node, done in self.states_between(app, b, t0, t1))

    def unreachable_through(self, src: str, host: str, t0: int, t1: int) -> bool:
        zone, alive = self.zone_alive_at(t0)
        if self.reachable(src, host, zone, alive):
            return False
        return not any(self.reachable(src, host, z, a) for at, z, a in self.snapshots if t0 < at <= t1)

    def zone_alive_at(self, t: int):
        cur = self.snapshots[0]
        for s in self.snapshots:
            if s[0] <= t:
                cur = s
        return cur[1], cur[2]

    def finish(self) -> None:
        end_at = self.at
        quiescent = self.report.end_reason == "quiescent"
        for app, started in sorted(self.started.items()):
            missing = set(self.sc.apps[app].bubble_ids) - self.launched.get(app, set())
            if missing:
                self.lineno = started
                self.bad("I1", f"launch of {app} did not create {','.join(sorted(missing))} on the source")
        self.lineno = self.report.lines
        if quiescent:
            for app, entries in self.current_map.items():
                final = self.versions[app]
                for b, (host, status) in entries.items():
                    if host != self.source[app] and status != "completed":
                        got = self.adopted.get((app, host), 0)
                        if got != final:
                            self.bad("I4", f"{host} hosts {b} but holds v{got}, final is v{final}")
        bound = self.lease + self.max_lat
        for t, lineno in self.topology:
            deadline = t + bound
            if deadline > end_at and not quiescent:
                continue
            maps = [m for m in self.map_hosts_at if m[0] <= t]
            latest = {}
            for _, _, app, entries in maps:
                latest[app] = entries
            for app, entries in sorted(latest.items()):
                src = self.source[app]
                for b, (host, status) in sorted(entries.items()):
                    if host == src or status == "completed":
                        continue
                    if not self.unreachable_through(src, host, t, deadline):
                        continue
                    self.exercise("I5")
                    if not self.moved_off(app, b, host, t, deadline):
                        self.at, self.lineno = t, lineno
                        self.bad("I5", f"{b} of {app} stranded on unreachable {host}: "
                                       f"not active elsewhere by {deadline}")
            # literal form: nothing remote reachable means everything is home
            for app in sorted(latest):
                src = self.source[app]
                zone, alive = self.zone_alive_at(deadline)
                if self.changed_between(t, deadline):
                    continue
                if any(self.reachable(src, n, zone, alive) for n in self.sc.nodes):
                    continue
                self.exercise("I5")
                for b in self.sc.apps[app].bubble_ids:
                    node, done = self.state_at(app, b, deadline)
                    if not done and node != src:
                        self.at, self.lineno = t, lineno
                        self.bad("I5", f"no node reachable from {src} after {t} but {b} "
                                       f"is not active on the source at {deadline}")
        for t, lineno, app, b, node in self.preempts:
            soon, later = t + self.lease, t + self.lease + self.max_lat
            if later > end_at and not quiescent:
                continue
            self.at, self.lineno = t, lineno
            self.exercise("I6")
            if all(where == node for where, _ in self.states_between(app, b, t, soon)):
                self.bad("I6", f"{b} still active on {node} at {soon} after preemption")
            if not self.moved_off(app, b, node, t, later):
                self.bad("I6", f"{b} not active elsewhere by {later} after preemption on {node}")

    def exercise(self, inv: str) -> None:
        self.report.exercised[inv] = self.report.exercised.get(inv, 0) + 1

    def changed_between(self, t0: int, t1: int) -> bool:
        return any(t0 < at <= t1 for at, _ in self.topology)


def check_trace(trace: list[TraceEvent], scenario: ScenarioFile) -> InvariantReport:
    """Evaluate I1-I9; raises ``TraceMismatch`` if the trace belongs elsewhere."""
    if not trace:
        raise TraceMismatch("empty trace")
    c = _Checker(scenario)
    c.feed(trace)
    c.report.violations.sort(key=lambda v: (v.line, v.invariant))
    return c.report
