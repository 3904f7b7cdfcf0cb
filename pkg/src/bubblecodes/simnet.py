"""Deterministic discrete-event simulator of the pervasive environment.

Events run in ``(at, seq)`` order where ``seq`` is assigned when the event
is scheduled. Scenario events are all scheduled before the run starts, so
at equal timestamps they precede anything the protocol schedules.

Reachability is zone membership: two parties can exchange a message only
when both are up and in the same zone, checked at send and at delivery
time. Delivery delay between ``a`` and ``b`` is the sum of their link
latencies (devices have latency 0), so device <-> node traffic takes
exactly the node's ``link_latency_ms``.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import replace

from . import wire
from .controller import (
    ClaimUpdate,
    Complete,
    ContextChange,
    Discover,
    PeerSend,
    Preempt,
    RemoteControllerState,
    Retract,
    Step,
    Timer,
    TimerConfig,
    c0_handle,
    c0_init,
    ci_crash,
    ci_handle,
)
from .model import ContextVariable, UserClaim
from .scenario.format import ScenarioEvent, ScenarioFile
from .trace import TraceEvent, ev

BACKGROUND_TIMERS = frozenset({"heartbeat", "lease"})


class World:
    """Mutable simulator state; ``step`` advances it by one event."""

    def __init__(self, scenario: ScenarioFile, seed: int = 0, config: TimerConfig | None = None,
                 horizon_ms: int | None = None):
        self.scenario = scenario
        self.seed = seed
        self.config = config or TimerConfig()
        self.rng = random.Random(seed)
        self.clock = 0
        self.queue: list = []
        self._seq = itertools.count()
        self.significant = 0
        self.trace: list[TraceEvent] = []
        self.msg_seq: dict[tuple[str, str], int] = {}
        self.zone_of = {n.node_id: n.zone_id for n in scenario.nodes.values()}
        self.zone_of.update({d.device_id: d.zone for d in scenario.devices.values()})
        self.latency = {n.node_id: n.link_latency_ms for n in scenario.nodes.values()}
        self.alive = set(scenario.nodes)
        self.claims: dict[str, UserClaim] = {}
        self.ctx_versions: dict[tuple[str, str], int] = {}
        self.incarnation = {n: 0 for n in scenario.nodes}
        self.ci = {
            n.node_id: RemoteControllerState(
                n.node_id, n.capabilities, self.config,
                self.rng.randrange(self.config.heartbeat_interval_ms))
            for n in scenario.nodes.values()
        }
        self.c0 = {}
        last = scenario.events[-1].at if scenario.events else 0
        self.horizon = last + (horizon_ms if horizon_ms is not None else 10 * self.config.lease_ms)
        self.end_reason: str | None = None

        cfg = self.config
        self.trace.append(ev(0, "run", seed=seed, scenario=scenario.digest(),
                             heartbeat_ms=cfg.heartbeat_interval_ms, missed=cfg.missed_heartbeats_to_lost,
                             lease_ms=cfg.lease_ms, permission_timeout_ms=cfg.permission_timeout_ms,
                             apps=list(scenario.apps)))
        for app_id in scenario.apps:
            self._push(0, ("start", app_id))
        for e in scenario.events:
            self._push(e.at, ("scenario", e))

    # -- queue ---------------------------------------------------------------

    @staticmethod
    def _is_background(item) -> bool:
        if item[0] == "timer":
            return item[4] in BACKGROUND_TIMERS
        if item[0] == "deliver":
            return item[5] == "status_heartbeat"
        return False

    def _push(self, at: int, item) -> None:
        if not self._is_background(item):
            self.significant += 1
        heapq.heappush(self.queue, (at, next(self._seq), item))

    # -- topology ------------------------------------------------------------

    def is_up(self, party: str) -> bool:
        return party not in self.latency or party in self.alive

    def reachable(self, a: str, b: str) -> bool:
        return self.is_up(a) and self.is_up(b) and self.zone_of[a] == self.zone_of[b]

    def delay(self, a: str, b: str) -> int:
        if a == b:
            return 0
        return self.latency.get(a, 0) + self.latency.get(b, 0)

    def nodes_near(self, device: str):
        zone = self.zone_of[device]
        return tuple(self.scenario.nodes[n] for n in sorted(self.scenario.nodes)
                     if n in self.alive and self.zone_of[n] == zone)

    # -- dispatch ------------------------------------------------------------

    def _apply(self, owner: tuple[str, str], step: Step) -> None:
        kind, ident = owner
        if kind == "c0":
            self.c0[ident] = step.state
        else:
            self.ci[ident] = step.state
        self.trace.extend(step.trace)
        for m in step.messages:
            self.send(m)
        inc = self.incarnation.get(ident, 0) if kind == "ci" else 0
        for at, tag, arg in step.timers:
            self._push(max(at, self.clock), ("timer", kind, ident, inc, tag, arg))

    def _to_c0(self, app: str, inp) -> None:
        self._apply(("c0", app), c0_handle(self.c0[app], inp, self.clock))

    def _to_ci(self, node: str, inp) -> None:
        if node in self.alive:
            self._apply(("ci", node), ci_handle(self.ci[node], inp, self.clock))

    def send(self, msg: wire.Message) -> None:
        pair = (msg.src, msg.dst)
        n = self.msg_seq.get(pair, 0) + 1
        self.msg_seq[pair] = n
        msg = replace(msg, seq=n)
        data = wire.encode(msg)
        ok = self.reachable(msg.src, msg.dst)
        self._push(self.clock + self.delay(msg.src, msg.dst),
                   ("deliver", data, self.clock, ok, msg.src, msg.type))

    def _deliver(self, data: bytes, sent: int, ok_at_send: bool) -> None:
        try:
            msg = wire.decode(data)
        except wire.WireError as e:
            self.trace.append(ev(self.clock, "wire_error", code=e.code))
            return
        fields = dict(seq=msg.seq, type=msg.type, src=msg.src, dst=msg.dst, app=msg.app, sent=sent)
        if not (ok_at_send and self.reachable(msg.src, msg.dst)):
            down = not (self.is_up(msg.src) and self.is_up(msg.dst))
            self.trace.append(ev(self.clock, "drop", **fields, reason="node_down" if down else "out_of_range"))
            return
        self.trace.append(ev(self.clock, "deliver", **fields))
        if msg.dst in self.ci:
            self._to_ci(msg.dst, msg)
        elif msg.app in self.c0 and self.c0[msg.app].source == msg.dst:
            self._to_c0(msg.app, msg)
        else:
            self.trace.append(ev(self.clock, "protocol_error", app=msg.app, node=msg.dst, type=msg.type))

    def _timer(self, kind: str, ident: str, inc: int, tag: str, arg: str) -> None:
        if kind == "c0":
            self._to_c0(ident, Timer(tag, arg))
        elif ident in self.alive and self.incarnation[ident] == inc:
            self._to_ci(ident, Timer(tag, arg))

    def _start(self, app_id: str) -> None:
        app = self.scenario.apps[app_id]
        dev = self.scenario.devices[app.source_device]
        st, trace = c0_init(app, dev.user, dev.priority, self.config, self.clock)
        self.c0[app_id] = st
        self.trace.append(ev(self.clock, "start", app=app_id, device=dev.device_id, user=dev.user,
                             priority=dev.priority))
        self.trace.extend(trace)
        self._to_c0(app_id, Discover(self.nodes_near(dev.device_id)))

    def active_host(self, app: str, bubble: str) -> str | None:
        """Where the bubble's single active replica runs right now, if anywhere."""
        for node in sorted(self.ci):
            rep = self.ci[node].bubbles.get((app, bubble))
            if rep is not None and rep.phase == "active" and node in self.alive:
                return node
        c0 = self.c0.get(app)
        if c0 is not None and c0.source_bubbles[bubble].phase == "active":
            return c0.source
        return None

    # -- scenario events -----------------------------------------------------

    def claim_node(self, claim: UserClaim) -> list[TraceEvent]:
        """Record a claim if it outranks the incumbent and preempt weaker users."""
        mark = len(self.trace)
        self._claim(claim)
        return self.trace[mark:]

    def _claim(self, claim: UserClaim) -> None:
        incumbent = self.claims.get(claim.node_id)
        accepted = claim.overrides(incumbent)
        self.trace.append(ev(self.clock, "claim", user=claim.user_id, node=claim.node_id,
                             priority=claim.priority, accepted=accepted))
        if not accepted:
            return
        self.claims[claim.node_id] = claim
        node = claim.node_id
        if node not in self.alive:
            return
        self._to_ci(node, ClaimUpdate(claim))
        for app, b in sorted(self.ci[node].bubbles):
            rep = self.ci[node].bubbles.get((app, b))
            owner = self.scenario.app_user(app)
            if rep is None or rep.phase != "active":
                continue
            if owner.user != claim.user_id and owner.priority < claim.priority:
                self.trace.append(ev(self.clock, "preempt", app=app, bubble=b, node=node,
                                     user=claim.user_id, priority=claim.priority))
                self._to_ci(node, Preempt(app, b, claim.user_id, claim.priority))

    def _scenario(self, e: ScenarioEvent) -> None:
        sc, now, a = self.scenario, self.clock, e.args
        if e.kind == "move":
            device, zone = a
            self.zone_of[device] = zone
            self.trace.append(ev(now, "move", device=device, zone=zone))
            for app in sc.apps.values():
                if app.source_device == device:
                    self._to_c0(app.app_id, Discover(self.nodes_near(device)))
        elif e.kind == "fail":
            node = a[0]
            self.trace.append(ev(now, "fail", node=node, was_up=node in self.alive))
            if node in self.alive:
                self._apply(("ci", node), ci_crash(self.ci[node], now))
                self.alive.discard(node)
                self.incarnation[node] += 1
        elif e.kind == "recover":
            node = a[0]
            self.trace.append(ev(now, "recover", node=node, was_up=node in self.alive))
            if node not in self.alive:
                self.alive.add(node)
                self.incarnation[node] += 1
                if node in self.claims:
                    self._to_ci(node, ClaimUpdate(self.claims[node]))
                for app in sc.apps.values():
                    if self.zone_of[app.source_device] == self.zone_of[node]:
                        self._to_c0(app.app_id, Discover(self.nodes_near(app.source_device)))
        elif e.kind == "claim":
            self.claim_node(UserClaim(a[0], a[1], int(a[2])))
        elif e.kind == "release":
            user, node = a
            held = self.claims.get(node)
            released = held is not None and held.user_id == user
            self.trace.append(ev(now, "release", user=user, node=node, released=released))
            if released:
                del self.claims[node]
                self._to_ci(node, ClaimUpdate(None))
        elif e.kind == "context":
            app, key, value = a
            version = self.ctx_versions.get((app, key), 0) + 1
            self.ctx_versions[(app, key)] = version
            var = ContextVariable(key, value, version)
            self.trace.append(ev(now, "context", app=app, key=key, value=value, version=version))
            self._to_c0(app, ContextChange(app, var))
            for node in sorted(self.ci):
                if any(k[0] == app for k in self.ci[node].bubbles):
                    self._to_ci(node, ContextChange(app, var))
        elif e.kind == "complete":
            app, b = a
            host = None if e.via_c0 else self.active_host(app, b)
            self.trace.append(ev(now, "complete", app=app, bubble=b, via="c0" if e.via_c0 else "bubble",
                                 at_node=host or "none"))
            if host is None or host == sc.apps[app].source_device:
                self._to_c0(app, Complete(app, b))
            else:
                self._to_ci(host, Complete(app, b))
        elif e.kind == "retract":
            app, b = a
            self.trace.append(ev(now, "retract_request", app=app, bubble=b))
            self._to_c0(app, Retract(b))
        elif e.kind == "send":
            app, src_b, dst_b, payload = a
            host = self.active_host(app, src_b)
            self.trace.append(ev(now, "send", app=app, src=src_b, dst=dst_b, host=host or "none"))
            inp = PeerSend(app, src_b, dst_b, payload.encode())
            if host is None:
                self.trace.append(ev(now, "send_failed", app=app, bubble=src_b, peer=dst_b, why="not_active"))
            elif host == sc.apps[app].source_device:
                self._to_c0(app, inp)
            else:
                self._to_ci(host, inp)

    # -- loop ----------------------------------------------------------------

    def step(self) -> list[TraceEvent]:
        """Run the next event; returns the trace lines it produced."""
        mark = len(self.trace)
        at, _, item = heapq.heappop(self.queue)
        if not self._is_background(item):
            self.significant -= 1
        self.clock = at
        kind = item[0]
        if kind == "deliver":
            self._deliver(item[1], item[2], item[3])
        elif kind == "timer":
            self._timer(*item[1:])
        elif kind == "scenario":
            self._scenario(item[1])
        elif kind == "start":
            self._start(item[1])
        return self.trace[mark:]

    def stable(self) -> bool:
        """True when only heartbeats remain and none of them can change anything."""
        for app, c0 in self.c0.items():
            if c0.pending:
                return False
            for e in c0.map.entries:
                if e.status == "completed" or e.active_host == c0.source:
                    continue
                h = e.active_host
                if not self.reachable(c0.source, h):
                    return False
                rep = self.ci[h].bubbles.get((app, e.bubble_id))
                held = self.ci[h].known_map.get(app)
                if rep is None or rep.phase != "active" or held is None or held.version != c0.map.version:
                    return False
        for node, ci in self.ci.items():
            for (app, b), rep in ci.bubbles.items():
                e = self.c0[app].map.entry(b)
                if rep.phase != "active" or e.active_host != node or e.status == "completed":
                    return False
        return len(self.c0) == len(self.scenario.apps)

    def run(self) -> list[TraceEvent]:
        while True:
            if self.significant == 0 and self.stable():
                self.end_reason = "quiescent"
                break
            if not self.queue:
                self.end_reason = "stuck"
                break
            if self.queue[0][0] > self.horizon:
                self.end_reason = "cutoff"
                break
            self.step()
        self.trace.append(ev(self.clock, "end", reason=self.end_reason))
        for app_id, c0 in self.c0.items():
            place = {e.bubble_id: ("completed" if e.status == "completed" else e.active_host)
                     for e in c0.map.entries}
            self.trace.append(ev(self.clock, "placement", app=app_id, v=c0.map.version, **place))
        return self.trace
