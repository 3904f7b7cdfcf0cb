"""Source (C0) and remote (Ci) controller state machines.

Handlers are pure transitions: each one copies the incoming state, applies
one input and returns a ``Step`` holding the new state, the outbound
messages (``seq`` left at 0, stamped by the network), trace events and
timer requests. Nothing is read from globals or the wall clock.

Lease arithmetic. A remote replica's lease starts at the send time of
the node's latest heartbeat that C0 has echoed back, or at the moment the
node granted permission for that bubble (carried in the transfer),
whichever is later. The remote gives up one millisecond early, at
``anchor + lease_ms - 1``. C0 anchors the same two events at their receipt
time and reactivates the source copy at ``anchor + lease_ms``. A remote
replica therefore always expires strictly before the source copy wakes up,
even over a zero-latency link. Every anchor is evidence received from the
node, so once it falls silent the source copy is back within one lease.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from . import bubble as bub
from .bubble import BubbleError, BubbleState
from .model import (
    AppManifest,
    BubblesMap,
    Candidate,
    ContextVariable,
    NodeProfile,
    UnusedNode,
    UserClaim,
    map_apply,
    select_host,
)
from .trace import TraceEvent, ev
from .wire import (
    AppData,
    BubbleTransfer,
    ContextInfo,
    MapUpdate,
    Message,
    PermissionReply,
    PermissionRequest,
    QualificationReply,
    QualificationRequest,
    RetractCommand,
    StatusHeartbeat,
    SwitchNotice,
    TaskCompletion,
)


@dataclass(frozen=True)
class TimerConfig:
    heartbeat_interval_ms: int = 1000
    missed_heartbeats_to_lost: int = 3
    permission_timeout_ms: int = 500

    def __post_init__(self) -> None:
        if min(self.heartbeat_interval_ms, self.missed_heartbeats_to_lost, self.permission_timeout_ms) <= 0:
            raise ValueError("timer settings must be positive")

    @property
    def lease_ms(self) -> int:
        return self.heartbeat_interval_ms * self.missed_heartbeats_to_lost


# -- inputs other than messages ------------------------------------------------


@dataclass(frozen=True)
class Timer:
    tag: str
    arg: str = ""


@dataclass(frozen=True)
class Discover:
    nodes: tuple[NodeProfile, ...]


@dataclass(frozen=True)
class Preempt:
    app: str
    bubble_id: str
    user: str
    priority: int


@dataclass(frozen=True)
class ClaimUpdate:
    claim: UserClaim | None


@dataclass(frozen=True)
class ContextChange:
    app: str
    var: ContextVariable


@dataclass(frozen=True)
class Complete:
    app: str
    bubble_id: str


@dataclass(frozen=True)
class Retract:
    bubble_id: str


@dataclass(frozen=True)
class PeerSend:
    app: str
    from_bubble: str
    to_bubble: str
    payload: bytes


class Step(NamedTuple):
    state: object
    messages: list[Message]
    trace: list[TraceEvent]
    timers: list[tuple[int, str, str]]


class _Out:
    def __init__(self, me: str, app: str | None = None):
        self.me = me
        self.app = app
        self.messages: list[Message] = []
        self.trace: list[TraceEvent] = []
        self.timers: list[tuple[int, str, str]] = []

    def send(self, dst: str, body, app: str | None = None) -> None:
        self.messages.append(Message(0, self.me, dst, app or self.app, body))

    def note(self, e: TraceEvent) -> None:
        self.trace.append(e)

    def step(self, state) -> Step:
        return Step(state, self.messages, self.trace, self.timers)


def _fmt_entries(m: BubblesMap) -> str:
    return ",".join(f"{e.bubble_id}:{e.active_host}:{e.status}" for e in m.entries)


def map_event(now: int, m: BubblesMap, cause: str) -> TraceEvent:
    return ev(now, "map", app=m.app_id, v=m.version, entries=_fmt_entries(m),
              unused=[u.node_id for u in m.unused_nodes], cause=cause)


# -- source controller -------------------------------------------------------------


@dataclass
class Round:
    """One discovery/qualification/permission exchange."""

    round_id: int
    bubbles: tuple[str, ...]
    nodes: dict[str, NodeProfile]
    caps: dict[str, frozenset[str]] = field(default_factory=dict)
    # (node, bubble) -> when the grant arrived, or None if refused
    permits: dict[tuple[str, str], int | None] = field(default_factory=dict)
    awaiting: set[tuple[str, str]] = field(default_factory=set)


@dataclass
class PendingSwitch:
    from_node: str
    to_node: str


@dataclass
class SourceControllerState:
    app: AppManifest
    user: str
    priority: int
    config: TimerConfig
    map: BubblesMap
    source_bubbles: dict[str, BubbleState]
    last_heartbeat_at: dict[str, int] = field(default_factory=dict)
    discovered: dict[str, NodeProfile] = field(default_factory=dict)
    available: dict[str, UnusedNode] = field(default_factory=dict)
    round: Round | None = None
    rounds_started: int = 0
    repartition_pending: bool = False
    switches: dict[str, PendingSwitch] = field(default_factory=dict)
    retracting: dict[str, int] = field(default_factory=dict)
    placed_at: dict[str, int] = field(default_factory=dict)
    granted_at: dict[str, int] = field(default_factory=dict)
    echoed: dict[str, int] = field(default_factory=dict)

    @property
    def source(self) -> str:
        return self.app.source_device

    @property
    def pending(self) -> bool:
        return bool(self.round or self.repartition_pending or self.switches or self.retracting)

    def clone(self) -> SourceControllerState:
        c = copy.copy(self)
        for name in ("source_bubbles", "last_heartbeat_at", "discovered", "available",
                     "switches", "retracting", "placed_at", "granted_at", "echoed"):
            setattr(c, name, dict(getattr(self, name)))
        if self.round is not None:
            r = self.round
            c.round = Round(r.round_id, r.bubbles, dict(r.nodes), dict(r.caps),
                            dict(r.permits), set(r.awaiting))
        return c


def _latency(st: SourceControllerState, node: str) -> int:
    p = st.discovered.get(node)
    if p is not None:
        return p.link_latency_ms
    u = st.available.get(node)
    return u.link_latency_ms if u is not None else 0


def _transfer_anchor(st: SourceControllerState, b: str) -> int:
    return st.granted_at.get(b, -1)


def _unused(st: SourceControllerState, m: BubblesMap) -> tuple[UnusedNode, ...]:
    hosts = m.hosts(exclude=st.source)
    return tuple(st.available[n] for n in sorted(st.available) if n not in hosts)


def _commit(st: SourceControllerState, out: _Out, old: BubblesMap, draft: BubblesMap, now: int,
            cause: str, transfers: dict[str, int] | None = None, force: bool = False) -> None:
    """Sequence ``draft`` as the next version and distribute it.

    ``transfers`` maps each bubble to ship to the time its host's grant
    arrived. The grant is the newest proof that the host was alive, so the
    lease of the new replica runs from there on both ends.
    """
    transfers = transfers or {}
    draft = replace(draft, unused_nodes=_unused(st, draft))
    if not force and draft.same_content(old):
        return
    new = draft.with_version(old.version + 1)
    st.map = new
    out.note(map_event(now, new, cause))
    for b, granted in transfers.items():
        host = new.host_of(b)
        out.send(host, BubbleTransfer(st.app.spec(b), new, lease_start=granted - _latency(st, host)))
        st.placed_at[b] = now
        st.granted_at[b] = granted
        out.timers.append((granted + st.config.lease_ms, "lease", host))
    receivers = {new.host_of(b) for b in transfers}
    concerned = (new.hosts(exclude=st.source) | old.hosts(exclude=st.source)) - receivers
    for n in sorted(concerned):
        out.send(n, MapUpdate(new))
    for b in sorted(st.source_bubbles):
        st.source_bubbles[b] = bub.adopt_map(st.source_bubbles[b], new)


def _source_phase(st: SourceControllerState, out: _Out, b: str, phase: str, now: int, cause: str) -> None:
    rep = st.source_bubbles[b]
    if rep.phase == phase:
        return
    rep, pe = bub.set_phase(rep, phase, now, cause)
    st.source_bubbles[b] = rep
    out.note(pe)


def _bring_home(st: SourceControllerState, out: _Out, draft: BubblesMap, b: str, now: int,
                cause: str) -> BubblesMap:
    """Reactivate the source copy of ``b`` and point the draft map at it."""
    st.switches.pop(b, None)
    st.retracting.pop(b, None)
    st.placed_at.pop(b, None)
    st.granted_at.pop(b, None)
    out.note(ev(now, "retract", app=st.app.app_id, bubble=b, cause=cause))
    _source_phase(st, out, b, "active", now, cause)
    return draft.with_entry(b, active_host=st.source, status="active")


def c0_init(app: AppManifest, user: str, priority: int, config: TimerConfig, now: int = 0
            ) -> tuple[SourceControllerState, list[TraceEvent]]:
    """Launch the app: every bubble runs on the source device."""
    m = BubblesMap.initial(app)
    reps, trace = {}, []
    for spec in app.bubbles:
        rep, pe = bub.spawn(app.app_id, spec, app.source_device, app.source_device, m, now, "launch")
        reps[spec.bubble_id] = rep
        trace.append(pe)
    return SourceControllerState(app, user, priority, config, m, reps), trace


def c0_partition(app: AppManifest, discovered, now: int = 0, *, user: str = "",
                 priority: int = 0, config: TimerConfig | None = None) -> Step:
    """Start the app and open the first partitioning round."""
    st, trace = c0_init(app, user, priority, config or TimerConfig(), now)
    step = c0_handle(st, Discover(tuple(discovered)), now)
    return Step(step.state, step.messages, trace + step.trace, step.timers)


def _stranded(st: SourceControllerState) -> list[str]:
    """Bubbles whose host is out of range but whose lease has not run out."""
    return [
        e.bubble_id for e in st.map.entries
        if e.status != "completed" and e.active_host != st.source and e.active_host not in st.discovered
    ]


def _begin_round(st: SourceControllerState, out: _Out, now: int) -> None:
    stranded = _stranded(st)
    if stranded:
        # retract fully before placing anything in the new surroundings
        if not st.repartition_pending:
            out.note(ev(now, "round_deferred", app=st.app.app_id, waiting=stranded))
        st.repartition_pending = True
        return
    st.repartition_pending = False
    bubbles = tuple(
        b for b in st.app.bubble_ids
        if st.source_bubbles[b].phase == "active" and st.map.entry(b).status != "completed"
    )
    if not bubbles and st.map.version > 0:
        return
    st.rounds_started += 1
    r = Round(st.rounds_started, bubbles, dict(sorted(st.discovered.items())))
    st.round = r
    out.note(ev(now, "round", app=st.app.app_id, id=r.round_id, bubbles=bubbles, nodes=list(r.nodes)))
    if not bubbles or not r.nodes:
        _finish_round(st, out, now)
        return
    reqs = frozenset().union(*(st.app.spec(b).requirements for b in bubbles))
    for n in r.nodes:
        r.awaiting.add((n, ""))
        out.send(n, QualificationRequest(reqs))
    out.timers.append((now + st.config.permission_timeout_ms, "round", str(r.round_id)))


def _finish_round(st: SourceControllerState, out: _Out, now: int) -> None:
    r = st.round
    st.round = None
    # nodes that went out of range while the round ran are not candidates
    replies = {n: caps for n, caps in r.caps.items() if n in st.discovered}
    for n, caps in replies.items():
        st.available[n] = UnusedNode(n, caps, r.nodes[n].link_latency_ms)
    for n in r.nodes:
        if n not in replies:
            st.available.pop(n, None)
    draft, moved = st.map, {}
    for b in r.bubbles:
        if st.source_bubbles[b].phase != "active" or draft.entry(b).status == "completed":
            continue
        candidates = [
            Candidate(n, caps, r.nodes[n].link_latency_ms, _fresh(st, n, r.permits.get((n, b)), now))
            for n, caps in replies.items()
        ]
        target = select_host(st.app.spec(b).requirements, candidates, st.source)
        if target != st.source:
            _source_phase(st, out, b, "dormant", now, "transfer")
            draft = draft.with_entry(b, active_host=target, status="active")
            moved[b] = r.permits[(target, b)]
    _commit(st, out, st.map, draft, now, "partition", moved, force=st.map.version == 0)
    if st.repartition_pending:
        _begin_round(st, out, now)


def _fresh(st: SourceControllerState, node: str, granted: int | None, now: int) -> bool:
    """A grant still backs a lease (short leases can lapse during a round)."""
    if granted is None:
        return False
    return max(granted, st.last_heartbeat_at.get(node, -1)) + st.config.lease_ms > now


def _request_round(st: SourceControllerState, out: _Out, now: int) -> None:
    if st.round is not None:
        st.repartition_pending = True
    else:
        _begin_round(st, out, now)


def _on_qualification(st, out, src, body: QualificationReply, now) -> None:
    r = st.round
    if r is None or (src, "") not in r.awaiting:
        out.note(ev(now, "late_reply", app=st.app.app_id, node=src, type=body.kind))
        return
    r.awaiting.discard((src, ""))
    r.caps[src] = body.capabilities
    for b in r.bubbles:
        reqs = st.app.spec(b).requirements
        if reqs <= body.capabilities:
            r.awaiting.add((src, b))
            out.send(src, PermissionRequest(b, reqs, st.user, st.priority))
    if not r.awaiting:
        _finish_round(st, out, now)


def _on_permission(st, out, src, body: PermissionReply, now) -> None:
    b = body.bubble_id
    out.note(ev(now, "perm", app=st.app.app_id, bubble=b, node=src, granted=body.granted))
    sw = st.switches.get(b)
    if sw is not None and sw.to_node == src:
        del st.switches[b]
        if body.granted:
            draft = st.map.with_entry(b, active_host=src, status="active")
            _commit(st, out, st.map, draft, now, "switch", {b: now})
        else:
            draft = _bring_home(st, out, st.map, b, now, "preempted")
            _commit(st, out, st.map, draft, now, "preempted")
            _request_round(st, out, now)
        return
    r = st.round
    if r is not None and (src, b) in r.awaiting:
        r.awaiting.discard((src, b))
        r.permits[(src, b)] = now if body.granted else None
        if not r.awaiting:
            _finish_round(st, out, now)
        return
    e = st.map.entry(b)
    if not body.granted and e is not None and e.active_host == src and e.status == "active":
        # transfer refused on arrival; the node never ran the replica
        draft = _bring_home(st, out, st.map, b, now, "refused")
        _commit(st, out, st.map, draft, now, "refused")
        _request_round(st, out, now)
        return
    out.note(ev(now, "late_reply", app=st.app.app_id, node=src, type=body.kind))


def _on_heartbeat(st, out, src, body: StatusHeartbeat, now) -> None:
    cfg = st.config
    st.last_heartbeat_at[src] = max(st.last_heartbeat_at.get(src, now), now)
    out.timers.append((now + cfg.lease_ms, "lease", src))
    if body.lease_start <= st.echoed.get(src, -1):
        return  # a replay: only the timestamp moves
    st.echoed[src] = body.lease_start
    mine = tuple(
        e.bubble_id for e in st.map.entries
        if e.active_host == src and e.status in ("active", "retracting")
    )
    out.send(src, StatusHeartbeat(mine, body.lease_start, st.map.version))
    if body.map_version < st.map.version:
        out.send(src, MapUpdate(st.map))
    lat = _latency(st, src)
    draft = st.map
    for b in mine:
        if b in st.switches:
            continue
        sent = st.retracting.get(b)
        if sent is not None:
            if body.lease_start < sent + lat:
                continue
            if b in body.hosted_bubbles:
                if body.lease_start > sent + lat:
                    st.retracting[b] = now
                    out.send(src, RetractCommand(b, "c0_order"))
            else:
                draft = _bring_home(st, out, draft, b, now, "c0_order")
        elif b not in body.hosted_bubbles and body.lease_start > st.placed_at.get(b, 0) + lat:
            # by then every transfer to src has been delivered (latency is fixed)
            draft = _bring_home(st, out, draft, b, now, "missing")
    if draft is not st.map:
        _commit(st, out, st.map, draft, now, "retract")
        _request_round(st, out, now)


def _on_lease_timer(st, out, node, now) -> None:
    lease = st.config.lease_ms
    heard = st.last_heartbeat_at.get(node, -1)
    mapped = [
        e.bubble_id for e in st.map.entries
        if e.active_host == node and e.status in ("active", "retracting")
    ]
    # a transfer renews only its own bubble, so one that never arrived
    # cannot keep the node's older bubbles alive
    anchors = {b: max(heard, _transfer_anchor(st, b)) for b in mapped}
    if now >= max([heard, *anchors.values()]) + lease:
        st.available.pop(node, None)
    lost = [b for b in mapped if now >= anchors[b] + lease]
    if not lost:
        return
    out.note(ev(now, "node_lost", app=st.app.app_id, node=node, bubbles=lost,
                last=max(anchors[b] for b in lost)))
    draft = st.map
    for b in lost:
        draft = _bring_home(st, out, draft, b, now, "node_lost")
    _commit(st, out, st.map, draft, now, "node_lost")
    _request_round(st, out, now)


def _on_switch(st, out, src, body: SwitchNotice, now) -> None:
    b = body.bubble_id
    e = st.map.entry(b)
    if e is None or e.active_host != src or e.status != "active" or b in st.switches:
        out.note(ev(now, "stale_switch", app=st.app.app_id, bubble=b, node=src))
        return
    if body.to_node == st.source or body.to_node not in st.available:
        draft = _bring_home(st, out, st.map, b, now, "preempted")
        _commit(st, out, st.map, draft, now, "preempted")
        _request_round(st, out, now)
        return
    st.switches[b] = PendingSwitch(src, body.to_node)
    out.send(body.to_node, PermissionRequest(b, st.app.spec(b).requirements, st.user, st.priority))
    # the preempted bubble must be running again within one lease
    wait = min(st.config.permission_timeout_ms, st.config.lease_ms // 2)
    out.timers.append((now + wait, "switch", b))


def _on_task_completion(st, out, src, b, now) -> None:
    e = st.map.entry(b)
    if e is None or e.active_host != src or e.status == "completed":
        out.note(ev(now, "stale_completion", app=st.app.app_id, bubble=b, node=src))
        return
    _complete(st, out, b, now, notify=False)


def _complete(st, out, b, now, notify: bool) -> None:
    e = st.map.entry(b)
    st.switches.pop(b, None)
    st.retracting.pop(b, None)
    st.placed_at.pop(b, None)
    st.granted_at.pop(b, None)
    if notify and e.active_host != st.source:
        out.send(e.active_host, RetractCommand(b, "task_done"))
    _source_phase(st, out, b, "dormant", now, "task_done")
    out.note(ev(now, "completed", app=st.app.app_id, bubble=b, node=e.active_host))
    draft = st.map.with_entry(b, active_host=st.source, status="completed")
    _commit(st, out, st.map, draft, now, "task_done")
    if st.repartition_pending and st.round is None:
        _begin_round(st, out, now)


def c0_retract(state: SourceControllerState, bubble_id: str, cause: str, now: int) -> Step:
    """Pull a bubble back to the source device.

    ``c0_order`` asks the host to self-destruct and waits for the ack (a
    heartbeat without the bubble) or the lease; ``task_done`` completes the
    bubble at once; ``node_lost`` reactivates the source copy immediately and
    is only called once the host's lease has run out.
    """
    st = state.clone()
    out = _Out(st.source, st.app.app_id)
    e = st.map.entry(bubble_id)
    if e is None:
        out.note(ev(now, "protocol_error", app=st.app.app_id, bubble=bubble_id, why="unknown_bubble"))
        return out.step(st)
    if e.status == "completed":
        out.note(ev(now, "redundant_retract", app=st.app.app_id, bubble=bubble_id, cause=cause))
        return out.step(st)
    if cause == "task_done":
        _complete(st, out, bubble_id, now, notify=True)
        return out.step(st)
    if e.active_host == st.source and bubble_id not in st.switches:
        out.note(ev(now, "redundant_retract", app=st.app.app_id, bubble=bubble_id, cause=cause))
        return out.step(st)
    if cause == "c0_order" and bubble_id not in st.switches:
        if e.status == "retracting":
            out.note(ev(now, "redundant_retract", app=st.app.app_id, bubble=bubble_id, cause=cause))
            return out.step(st)
        st.retracting[bubble_id] = now
        out.note(ev(now, "retract_order", app=st.app.app_id, bubble=bubble_id, node=e.active_host))
        out.send(e.active_host, RetractCommand(bubble_id, "c0_order"))
        _commit(st, out, st.map, st.map.with_entry(bubble_id, status="retracting"), now, "c0_order")
        return out.step(st)
    # node_lost, or an order for a bubble mid-switch (its old replica is already inactive)
    draft = _bring_home(st, out, st.map, bubble_id, now, cause)
    _commit(st, out, st.map, draft, now, cause)
    _request_round(st, out, now)
    return out.step(st)


def c0_handle(state: SourceControllerState, inp, now: int) -> Step:
    st = state.clone()
    app = st.app.app_id
    out = _Out(st.source, app)
    if isinstance(inp, Message):
        body = inp.body
        bid = getattr(body, "bubble_id", None)
        if inp.app != app or (bid is not None and st.map.entry(bid) is None):
            out.note(ev(now, "protocol_error", app=inp.app, node=inp.src, type=inp.type))
        elif isinstance(body, StatusHeartbeat):
            _on_heartbeat(st, out, inp.src, body, now)
        elif isinstance(body, QualificationReply):
            _on_qualification(st, out, inp.src, body, now)
        elif isinstance(body, PermissionReply):
            _on_permission(st, out, inp.src, body, now)
        elif isinstance(body, SwitchNotice):
            _on_switch(st, out, inp.src, body, now)
        elif isinstance(body, TaskCompletion):
            _on_task_completion(st, out, inp.src, bid, now)
        elif isinstance(body, AppData):
            _receive_data(st.source_bubbles.get(bid), out, inp, now)
        else:
            out.note(ev(now, "protocol_error", app=app, node=inp.src, type=inp.type))
    elif isinstance(inp, Timer):
        if inp.tag == "lease":
            _on_lease_timer(st, out, inp.arg, now)
        elif inp.tag == "round":
            if st.round is not None and str(st.round.round_id) == inp.arg:
                out.note(ev(now, "round_timeout", app=app, id=inp.arg))
                _finish_round(st, out, now)
        elif inp.tag == "switch":
            if inp.arg in st.switches:
                del st.switches[inp.arg]
                draft = _bring_home(st, out, st.map, inp.arg, now, "preempted")
                _commit(st, out, st.map, draft, now, "preempted")
                _request_round(st, out, now)
    elif isinstance(inp, Discover):
        st.discovered = {p.node_id: p for p in inp.nodes}
        st.available = {n: u for n, u in st.available.items() if n in st.discovered}
        out.note(ev(now, "discover", app=app, nodes=sorted(st.discovered)))
        _request_round(st, out, now)
    elif isinstance(inp, ContextChange):
        for origin in ("self_detected", "pushed_by_c0"):
            for b in st.app.bubble_ids:
                rep = st.source_bubbles[b]
                if rep.phase == "active":
                    st.source_bubbles[b], tr = bub.on_context_change(rep, inp.var, origin, now)
                    out.trace.extend(tr)
        hosts = {e.active_host for e in st.map.entries if e.status != "completed"} - {st.source}
        for n in sorted(hosts):
            out.send(n, ContextInfo(inp.var))
    elif isinstance(inp, Complete):
        return c0_retract(state, inp.bubble_id, "task_done", now)
    elif isinstance(inp, Retract):
        return c0_retract(state, inp.bubble_id, "c0_order", now)
    elif isinstance(inp, PeerSend):
        _peer_send(st.source_bubbles.get(inp.from_bubble), out, inp, now)
    else:
        raise TypeError(f"unsupported input {inp!r}")
    return out.step(st)


def _peer_send(rep: BubbleState | None, out: _Out, inp: PeerSend, now: int) -> None:
    try:
        if rep is None:
            raise BubbleError("not_active", inp.from_bubble)
        msg = bub.peer_send(rep, inp.to_bubble, inp.payload)
    except BubbleError as e:
        out.note(ev(now, "send_failed", app=inp.app, bubble=inp.from_bubble, peer=inp.to_bubble, why=e.code))
        return
    out.messages.append(msg)


def _receive_data(rep: BubbleState | None, out: _Out, inp: Message, now: int) -> None:
    body = inp.body
    if rep is None or rep.phase != "active":
        out.note(ev(now, "undeliverable", app=inp.app, bubble=body.bubble_id, node=inp.dst))
    else:
        out.note(ev(now, "app_data", app=inp.app, bubble=body.bubble_id, node=inp.dst,
                    size=len(body.payload)))


# -- remote controller -----------------------------------------------------------


@dataclass
class RemoteControllerState:
    node_id: str
    capabilities: frozenset[str]
    config: TimerConfig
    heartbeat_phase_ms: int = 0
    bubbles: dict[tuple[str, str], BubbleState] = field(default_factory=dict)
    known_map: dict[str, BubblesMap] = field(default_factory=dict)
    last_c0_contact_at: dict[str, int] = field(default_factory=dict)
    transfer_start: dict[tuple[str, str], int] = field(default_factory=dict)
    sources: dict[str, str] = field(default_factory=dict)
    app_users: dict[str, tuple[str, int]] = field(default_factory=dict)
    ticking: frozenset[str] = frozenset()
    claim: UserClaim | None = None

    @property
    def hosted(self) -> set[tuple[str, str]]:
        return set(self.bubbles)

    def hosted_for(self, app: str) -> tuple[str, ...]:
        return tuple(sorted(b for a, b in self.bubbles if a == app))

    def clone(self) -> RemoteControllerState:
        c = copy.copy(self)
        for name in ("bubbles", "known_map", "last_c0_contact_at", "transfer_start", "sources", "app_users"):
            setattr(c, name, dict(getattr(self, name)))
        return c


def _claimed_against(st: RemoteControllerState, app: str) -> bool:
    user = st.app_users.get(app)
    c = st.claim
    return c is not None and user is not None and c.user_id != user[0] and c.priority > user[1]


def _next_tick(st: RemoteControllerState, now: int) -> int:
    period = st.config.heartbeat_interval_ms
    t = now - (now - st.heartbeat_phase_ms) % period
    return t + period


def _arm(st: RemoteControllerState, out: _Out, app: str, now: int) -> None:
    if app not in st.ticking:
        st.ticking = st.ticking | {app}
        out.timers.append((_next_tick(st, now), "heartbeat", app))


def _heartbeat(st: RemoteControllerState, out: _Out, app: str, now: int) -> None:
    m = st.known_map.get(app)
    # a switching replica is not reported: if the switch notice was lost, C0
    # sees the bubble missing and takes it back
    active = tuple(b for b in st.hosted_for(app) if st.bubbles[(app, b)].phase == "active")
    out.send(st.sources[app], StatusHeartbeat(active, now, m.version if m else 0), app)
    out.timers.append((now + st.config.lease_ms - 1, "lease", app))


def _renew(st: RemoteControllerState, out: _Out, app: str, start: int) -> None:
    if start > st.last_c0_contact_at.get(app, -1):
        st.last_c0_contact_at[app] = start
        out.timers.append((start + st.config.lease_ms - 1, "lease", app))


def _destroy(st: RemoteControllerState, out: _Out, key, cause: str, now: int) -> None:
    rep = st.bubbles.pop(key)
    st.transfer_start.pop(key, None)
    _, msgs, tr = bub.self_destruct(rep, cause, now)
    out.messages.extend(msgs)
    out.trace.extend(tr)


def _adopt(st: RemoteControllerState, out: _Out, m: BubblesMap, now: int) -> None:
    app = m.app_id
    held = st.known_map.get(app)
    new = m if held is None else map_apply(held, m)
    if new is held:
        return
    st.known_map[app] = new
    out.note(ev(now, "adopt", app=app, node=st.node_id, v=new.version))
    for key in sorted(k for k in st.bubbles if k[0] == app):
        e = new.entry(key[1])
        if e is None or e.active_host != st.node_id or e.status == "completed":
            _destroy(st, out, key, "post_switch", now)
        else:
            st.bubbles[key] = bub.adopt_map(st.bubbles[key], new)


def _on_transfer(st, out, src, app, body: BubbleTransfer, now) -> None:
    key = (app, body.spec.bubble_id)
    st.sources[app] = src
    anchor = max(body.lease_start, st.last_c0_contact_at.get(app, -1))
    why = "claimed" if _claimed_against(st, app) else "lease_lapsed" if now >= anchor + st.config.lease_ms - 1 else ""
    if why and key not in st.bubbles:
        out.note(ev(now, "transfer_refused", app=app, bubble=key[1], node=st.node_id, why=why))
        out.send(src, PermissionReply(key[1], False, why), app)
        return
    st.transfer_start[key] = max(body.lease_start, st.transfer_start.get(key, -1))
    out.timers.append((body.lease_start + st.config.lease_ms - 1, "lease", app))
    if key in st.bubbles:
        out.note(ev(now, "duplicate_transfer", app=app, bubble=key[1], node=st.node_id))
        _adopt(st, out, body.map, now)
        return
    rep, pe = bub.spawn(app, body.spec, st.node_id, src, body.map, now, "transfer")
    st.bubbles[key] = rep
    out.note(pe)
    _adopt(st, out, body.map, now)
    if key in st.bubbles:
        # acknowledged by the next periodic heartbeat
        _arm(st, out, app, now)


def ci_handle(state: RemoteControllerState, inp, now: int) -> Step:
    st = state.clone()
    out = _Out(st.node_id)
    if isinstance(inp, Message):
        app, body = inp.app, inp.body
        out.app = app
        if isinstance(body, QualificationRequest):
            out.send(inp.src, QualificationReply(st.capabilities))
        elif isinstance(body, PermissionRequest):
            st.app_users[app] = (body.user, body.priority)
            if not body.requirements <= st.capabilities:
                out.send(inp.src, PermissionReply(body.bubble_id, False, "unqualified"))
            elif _claimed_against(st, app):
                out.send(inp.src, PermissionReply(body.bubble_id, False, "claimed"))
            else:
                out.send(inp.src, PermissionReply(body.bubble_id, True, "granted"))
        elif isinstance(body, BubbleTransfer):
            _on_transfer(st, out, inp.src, app, body, now)
        elif isinstance(body, MapUpdate):
            _adopt(st, out, body.map, now)
        elif isinstance(body, StatusHeartbeat):
            _renew(st, out, app, body.lease_start)
        elif isinstance(body, RetractCommand):
            key = (app, body.bubble_id)
            if key in st.bubbles:
                _destroy(st, out, key, "retract_command", now)
            else:
                out.note(ev(now, "retract_unknown", app=app, bubble=body.bubble_id, node=st.node_id))
            if app in st.sources:
                _heartbeat(st, out, app, now)
        elif isinstance(body, ContextInfo):
            for key in sorted(k for k in st.bubbles if k[0] == app):
                st.bubbles[key], tr = bub.on_context_change(st.bubbles[key], body.var, "pushed_by_c0", now)
                out.trace.extend(tr)
        elif isinstance(body, AppData):
            _receive_data(st.bubbles.get((app, body.bubble_id)), out, inp, now)
        else:
            out.note(ev(now, "protocol_error", app=app, node=inp.src, type=inp.type))
    elif isinstance(inp, Timer):
        app = inp.arg
        out.app = app
        if inp.tag == "heartbeat":
            if st.hosted_for(app):
                _heartbeat(st, out, app, now)
                out.timers.append((now + st.config.heartbeat_interval_ms, "heartbeat", app))
            else:
                st.ticking = st.ticking - {app}
        elif inp.tag == "lease":
            heard = st.last_c0_contact_at.get(app, -1)
            for key in sorted(k for k in st.bubbles if k[0] == app):
                anchor = max(heard, st.transfer_start.get(key, -1))
                if now >= anchor + st.config.lease_ms - 1:
                    out.note(ev(now, "lease_expired", app=app, node=st.node_id, bubble=key[1], last=anchor))
                    _destroy(st, out, key, "lease_expired", now)
    elif isinstance(inp, Preempt):
        key = (inp.app, inp.bubble_id)
        rep = st.bubbles.get(key)
        if rep is not None and rep.phase == "active":
            out.app = inp.app
            rep, target, proposed, tr = bub.switch_node(rep, "preempted", None, now)
            st.bubbles[key] = rep
            out.trace.extend(tr)
            out.send(st.sources[inp.app], SwitchNotice(inp.bubble_id, st.node_id, target, proposed))
    elif isinstance(inp, ClaimUpdate):
        st.claim = inp.claim
    elif isinstance(inp, ContextChange):
        for key in sorted(k for k in st.bubbles if k[0] == inp.app):
            st.bubbles[key], tr = bub.on_context_change(st.bubbles[key], inp.var, "self_detected", now)
            out.trace.extend(tr)
    elif isinstance(inp, Complete):
        key = (inp.app, inp.bubble_id)
        if key in st.bubbles:
            _destroy(st, out, key, "task_done", now)
    elif isinstance(inp, PeerSend):
        out.app = inp.app
        _peer_send(st.bubbles.get((inp.app, inp.from_bubble)), out, inp, now)
    else:
        raise TypeError(f"unsupported input {inp!r}")
    return out.step(st)


def ci_crash(state: RemoteControllerState, now: int) -> Step:
    """Node failure: every replica dies and the controller restarts empty."""
    out = _Out(state.node_id)
    for key in sorted(state.bubbles):
        rep = state.bubbles[key]
        out.note(bub.phase_event(rep, "destroyed", now, "crash"))
    fresh = RemoteControllerState(state.node_id, state.capabilities, state.config,
                                  state.heartbeat_phase_ms)
    return out.step(fresh)
