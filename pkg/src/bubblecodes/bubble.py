"""Bubble replica state machine.

A replica lives either on the app's source device (phases ``dormant`` and
``active`` only, never destroyed) or on a remote node, where it is created
``active`` by a transfer and ends ``destroyed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .model import BubbleSpec, BubblesMap, Candidate, ContextVariable, select_host
from .trace import TraceEvent, ev
from .wire import AppData, Message, TaskCompletion

PHASES = ("dormant", "active", "switching", "destroyed")
# "none" marks replica creation
ALLOWED_EDGES = frozenset(
    {
        ("none", "active"),
        ("active", "dormant"),
        ("dormant", "active"),
        ("active", "switching"),
        ("switching", "active"),
        ("active", "destroyed"),
        ("switching", "destroyed"),
    }
)
CONTEXT_ORIGINS = ("pushed_by_c0", "self_detected")
DESTRUCT_CAUSES = ("task_done", "retract_command", "lease_expired", "post_switch", "crash")

_MODE_ACCEPTS = {
    "push": {"pushed_by_c0"},
    "pull": {"self_detected"},
    "hybrid": {"pushed_by_c0", "self_detected"},
}


class BubbleError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class BubbleState:
    app_id: str
    spec: BubbleSpec
    host: str
    source: str
    phase: str
    known_map: BubblesMap
    ctx_snapshot: dict[str, tuple[str, int]] = field(default_factory=dict)

    @property
    def bubble_id(self) -> str:
        return self.spec.bubble_id

    @property
    def listen_mode(self) -> str:
        return self.spec.listen_mode

    @property
    def on_source(self) -> bool:
        return self.host == self.source


def phase_event(state: BubbleState, new: str, now: int, cause: str, old: str | None = None) -> TraceEvent:
    return ev(
        now, "phase", app=state.app_id, bubble=state.bubble_id, node=state.host,
        old=old or state.phase, new=new, cause=cause,
    )


def set_phase(state: BubbleState, new: str, now: int, cause: str) -> tuple[BubbleState, TraceEvent]:
    if (state.phase, new) not in ALLOWED_EDGES:
        raise BubbleError("illegal_phase", f"{state.phase}->{new}")
    if new == "dormant" and not state.on_source:
        raise BubbleError("illegal_phase", "dormant replica off the source device")
    return replace(state, phase=new), phase_event(state, new, now, cause)


def spawn(app_id: str, spec: BubbleSpec, host: str, source: str, known_map: BubblesMap,
          now: int, cause: str) -> tuple[BubbleState, TraceEvent]:
    """Create a replica already in the active phase."""
    state = BubbleState(app_id, spec, host, source, "active", known_map)
    return state, phase_event(state, "active", now, cause, old="none")


def on_context_change(
    state: BubbleState, var: ContextVariable, origin: str, now: int = 0
) -> tuple[BubbleState, list[TraceEvent]]:
    if state.phase != "active":
        return state, [ev(now, "ctx_to_inactive", app=state.app_id, bubble=state.bubble_id,
                          node=state.host, key=var.key)]
    if origin not in _MODE_ACCEPTS[state.listen_mode]:
        return state, [ev(now, "ctx_ignored", app=state.app_id, bubble=state.bubble_id,
                          node=state.host, key=var.key, mode=state.listen_mode, origin=origin)]
    held = state.ctx_snapshot.get(var.key)
    if held is not None and held[1] >= var.ctx_version:
        return state, []
    snapshot = dict(state.ctx_snapshot)
    snapshot[var.key] = (var.value, var.ctx_version)
    adapted = ev(now, "adapted", app=state.app_id, bubble=state.bubble_id, node=state.host,
                 key=var.key, version=var.ctx_version, origin=origin)
    return replace(state, ctx_snapshot=snapshot), [adapted]


def switch_node(
    state: BubbleState, reason: str, recommendation: str | None = None, now: int = 0
) -> tuple[BubbleState, str, BubblesMap, list[TraceEvent]]:
    """Leave the current host: pick a target from the map's unused nodes.

    Returns the replica (now ``switching``), the chosen target and the
    proposed map. The proposal keeps the current version; the source
    controller assigns the next one.
    """
    if state.phase != "active" or state.on_source:
        raise BubbleError("not_switchable", f"{state.bubble_id} is {state.phase} on {state.host}")
    unused = state.known_map.unused_nodes
    reqs = state.spec.requirements
    target = None
    if recommendation is not None:
        for u in unused:
            if u.node_id == recommendation and reqs <= u.capabilities:
                target = recommendation
    if target is None:
        target = select_host(
            reqs,
            [Candidate(u.node_id, u.capabilities, u.link_latency_ms) for u in unused
             if u.node_id != state.host],
            state.source,
        )
    proposed = state.known_map.with_entry(state.bubble_id, active_host=target, status="active")
    proposed = replace(
        proposed, unused_nodes=tuple(u for u in unused if u.node_id != target)
    )
    new_state, pe = set_phase(state, "switching", now, reason)
    notice = ev(now, "switch", app=state.app_id, bubble=state.bubble_id,
                old=state.host, new=target, reason=reason)
    return new_state, target, proposed, [pe, notice]


def peer_send(state: BubbleState, peer_bubble_id: str, payload: bytes) -> Message:
    """Address app data to the peer's host as recorded in the local map copy."""
    if state.phase != "active":
        raise BubbleError("not_active", state.bubble_id)
    entry = state.known_map.entry(peer_bubble_id)
    if entry is None or entry.status == "completed":
        raise BubbleError("unknown_peer", peer_bubble_id)
    return Message(0, state.host, entry.active_host, state.app_id, AppData(peer_bubble_id, payload))


def self_destruct(
    state: BubbleState, cause: str, now: int = 0
) -> tuple[BubbleState, list[Message], list[TraceEvent]]:
    if state.on_source:
        return state, [], [ev(now, "illegal_destruct", app=state.app_id,
                              bubble=state.bubble_id, node=state.host, cause=cause)]
    if state.phase not in ("active", "switching"):
        raise BubbleError("not_destructible", f"{state.bubble_id} is {state.phase}")
    new_state, pe = set_phase(state, "destroyed", now, cause)
    msgs = []
    if cause == "task_done":
        msgs.append(Message(0, state.host, state.source, state.app_id, TaskCompletion(state.bubble_id)))
    return new_state, msgs, [pe]


def adopt_map(state: BubbleState, m: BubblesMap) -> BubbleState:
    if m.version > state.known_map.version:
        return replace(state, known_map=m)
    return state

