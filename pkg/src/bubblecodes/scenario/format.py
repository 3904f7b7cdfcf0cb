"""The ``.scn`` scenario format: declarations, then timestamped events.

One declaration or event per line, ``#`` starts a comment. See
docs/scenario.md for the grammar.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from ..model import LISTEN_MODES, AppManifest, BubbleSpec, ModelError, NodeProfile, capability_set, check_id

EVENT_ARITY = {
    "move": ("device", "zone"),
    "fail": ("node",),
    "recover": ("node",),
    "claim": ("user", "node", "priority"),
    "release": ("user", "node"),
    "context": ("app", "key", "value"),
    "complete": ("app", "bubble"),
    "retract": ("app", "bubble"),
    "send": ("app", "bubble", "bubble", "payload"),
}
_TOKEN = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*\Z")
_INT = re.compile(r"-?[0-9]+\Z")


class ScenarioError(Exception):
    def __init__(self, code: str, line: int = 0, detail: str = ""):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{code}" + (f" ({detail})" if detail else ""))
        self.code = code
        self.line = line
        self.detail = detail


@dataclass(frozen=True)
class DeviceDecl:
    device_id: str
    zone: str
    user: str
    priority: int


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    kind: str
    args: tuple[str, ...]
    via_c0: bool = False

    def line(self) -> str:
        tail = " via=c0" if self.via_c0 else ""
        return f"at {self.at} {self.kind} {' '.join(self.args)}{tail}"


@dataclass
class ScenarioFile:
    zones: list[str] = field(default_factory=list)
    nodes: dict[str, NodeProfile] = field(default_factory=dict)
    devices: dict[str, DeviceDecl] = field(default_factory=dict)
    apps: dict[str, AppManifest] = field(default_factory=dict)
    events: list[ScenarioEvent] = field(default_factory=list)

    def app_user(self, app_id: str) -> DeviceDecl:
        return self.devices[self.apps[app_id].source_device]

    @property
    def max_latency(self) -> int:
        return max((n.link_latency_ms for n in self.nodes.values()), default=0)

    def digest(self) -> str:
        return hashlib.sha256(format_scenario(self).encode()).hexdigest()[:16]


def format_scenario(sc: ScenarioFile) -> str:
    out = [f"zone {z}" for z in sc.zones]
    for n in sc.nodes.values():
        out.append(f"node {n.node_id} zone={n.zone_id} caps={','.join(sorted(n.capabilities))} "
                   f"latency={n.link_latency_ms}")
    for d in sc.devices.values():
        out.append(f"device {d.device_id} zone={d.zone} user={d.user} priority={d.priority}")
    for a in sc.apps.values():
        out.append(f"app {a.app_id} device={a.source_device}")
        for b in a.bubbles:
            line = f"bubble {a.app_id} {b.bubble_id} requires={','.join(sorted(b.requirements))} listen={b.listen_mode}"
            if b.payload_tag:
                line += f" payload={b.payload_tag}"
            out.append(line)
    out.extend(e.line() for e in sc.events)
    return "\n".join(out) + "\n"


class _Parser:
    def __init__(self) -> None:
        self.sc = ScenarioFile()
        self.bubbles: dict[str, list[BubbleSpec]] = {}
        self.app_devices: dict[str, str] = {}
        self.lineno = 0
        self.last_at = 0
        self.in_events = False

    def fail(self, code: str, detail: str = ""):
        raise ScenarioError(code, self.lineno, detail)

    def token(self, s: str) -> str:
        if not _TOKEN.match(s):
            self.fail("bad_token", s)
        return s

    def integer(self, s: str, minimum: int | None = None) -> int:
        if not _INT.match(s):
            self.fail("bad_value", s)
        v = int(s)
        if minimum is not None and v < minimum:
            self.fail("bad_value", s)
        return v

    def options(self, parts: list[str], required: tuple[str, ...], optional: tuple[str, ...] = ()) -> dict:
        opts = {}
        for p in parts:
            k, sep, v = p.partition("=")
            if not sep or k not in required + optional or k in opts:
                self.fail("bad_syntax", p)
            opts[k] = v
        for k in required:
            if k not in opts:
                self.fail("bad_syntax", f"missing {k}=")
        return opts

    def new_id(self, name: str, taken) -> str:
        self.token(name)
        if name in taken:
            self.fail("duplicate_id", name)
        return name

    def known(self, name: str, pool, what: str) -> str:
        if name not in pool:
            self.fail("undeclared_id", f"{what} {name}")
        return name

    def caps(self, s: str):
        try:
            return capability_set(t for t in s.split(",") if t)
        except ModelError as e:
            self.fail("bad_value", str(e))

    def declaration(self, kw: str, parts: list[str]) -> None:
        sc = self.sc
        if self.in_events:
            self.fail("declaration_after_event", kw)
        addresses = set(sc.nodes) | set(sc.devices)
        if kw == "zone":
            if len(parts) != 1:
                self.fail("bad_syntax")
            sc.zones.append(self.new_id(parts[0], sc.zones))
        elif kw == "node":
            if not parts:
                self.fail("bad_syntax")
            nid = self.new_id(parts[0], addresses)
            o = self.options(parts[1:], ("zone", "caps", "latency"))
            self.known(o["zone"], sc.zones, "zone")
            sc.nodes[nid] = NodeProfile(nid, o["zone"], self.caps(o["caps"]),
                                        self.integer(o["latency"], 0))
        elif kw == "device":
            if not parts:
                self.fail("bad_syntax")
            did = self.new_id(parts[0], addresses)
            o = self.options(parts[1:], ("zone", "user", "priority"))
            self.known(o["zone"], sc.zones, "zone")
            sc.devices[did] = DeviceDecl(did, o["zone"], self.token(o["user"]), self.integer(o["priority"]))
        elif kw == "app":
            if not parts:
                self.fail("bad_syntax")
            aid = self.new_id(parts[0], self.app_devices)
            o = self.options(parts[1:], ("device",))
            self.app_devices[aid] = self.known(o["device"], sc.devices, "device")
            self.bubbles[aid] = []
        elif kw == "bubble":
            if len(parts) < 2:
                self.fail("bad_syntax")
            aid = self.known(parts[0], self.app_devices, "app")
            bid = self.new_id(parts[1], [b.bubble_id for b in self.bubbles[aid]])
            o = self.options(parts[2:], ("requires",), ("listen", "payload"))
            listen = o.get("listen", "hybrid")
            if listen not in LISTEN_MODES:
                self.fail("bad_value", listen)
            payload = o.get("payload", "")
            if payload:
                self.token(payload)
            reqs = self.caps(o["requires"])
            if not reqs:
                self.fail("bad_value", "empty requirements")
            self.bubbles[aid].append(BubbleSpec(bid, reqs, payload, listen))
        else:
            self.fail("unknown_keyword", kw)

    def event(self, parts: list[str]) -> None:
        sc = self.sc
        self.in_events = True
        if len(parts) < 2:
            self.fail("bad_syntax")
        at = self.integer(parts[0], 0)
        if at < self.last_at:
            self.fail("decreasing_timestamp", parts[0])
        self.last_at = at
        kind, args = parts[1], parts[2:]
        if kind not in EVENT_ARITY:
            self.fail("unknown_keyword", kind)
        via_c0 = False
        if kind == "complete" and args and args[-1].startswith("via="):
            if args[-1] != "via=c0":
                self.fail("bad_value", args[-1])
            via_c0, args = True, args[:-1]
        roles = EVENT_ARITY[kind]
        if len(args) != len(roles):
            self.fail("bad_syntax", f"{kind} takes {len(roles)} arguments")
        app = None
        for role, a in zip(roles, args):
            if role == "priority":
                self.integer(a)
                continue
            self.token(a)
            if role == "device":
                self.known(a, sc.devices, "device")
            elif role == "zone":
                self.known(a, sc.zones, "zone")
            elif role == "node":
                self.known(a, sc.nodes, "node")
            elif role == "app":
                app = self.known(a, sc.apps, "app")
            elif role == "bubble":
                self.known(a, sc.apps[app].bubble_ids, "bubble")
        sc.events.append(ScenarioEvent(at, kind, tuple(args), via_c0))

    def finish_declarations(self) -> None:
        if self.sc.apps or not self.app_devices:
            return
        for aid, dev in self.app_devices.items():
            if not self.bubbles[aid]:
                self.fail("app_without_bubbles", aid)
            self.sc.apps[aid] = AppManifest(aid, dev, tuple(self.bubbles[aid]))

    def parse(self, text: str) -> ScenarioFile:
        for self.lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "at":
                if not self.in_events:
                    self.finish_declarations()
                self.event(parts[1:])
            else:
                self.declaration(parts[0], parts[1:])
        self.lineno = 0
        if not self.in_events:
            self.finish_declarations()
        if not self.sc.apps:
            raise ScenarioError("no_app_declared")
        return self.sc


def parse_scenario(text: str) -> ScenarioFile:
    """Parse scenario text; raises ``ScenarioError`` carrying the line number."""
    try:
        return _Parser().parse(text)
    except ModelError as e:
        raise ScenarioError("bad_value", 0, str(e)) from None
