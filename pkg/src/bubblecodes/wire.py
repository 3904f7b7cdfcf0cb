"""Canonical XML codec for protocol messages.

Every message is one ``<msg>`` root with a fixed attribute order and a
single payload child. Encoding is canonical: equal messages produce
byte-identical documents, so encoded messages can be compared and hashed
directly. The element/attribute vocabulary is documented in docs/wire.md.
"""

from __future__ import annotations

import base64
import binascii
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Callable, ClassVar, Union

from .model import (
    BubbleSpec,
    BubblesMap,
    ContextVariable,
    MapEntry,
    ModelError,
    UnusedNode,
    capability_set,
)

PROTOCOL_VERSION = "1"
RETRACT_CAUSES = ("c0_order", "task_done", "node_lost", "preempted")

_INT_RE = re.compile(r"(0|[1-9][0-9]*)\Z")
_SIGNED_RE = re.compile(r"(0|-?[1-9][0-9]*)\Z")
# XML 1.0 Char production; anything else cannot travel in a document
_BAD_XML_CHAR = re.compile("[^\t\n\r\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]")


class WireError(Exception):
    """Decoding failure; ``code`` is one of the names in ``ERROR_CODES``."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


ERROR_CODES = ("malformed_xml", "unknown_type", "missing_field", "bad_version")


# -- payload variants ---------------------------------------------------------


@dataclass(frozen=True)
class MapUpdate:
    kind: ClassVar[str] = "bubbles_map"
    map: BubblesMap


@dataclass(frozen=True)
class ContextInfo:
    kind: ClassVar[str] = "context_info"
    var: ContextVariable


@dataclass(frozen=True)
class AppData:
    kind: ClassVar[str] = "app_data"
    bubble_id: str
    payload: bytes = b""


@dataclass(frozen=True)
class PermissionRequest:
    kind: ClassVar[str] = "permission_request"
    bubble_id: str
    requirements: frozenset[str]
    user: str = ""
    priority: int = 0


@dataclass(frozen=True)
class PermissionReply:
    kind: ClassVar[str] = "permission_reply"
    bubble_id: str
    granted: bool
    reason: str = ""


@dataclass(frozen=True)
class QualificationRequest:
    kind: ClassVar[str] = "qualification_request"
    requirements: frozenset[str]


@dataclass(frozen=True)
class QualificationReply:
    kind: ClassVar[str] = "qualification_reply"
    capabilities: frozenset[str]


@dataclass(frozen=True)
class TaskCompletion:
    kind: ClassVar[str] = "task_completion"
    bubble_id: str


@dataclass(frozen=True)
class BubbleTransfer:
    kind: ClassVar[str] = "bubble_transfer"
    spec: BubbleSpec
    map: BubblesMap
    lease_start: int = 0


@dataclass(frozen=True)
class RetractCommand:
    kind: ClassVar[str] = "retract_command"
    bubble_id: str
    cause: str


@dataclass(frozen=True)
class StatusHeartbeat:
    """Liveness report. ``lease_start`` is the sender's send time on the way
    to the source controller and the echoed value on the way back."""

    kind: ClassVar[str] = "status_heartbeat"
    hosted_bubbles: tuple[str, ...] = ()
    lease_start: int = 0
    map_version: int = 0


@dataclass(frozen=True)
class SwitchNotice:
    kind: ClassVar[str] = "switch_notice"
    bubble_id: str
    from_node: str
    to_node: str
    proposed_map: BubblesMap


Payload = Union[
    MapUpdate,
    ContextInfo,
    AppData,
    PermissionRequest,
    PermissionReply,
    QualificationRequest,
    QualificationReply,
    TaskCompletion,
    BubbleTransfer,
    RetractCommand,
    StatusHeartbeat,
    SwitchNotice,
]

PAYLOAD_TYPES: dict[str, type] = {
    cls.kind: cls
    for cls in (
        MapUpdate,
        ContextInfo,
        AppData,
        PermissionRequest,
        PermissionReply,
        QualificationRequest,
        QualificationReply,
        TaskCompletion,
        BubbleTransfer,
        RetractCommand,
        StatusHeartbeat,
        SwitchNotice,
    )
}
MESSAGE_TYPES = tuple(PAYLOAD_TYPES)


@dataclass(frozen=True)
class Message:
    seq: int
    src: str
    dst: str
    app: str
    body: Payload

    @property
    def type(self) -> str:
        return self.body.kind


# -- encoding -----------------------------------------------------------------


def _check_text(s: str) -> str:
    if _BAD_XML_CHAR.search(s):
        raise ValueError(f"text not representable in XML: {s!r}")
    return s


def _attr(s: str) -> str:
    return (
        _check_text(str(s))
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\t", "&#9;")
        .replace("\n", "&#10;")
        .replace("\r", "&#13;")
    )


def _text(s: str) -> str:
    return (
        _check_text(s)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace("\r", "&#13;")
    )


def _el(tag: str, attrs: list[tuple[str, object]], inner: str = "") -> str:
    head = tag + "".join(f' {k}="{_attr(str(v))}"' for k, v in attrs)
    if inner:
        return f"<{head}>{inner}</{tag}>"
    return f"<{head}/>"


def _caps(caps) -> str:
    return ",".join(sorted(caps))


def _bool(b: bool) -> str:
    return "true" if b else "false"


def _map_xml(m: BubblesMap) -> str:
    inner = "".join(
        _el("entry", [("bubble", e.bubble_id), ("host", e.active_host), ("status", e.status)])
        for e in m.entries
    ) + "".join(
        _el("unused", [("node", u.node_id), ("caps", _caps(u.capabilities)), ("latency", u.link_latency_ms)])
        for u in m.unused_nodes
    )
    return _el("map", [("app", m.app_id), ("version", m.version)], inner)


def _body_xml(body: Payload) -> str:
    if isinstance(body, MapUpdate):
        return _map_xml(body.map)
    if isinstance(body, ContextInfo):
        v = body.var
        return _el("ctx", [("key", v.key), ("version", v.ctx_version)], _text(v.value))
    if isinstance(body, AppData):
        return _el("data", [("bubble", body.bubble_id)], base64.b64encode(body.payload).decode("ascii"))
    if isinstance(body, PermissionRequest):
        return _el(
            "permission",
            [("bubble", body.bubble_id), ("requires", _caps(body.requirements)),
             ("user", body.user), ("priority", body.priority)],
        )
    if isinstance(body, PermissionReply):
        return _el(
            "permission-reply",
            [("bubble", body.bubble_id), ("granted", _bool(body.granted)), ("reason", body.reason)],
        )
    if isinstance(body, QualificationRequest):
        return _el("qualification", [("requires", _caps(body.requirements))])
    if isinstance(body, QualificationReply):
        return _el("qualification-reply", [("caps", _caps(body.capabilities))])
    if isinstance(body, TaskCompletion):
        return _el("bubble", [("id", body.bubble_id)])
    if isinstance(body, BubbleTransfer):
        s = body.spec
        spec = _el(
            "spec",
            [("bubble", s.bubble_id), ("requires", _caps(s.requirements)),
             ("payload", s.payload_tag), ("listen", s.listen_mode)],
        )
        return _el("transfer", [("lease-start", body.lease_start)], spec + _map_xml(body.map))
    if isinstance(body, RetractCommand):
        return _el("retract", [("bubble", body.bubble_id), ("cause", body.cause)])
    if isinstance(body, StatusHeartbeat):
        inner = "".join(_el("hosted", [("bubble", b)]) for b in body.hosted_bubbles)
        return _el(
            "heartbeat", [("lease-start", body.lease_start), ("map-version", body.map_version)], inner
        )
    if isinstance(body, SwitchNotice):
        return _el(
            "switch",
            [("bubble", body.bubble_id), ("from", body.from_node), ("to", body.to_node)],
            _map_xml(body.proposed_map),
        )
    raise TypeError(f"not a message payload: {body!r}")


def encode(msg: Message) -> bytes:
    root = [
        ("v", PROTOCOL_VERSION),
        ("type", msg.type),
        ("seq", msg.seq),
        ("from", msg.src),
        ("to", msg.dst),
        ("app", msg.app),
    ]
    return _el("msg", root, _body_xml(msg.body)).encode("utf-8")


# -- decoding -----------------------------------------------------------------


def _req(el: ET.Element, name: str) -> str:
    v = el.get(name)
    if v is None:
        raise WireError("missing_field", f"<{el.tag}> lacks {name}")
    return v


def _int(el: ET.Element, name: str, signed: bool = False) -> int:
    v = _req(el, name)
    if not (_SIGNED_RE if signed else _INT_RE).match(v):
        raise WireError("missing_field", f"<{el.tag}> {name}={v!r} is not an integer")
    return int(v)


def _capset(el: ET.Element, name: str) -> frozenset[str]:
    v = _req(el, name)
    try:
        return capability_set(t for t in v.split(",") if t) if v else frozenset()
    except ModelError as e:
        raise WireError("missing_field", str(e)) from None


def _boolean(el: ET.Element, name: str) -> bool:
    v = _req(el, name)
    if v not in ("true", "false"):
        raise WireError("missing_field", f"<{el.tag}> {name}={v!r} is not a boolean")
    return v == "true"


def _child(el: ET.Element, tag: str) -> ET.Element:
    c = el.find(tag)
    if c is None:
        raise WireError("missing_field", f"<{el.tag}> lacks <{tag}>")
    return c


def _parse_map(el: ET.Element) -> BubblesMap:
    entries = []
    for e in el.findall("entry"):
        status = _req(e, "status")
        try:
            entries.append(MapEntry(_req(e, "bubble"), _req(e, "host"), status))
        except ModelError as err:
            raise WireError("missing_field", str(err)) from None
    unused = tuple(
        UnusedNode(_req(u, "node"), _capset(u, "caps"), _int(u, "latency"))
        for u in el.findall("unused")
    )
    return BubblesMap(_req(el, "app"), _int(el, "version"), tuple(entries), unused)


def _only_child(root: ET.Element) -> ET.Element:
    kids = list(root)
    if len(kids) != 1:
        raise WireError("missing_field", f"expected one payload element, found {len(kids)}")
    return kids[0]


def _expect(el: ET.Element, tag: str) -> ET.Element:
    if el.tag != tag:
        raise WireError("missing_field", f"expected <{tag}>, found <{el.tag}>")
    return el


def _dec_map(p):
    return MapUpdate(_parse_map(_expect(p, "map")))


def _dec_ctx(p):
    _expect(p, "ctx")
    return ContextInfo(ContextVariable(_req(p, "key"), p.text or "", _int(p, "version")))


def _dec_data(p):
    _expect(p, "data")
    try:
        payload = base64.b64decode(p.text or "", validate=True)
    except (binascii.Error, ValueError):
        raise WireError("missing_field", "app payload is not base64") from None
    return AppData(_req(p, "bubble"), payload)


def _dec_perm(p):
    _expect(p, "permission")
    return PermissionRequest(
        _req(p, "bubble"), _capset(p, "requires"), _req(p, "user"), _int(p, "priority", signed=True)
    )


def _dec_perm_reply(p):
    _expect(p, "permission-reply")
    return PermissionReply(_req(p, "bubble"), _boolean(p, "granted"), _req(p, "reason"))


def _dec_qual(p):
    return QualificationRequest(_capset(_expect(p, "qualification"), "requires"))


def _dec_qual_reply(p):
    return QualificationReply(_capset(_expect(p, "qualification-reply"), "caps"))


def _dec_completion(p):
    return TaskCompletion(_req(_expect(p, "bubble"), "id"))


def _dec_transfer(p):
    _expect(p, "transfer")
    s = _child(p, "spec")
    try:
        spec = BubbleSpec(_req(s, "bubble"), _capset(s, "requires"), _req(s, "payload"), _req(s, "listen"))
    except ModelError as err:
        raise WireError("missing_field", str(err)) from None
    return BubbleTransfer(spec, _parse_map(_child(p, "map")), _int(p, "lease-start"))


def _dec_retract(p):
    _expect(p, "retract")
    cause = _req(p, "cause")
    if cause not in RETRACT_CAUSES:
        raise WireError("missing_field", f"unknown retract cause {cause!r}")
    return RetractCommand(_req(p, "bubble"), cause)


def _dec_heartbeat(p):
    _expect(p, "heartbeat")
    hosted = tuple(_req(h, "bubble") for h in p.findall("hosted"))
    return StatusHeartbeat(hosted, _int(p, "lease-start"), _int(p, "map-version"))


def _dec_switch(p):
    _expect(p, "switch")
    return SwitchNotice(
        _req(p, "bubble"), _req(p, "from"), _req(p, "to"), _parse_map(_child(p, "map"))
    )


_DECODERS: dict[str, Callable[[ET.Element], Payload]] = {
    "bubbles_map": _dec_map,
    "context_info": _dec_ctx,
    "app_data": _dec_data,
    "permission_request": _dec_perm,
    "permission_reply": _dec_perm_reply,
    "qualification_request": _dec_qual,
    "qualification_reply": _dec_qual_reply,
    "task_completion": _dec_completion,
    "bubble_transfer": _dec_transfer,
    "retract_command": _dec_retract,
    "status_heartbeat": _dec_heartbeat,
    "switch_notice": _dec_switch,
}


def decode(data: bytes | str) -> Message:
    """Parse one document; raises ``WireError`` on any defect."""
    try:
        root = ET.fromstring(data)
    except Exception as e:  # expat, encoding and type errors alike
        raise WireError("malformed_xml", str(e)) from None
    if root.tag != "msg":
        raise WireError("malformed_xml", f"root element is <{root.tag}>")
    version = root.get("v")
    if version is None:
        raise WireError("missing_field", "<msg> lacks v")
    if version != PROTOCOL_VERSION:
        raise WireError("bad_version", version)
    kind = _req(root, "type")
    decoder = _DECODERS.get(kind)
    if decoder is None:
        raise WireError("unknown_type", kind)
    header = (_int(root, "seq"), _req(root, "from"), _req(root, "to"), _req(root, "app"))
    body = decoder(_only_child(root))
    return Message(*header, body)
