"""Domain types and placement rules shared by every other module.

All types here are immutable values. Capability sets are ``frozenset``s of
lowercase tags; ids are plain strings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

CANONICAL_CAPABILITIES = ("display", "audio", "input", "compute")
LISTEN_MODES = ("push", "pull", "hybrid")
ENTRY_STATUSES = ("active", "retracting", "completed")

_CAP_RE = re.compile(r"[a-z][a-z0-9_]*\Z")
_ID_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*\Z")


class ModelError(ValueError):
    """An invalid domain value or an illegal map operation."""


def check_capability(tag: str) -> str:
    if not isinstance(tag, str) or not _CAP_RE.match(tag):
        raise ModelError(f"bad capability tag {tag!r}")
    return tag


def capability_set(tags: Iterable[str]) -> frozenset[str]:
    return frozenset(check_capability(t) for t in tags)


def check_id(name: str) -> str:
    if not isinstance(name, str) or not _ID_RE.match(name):
        raise ModelError(f"bad identifier {name!r}")
    return name


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    zone_id: str
    capabilities: frozenset[str]
    link_latency_ms: int

    def __post_init__(self) -> None:
        check_id(self.node_id)
        check_id(self.zone_id)
        object.__setattr__(self, "capabilities", capability_set(self.capabilities))
        if self.link_latency_ms < 0:
            raise ModelError(f"negative latency for {self.node_id}")


@dataclass(frozen=True)
class UserClaim:
    user_id: str
    node_id: str
    priority: int

    def overrides(self, incumbent: UserClaim | None) -> bool:
        """A new claim wins only with strictly higher priority."""
        return incumbent is None or self.priority > incumbent.priority


@dataclass(frozen=True)
class BubbleSpec:
    bubble_id: str
    requirements: frozenset[str]
    payload_tag: str = ""
    listen_mode: str = "hybrid"

    def __post_init__(self) -> None:
        check_id(self.bubble_id)
        reqs = capability_set(self.requirements)
        if not reqs:
            raise ModelError(f"bubble {self.bubble_id} declares no requirements")
        object.__setattr__(self, "requirements", reqs)
        if self.listen_mode not in LISTEN_MODES:
            raise ModelError(f"bad listen mode {self.listen_mode!r}")


@dataclass(frozen=True)
class AppManifest:
    app_id: str
    source_device: str
    bubbles: tuple[BubbleSpec, ...]

    def __post_init__(self) -> None:
        check_id(self.app_id)
        check_id(self.source_device)
        object.__setattr__(self, "bubbles", tuple(self.bubbles))
        if not self.bubbles:
            raise ModelError(f"app {self.app_id} has no bubbles")
        ids = [b.bubble_id for b in self.bubbles]
        if len(set(ids)) != len(ids):
            raise ModelError(f"duplicate bubble id in app {self.app_id}")

    @property
    def bubble_ids(self) -> tuple[str, ...]:
        return tuple(b.bubble_id for b in self.bubbles)

    def spec(self, bubble_id: str) -> BubbleSpec:
        for b in self.bubbles:
            if b.bubble_id == bubble_id:
                return b
        raise KeyError(bubble_id)


@dataclass(frozen=True)
class MapEntry:
    bubble_id: str
    active_host: str
    status: str = "active"

    def __post_init__(self) -> None:
        if self.status not in ENTRY_STATUSES:
            raise ModelError(f"bad entry status {self.status!r}")


@dataclass(frozen=True)
class UnusedNode:
    node_id: str
    capabilities: frozenset[str]
    link_latency_ms: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "capabilities", capability_set(self.capabilities))


@dataclass(frozen=True)
class BubblesMap:
    """Versioned bubble -> host registry plus the available-but-unused nodes."""

    app_id: str
    version: int
    entries: tuple[MapEntry, ...]
    unused_nodes: tuple[UnusedNode, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "unused_nodes", tuple(self.unused_nodes))
        if self.version < 0:
            raise ModelError("negative map version")

    @classmethod
    def initial(cls, app: AppManifest) -> BubblesMap:
        entries = tuple(MapEntry(b, app.source_device) for b in app.bubble_ids)
        return cls(app.app_id, 0, entries)

    def entry(self, bubble_id: str) -> MapEntry | None:
        for e in self.entries:
            if e.bubble_id == bubble_id:
                return e
        return None

    def host_of(self, bubble_id: str) -> str | None:
        e = self.entry(bubble_id)
        return None if e is None else e.active_host

    def hosts(self, exclude: str | None = None) -> set[str]:
        return {e.active_host for e in self.entries if e.active_host != exclude}

    def with_entry(self, bubble_id: str, **changes) -> BubblesMap:
        entries = tuple(
            replace(e, **changes) if e.bubble_id == bubble_id else e for e in self.entries
        )
        return replace(self, entries=entries)

    def with_version(self, version: int) -> BubblesMap:
        return replace(self, version=version)

    def same_content(self, other: BubblesMap) -> bool:
        return self.entries == other.entries and self.unused_nodes == other.unused_nodes


@dataclass(frozen=True)
class ContextVariable:
    key: str
    value: str
    ctx_version: int = field(default=0)


@dataclass(frozen=True)
class Candidate:
    node_id: str
    capabilities: frozenset[str]
    latency_ms: int
    permitted: bool = True


def qualifies(node_caps: Iterable[str], requirements: Iterable[str]) -> bool:
    return set(requirements) <= set(node_caps)


def select_host(
    requirements: Iterable[str], candidates: Sequence[Candidate | tuple], source: str
) -> str:
    """Pick the permitted, qualifying candidate with the lowest latency.

    Ties go to the lexicographically smallest node id; with no feasible
    candidate the bubble stays on ``source``. Candidates may be given as
    ``Candidate`` objects or ``(node_id, caps, latency, permitted)`` tuples.
    """
    reqs = set(requirements)
    best: tuple[int, str] | None = None
    for c in candidates:
        if not isinstance(c, Candidate):
            c = Candidate(c[0], frozenset(c[1]), c[2], c[3])
        if not c.permitted or not reqs <= c.capabilities:
            continue
        key = (c.latency_ms, c.node_id)
        if best is None or key < best:
            best = key
    return source if best is None else best[1]


def map_apply(current: BubblesMap, update: BubblesMap) -> BubblesMap:
    """Last-writer-wins on controller-sequenced versions."""
    if current.app_id != update.app_id:
        raise ModelError(f"map for app {update.app_id!r} applied to {current.app_id!r}")
    return update if update.version > current.version else current
