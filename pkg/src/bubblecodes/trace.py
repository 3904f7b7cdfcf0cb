"""Trace records: one ``<at> <kind> key=value ...`` line per event."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    at: int
    kind: str
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> str:
        v = self.get(key)
        if v is None:
            raise KeyError(key)
        return v

    def line(self) -> str:
        parts = [str(self.at), self.kind]
        for k, v in self.fields:
            if not v.isprintable() or " " in v:
                raise TraceFormatError(f"unprintable trace value {v!r}")
            parts.append(f"{k}={v}")
        return " ".join(parts)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, (list, tuple, set, frozenset)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        return ",".join(str(x) for x in items)
    return str(v)


def ev(at: int, kind: str, **fields) -> TraceEvent:
    """Build an event; keyword order is the line's field order."""
    return TraceEvent(at, kind, tuple((k, _fmt(v)) for k, v in fields.items()))


def parse_line(line: str) -> TraceEvent:
    parts = line.split(" ")
    if len(parts) < 2 or not parts[0].isdigit():
        raise TraceFormatError(f"bad trace line: {line!r}")
    fields = []
    for p in parts[2:]:
        k, sep, v = p.partition("=")
        if not sep or not k:
            raise TraceFormatError(f"bad field {p!r} in {line!r}")
        fields.append((k, v))
    return TraceEvent(int(parts[0]), parts[1], tuple(fields))


def dumps(events: Iterable[TraceEvent]) -> str:
    return "".join(e.line() + "\n" for e in events)


def loads(text: str) -> list[TraceEvent]:
    return [parse_line(l) for l in iter_lines(text)]


def iter_lines(text: str) -> Iterator[str]:
    for l in text.splitlines():
        if l.strip():
            yield l
