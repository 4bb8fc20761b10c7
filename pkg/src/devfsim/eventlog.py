"""Structured, machine-parseable event log.

One record per dispatch, interrupt, map event or wake; each renders as
a single line of space-separated key=value pairs with a virtual-time
timestamp, so scenario oracles can count and pair events after a run.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .clock import VirtualClock


@dataclass(frozen=True)
class LogRecord:
    seq: int
    ts_ms: float
    kind: str
    fields: tuple[tuple[str, object], ...]

    def get(self, key: str, default=None):
        for name, value in self.fields:
            if name == key:
                return value
        return default

    def to_line(self) -> str:
        parts = [f"ts={self.ts_ms:.3f}", f"seq={self.seq}", f"kind={self.kind}"]
        parts.extend(f"{name}={value}" for name, value in self.fields)
        return " ".join(parts)


class EventLog:
    def __init__(self, clock: VirtualClock):
        self._clock = clock
        self._records: list[LogRecord] = []
        self._lock = threading.Lock()
        self._seq = 0

    def append(self, kind: str, **fields) -> None:
        with self._lock:
            self._seq += 1
            rec = LogRecord(self._seq, self._clock.now_ms(), kind, tuple(fields.items()))
            self._records.append(rec)

    def records(self, kind: str | None = None, **match) -> list[LogRecord]:
        with self._lock:
            out = list(self._records)
        if kind is not None:
            out = [r for r in out if r.kind == kind]
        for key, value in match.items():
            out = [r for r in out if r.get(key) == value]
        return out

    def count(self, kind: str, **match) -> int:
        return len(self.records(kind, **match))

    def to_lines(self) -> list[str]:
        with self._lock:
            return [r.to_line() for r in self._records]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @staticmethod
    def parse_line(line: str) -> dict[str, str]:
        return dict(part.split("=", 1) for part in line.split())
