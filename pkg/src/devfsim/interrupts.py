"""Backend-to-frontend signaling over numbered virtual interrupt lines.

Each guest owns a small set of lines.  A line is reserved for one
purpose: operation completions, per-device event notifications, or
foreground pause/resume.  Argument-bearing lines (completion and
pause/resume) pass one integer through a shared memory page indexed by
line number; the slot is written by the backend before the interrupt is
queued and cleared when the frontend handler reads it.

Delivery semantics per line: at-least-once, latest argument wins.  On
an argument-less line back-to-back injections coalesce into fewer
handler runs, like a level-triggered interrupt.  On an argument-bearing
line the writer waits until the previous argument was consumed, so no
argument is ever lost; completion pairing depends on that.

A handler runs on a vCPU: the per-guest delivery context acquires a
token through the same FIFO as guest threads, so no interrupt reaches
a guest whose vCPUs are all busy until one frees.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

from .errors import LinesExhausted, UnknownLine
from .eventlog import EventLog
from .guest import Guest, IRQ_CONTEXT
from .memvirt import PhysMem

DEFAULT_LINE_COUNT = 32

PURPOSE_COMPLETION = ("completion",)
PURPOSE_PAUSE_RESUME = ("pause_resume",)


def purpose_notification(device_id: int) -> tuple:
    return ("notification", device_id)


def purpose_has_arg(purpose: tuple) -> bool:
    return purpose[0] in ("completion", "pause_resume")


@dataclass(frozen=True)
class InterruptEvent:
    guest: int
    line: int
    arg: int | None = None


class SharedArgPage:
    """One page of per-line argument words shared with the frontend."""

    def __init__(self, mem: PhysMem, pfn: int):
        self._mem = mem
        self._pfn = pfn

    def write(self, line: int, value: int) -> None:
        self._mem.write(self._pfn * 4096 + line * 4, value.to_bytes(4, "little"))

    def read_and_clear(self, line: int) -> int:
        off = self._pfn * 4096 + line * 4
        value = int.from_bytes(self._mem.read(off, 4), "little")
        self._mem.write(off, b"\x00\x00\x00\x00")
        return value


class InterruptFabric:
    """Per-guest line table, argument slots, and pending-delivery queue."""

    def __init__(self, guest_id: int, arg_page: SharedArgPage,
                 n_lines: int = DEFAULT_LINE_COUNT, log: EventLog | None = None):
        self.guest_id = guest_id
        self.n_lines = n_lines
        self._arg_page = arg_page
        self._log = log
        self._lines: dict[tuple, int] = {}
        self._purpose: dict[int, tuple] = {}
        self._arg_full: dict[int, bool] = {}
        self._pending: deque[int] = deque()
        self._pending_set: set[int] = set()
        self._cond = threading.Condition()
        self._stopped = False
        self.injected: dict[int, int] = {}
        self.delivered: dict[int, int] = {}
        self.coalesced = 0

    def reserve_line(self, purpose: tuple) -> int:
        """Reserve (idempotently) the line for a purpose; notification
        purposes carry the device id, giving each device its own line."""
        with self._cond:
            if purpose in self._lines:
                return self._lines[purpose]
            if len(self._lines) >= self.n_lines:
                raise LinesExhausted(f"guest {self.guest_id} has no free interrupt lines")
            line = len(self._lines)
            self._lines[purpose] = line
            self._purpose[line] = purpose
            self._arg_full[line] = False
            self.injected[line] = 0
            self.delivered[line] = 0
            return line

    def line_for(self, purpose: tuple) -> int:
        with self._cond:
            if purpose not in self._lines:
                raise UnknownLine(f"no line reserved for {purpose}")
            return self._lines[purpose]

    def purpose_of(self, line: int) -> tuple:
        with self._cond:
            if line not in self._purpose:
                raise UnknownLine(f"line {line} not reserved")
            return self._purpose[line]

    def inject(self, event: InterruptEvent) -> None:
        with self._cond:
            if event.line not in self._purpose:
                raise UnknownLine(f"line {event.line} not reserved")
            has_arg = purpose_has_arg(self._purpose[event.line])
            if has_arg != (event.arg is not None):
                raise ValueError("argument present iff the line is argument-bearing")
            if has_arg:
                # Wait for the previous argument to be consumed; losing a
                # completion thread id would strand a sleeping thread.
                while self._arg_full[event.line] and not self._stopped:
                    self._cond.wait(timeout=0.5)
                if self._stopped:
                    return
                self._arg_page.write(event.line, event.arg)
                self._arg_full[event.line] = True
                self._pending.append(event.line)
            else:
                if event.line in self._pending_set:
                    self.coalesced += 1
                else:
                    self._pending.append(event.line)
                    self._pending_set.add(event.line)
            self.injected[event.line] += 1
            if self._log is not None:
                self._log.append("interrupt_inject", guest=self.guest_id,
                                 line=event.line, purpose=self._purpose[event.line][0],
                                 arg=event.arg)
            self._cond.notify_all()

    def next_pending(self) -> tuple[int, bool] | None:
        """Block until a line is pending; None once stopped and drained."""
        with self._cond:
            while not self._pending and not self._stopped:
                self._cond.wait(timeout=0.5)
            if not self._pending:
                return None
            line = self._pending.popleft()
            self._pending_set.discard(line)
            return line, purpose_has_arg(self._purpose[line])

    def consume_arg(self, line: int) -> int:
        with self._cond:
            value = self._arg_page.read_and_clear(line)
            self._arg_full[line] = False
            self._cond.notify_all()
            return value

    def note_delivered(self, line: int) -> None:
        with self._cond:
            self.delivered[line] += 1

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()


class GuestInterruptController:
    """Per-guest delivery context: runs handlers while holding a vCPU."""

    def __init__(self, guest: Guest, fabric: InterruptFabric, handler,
                 log: EventLog | None = None):
        self._guest = guest
        self._fabric = fabric
        self._handler = handler
        self._log = log
        self._py = threading.Thread(target=self._run, daemon=True,
                                    name=f"irq-guest{guest.id}")

    def start(self) -> None:
        self._py.start()

    def _run(self) -> None:
        while True:
            item = self._fabric.next_pending()
            if item is None:
                return
            line, has_arg = item
            vcpu = self._guest.vcpus.acquire()
            self._guest.set_holder(vcpu, IRQ_CONTEXT)
            try:
                arg = self._fabric.consume_arg(line) if has_arg else None
                self._fabric.note_delivered(line)
                if self._log is not None:
                    self._log.append("interrupt_deliver", guest=self._guest.id,
                                     line=line, arg=arg)
                self._handler(line, arg)
            finally:
                self._guest.set_holder(vcpu, None)
                self._guest.vcpus.release(vcpu)

    def stop(self) -> None:
        self._fabric.stop()
        self._py.join(timeout=5.0)
