"""The guest-to-host trap channel.

A file operation is packed into frames of one opcode plus exactly six
32-bit argument slots, modeling the EAX/EBX/ECX/EDX/ESI/EDI virtual
registers.  Every operation fits a single frame except ``page_fault``,
whose argument list exceeds six words and travels as two consecutive
frames; the second carries a continuation opcode and a sequence tag so
the receiver can pair frames even when other processes interleave.

Issuing is synchronous: the caller's execution context runs the backend
dispatcher inline and keeps its vCPU token for the whole round trip,
which is what blocks the guest while a hypercall is in flight.
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass, field, fields, replace

from .errors import ChannelClosed, UnknownProcess, UnknownVcpu, Unpackable

WORD_MASK = 0xFFFF_FFFF
FRAME_SLOTS = 6
MAX_OP_WORDS = 2 * FRAME_SLOTS


class FileOpKind(enum.IntEnum):
    OPEN = 1
    RELEASE = 2
    READ = 3
    WRITE = 4
    IOCTL = 5
    MMAP = 6
    PAGE_FAULT = 7
    POLL = 8
    NOTIFY_SUBSCRIBE = 9


OPCODE_CONTINUATION = 0x7F

# Wire layout per kind: which FileOp fields ride the argument slots, in
# order.  page_fault reuses gva for the faulting address and offset for
# the mapping offset; it is the only layout past six words.
ARG_LAYOUT: dict[FileOpKind, tuple[str, ...]] = {
    FileOpKind.OPEN: ("device_id", "flags"),
    FileOpKind.RELEASE: ("handle",),
    FileOpKind.READ: ("handle", "gva", "length", "offset"),
    FileOpKind.WRITE: ("handle", "gva", "length", "offset"),
    FileOpKind.IOCTL: ("handle", "cmd", "arg_gva", "arg_len", "gva", "flags"),
    FileOpKind.MMAP: ("handle", "gva", "length", "prot", "offset", "flags"),
    FileOpKind.POLL: ("handle", "event_mask", "timeout_ms"),
    FileOpKind.NOTIFY_SUBSCRIBE: ("handle", "pid"),
    FileOpKind.PAGE_FAULT: (
        "handle", "gva", "access", "vma_start", "vma_length", "offset", "flags",
    ),
}

TWO_FRAME_KINDS = frozenset({FileOpKind.PAGE_FAULT})


@dataclass(frozen=True)
class FileOp:
    """One device-file operation; unused fields stay zero."""

    kind: FileOpKind
    device_id: int = 0
    handle: int = 0
    gva: int = 0
    length: int = 0
    offset: int = 0
    flags: int = 0
    cmd: int = 0
    arg_gva: int = 0
    arg_len: int = 0
    prot: int = 0
    event_mask: int = 0
    timeout_ms: int = 0
    pid: int = 0
    access: int = 0
    vma_start: int = 0
    vma_length: int = 0

    def with_fields(self, **kwargs) -> "FileOp":
        return replace(self, **kwargs)


FILEOP_FIELDS = tuple(f.name for f in fields(FileOp) if f.name != "kind")


@dataclass(frozen=True)
class HypercallFrame:
    opcode: int
    args: tuple[int, ...]  # always exactly FRAME_SLOTS wide
    vcpu: int
    virtual_cr3: int

    def __post_init__(self):
        if len(self.args) != FRAME_SLOTS:
            raise Unpackable(f"frame must carry {FRAME_SLOTS} slots, got {len(self.args)}")


@dataclass(frozen=True)
class HypercallResult:
    status: int
    values: tuple[int, ...] = ()


def _op_words(op: FileOp) -> list[int]:
    layout = ARG_LAYOUT[op.kind]
    words = []
    for name in layout:
        value = getattr(op, name)
        if not 0 <= value <= WORD_MASK:
            raise Unpackable(f"{name}={value:#x} does not fit a 32-bit slot")
        words.append(value)
    return words


def _pad(words: list[int]) -> tuple[int, ...]:
    return tuple(words + [0] * (FRAME_SLOTS - len(words)))


def pack(op: FileOp, *, vcpu: int, virtual_cr3: int, tag: int = 0) -> list[HypercallFrame]:
    """Frame a file operation: one frame, or two for page_fault."""
    words = _op_words(op)
    assert len(words) <= MAX_OP_WORDS, "no defined operation exceeds two frames"
    if op.kind in TWO_FRAME_KINDS:
        head, tail = words[:FRAME_SLOTS - 1], words[FRAME_SLOTS - 1:]
        return [
            HypercallFrame(int(op.kind), _pad([tag & WORD_MASK] + head), vcpu, virtual_cr3),
            HypercallFrame(OPCODE_CONTINUATION, _pad([tag & WORD_MASK] + tail), vcpu, virtual_cr3),
        ]
    if len(words) > FRAME_SLOTS:
        raise Unpackable(f"{op.kind.name} needs {len(words)} slots in one frame")
    return [HypercallFrame(int(op.kind), _pad(words), vcpu, virtual_cr3)]


def unpack_args(kind: FileOpKind, words: list[int]) -> FileOp:
    layout = ARG_LAYOUT[kind]
    return FileOp(kind=kind, **dict(zip(layout, words)))


class FrameAssembler:
    """Reassembles operations from frames, pairing continuations.

    Pending first frames are keyed by (guest, process, tag) so a
    two-frame operation survives interleaving with frames from other
    guests and processes.
    """

    def __init__(self):
        self._pending: dict[tuple[int, int, int], HypercallFrame] = {}
        self._lock = threading.Lock()

    def feed(self, frame: HypercallFrame, guest: int, process: int) -> FileOp | None:
        with self._lock:
            if frame.opcode == OPCODE_CONTINUATION:
                key = (guest, process, frame.args[0])
                head = self._pending.pop(key, None)
                if head is None:
                    raise Unpackable("continuation frame without a matching first frame")
                kind = FileOpKind(head.opcode)
                n_tail = len(ARG_LAYOUT[kind]) - (FRAME_SLOTS - 1)
                words = list(head.args[1:]) + list(frame.args[1 : 1 + n_tail])
                return unpack_args(kind, words)
            kind = FileOpKind(frame.opcode)
            if kind in TWO_FRAME_KINDS:
                key = (guest, process, frame.args[0])
                if key in self._pending:
                    raise Unpackable("second first-frame before continuation")
                self._pending[key] = frame
                return None
            return unpack_args(kind, list(frame.args[: len(ARG_LAYOUT[kind])]))


class VcpuRegistry:
    """The hypervisor's view of vCPUs and process page-table roots."""

    def __init__(self):
        self._vcpu_guest: dict[int, int] = {}
        self._process_by_cr3: dict[tuple[int, int], int] = {}
        self._lock = threading.Lock()

    def register_vcpu(self, vcpu: int, guest: int) -> None:
        with self._lock:
            self._vcpu_guest[vcpu] = guest

    def register_process(self, guest: int, cr3: int, pid: int) -> None:
        with self._lock:
            self._process_by_cr3[(guest, cr3)] = pid

    def guest_of(self, vcpu: int) -> int:
        with self._lock:
            try:
                return self._vcpu_guest[vcpu]
            except KeyError:
                raise UnknownVcpu(f"vcpu {vcpu} is not registered") from None

    def identify(self, frame: HypercallFrame) -> tuple[int, int]:
        """(guest, process) of the issuer, from the vCPU map and the
        page-table root planted in the virtual CR3 register."""
        guest = self.guest_of(frame.vcpu)
        with self._lock:
            pid = self._process_by_cr3.get((guest, frame.virtual_cr3))
        if pid is None:
            raise UnknownProcess(
                f"cr3 {frame.virtual_cr3:#x} matches no process of guest {guest}"
            )
        return guest, pid


def identify(frame: HypercallFrame, registry: VcpuRegistry) -> tuple[int, int]:
    return registry.identify(frame)


class HypercallChannel:
    """Synchronous rendezvous between guest contexts and the dispatcher."""

    def __init__(self, dispatch, registry: VcpuRegistry, holder_check=None):
        self._dispatch = dispatch
        self.registry = registry
        self._holder_check = holder_check
        self._closed = False
        self._tags = itertools.count(1)
        self.issued = 0

    def next_tag(self) -> int:
        return next(self._tags) & WORD_MASK

    def close(self) -> None:
        self._closed = True

    def issue(self, frames: list[HypercallFrame], vcpu: int) -> HypercallResult:
        """Deliver frames to the backend; blocks until dispatch returns.

        The issuing context must hold the vCPU token named by ``vcpu``,
        and keeps it for the full duration of the dispatch.
        """
        if self._closed:
            raise ChannelClosed("backend is shut down")
        if self._holder_check is not None:
            assert self._holder_check(vcpu), "hypercall issued without holding its vCPU"
        self.issued += 1
        return self._dispatch(frames)
