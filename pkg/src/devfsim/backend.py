"""Host-side dispatcher: bookkeeping, dual threads, and HAS execution.

Frames arrive from the hypercall channel, are reassembled into file
operations, and attributed to a (guest, process) through the vCPU map
and the virtual CR3 value.  The process's page-table root is captured
into a record the first time one of its threads traps in, and every
later memory operation uses the stored root; workers never go back to
the virtual CR3, which may be unreadable once the guest thread has been
preempted.

Blocking mode executes the operation inline in the dispatcher, inside
the per-(guest, process) serialization, so the issuing vCPU token stays
held for the whole driver call.  Non-blocking mode hands the operation
to the guest thread's dual thread (spawned on first use), returns
ACCEPTED immediately, and the dual thread later writes the thread's
result page and injects a completion interrupt carrying the thread id.

Driver handlers run in a marked context.  While marked, the kernel
user-memory routines are redirected: the software hybrid address space
routes them through software page walks against the guest process, and
the hardware one activates the process's merged top-level table so the
plain walk reaches guest pages directly.  Host-native callers run
unmarked and never touch the redirected paths.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

from .clock import VirtualClock
from .devices import ClassDriver, DeviceClass, OpOutcome
from .errors import StaleRequest, TdpUnsupported, UnknownOwner
from .eventlog import EventLog
from .guest import Guest, GuestThread
from .hypercall import (
    FileOp,
    FileOpKind,
    FrameAssembler,
    HypercallFrame,
    HypercallResult,
    VcpuRegistry,
)
from .interrupts import (
    InterruptEvent,
    InterruptFabric,
    PURPOSE_COMPLETION,
    PURPOSE_PAUSE_RESUME,
    purpose_notification,
)
from .memvirt import (
    Gva,
    HybridTopLevel,
    MemoryVirtualizer,
    PAGE_MASK,
    PAGE_SHIFT,
    PAGE_SIZE,
    ProcessSpace,
    TableEditor,
    TranslationCache,
    copy_user_buffer,
    resolve_hybrid_with_fixup,
    walk_guest,
)
from . import resultpage
from .status import Status

PAUSE_ARG = 0
RESUME_ARG = 1

HOST = "host"


class SoftwareHasAccess:
    """Redirected user-memory routines backed by software page walks.

    Copies translate once per page through the process's FIFO cache;
    maps fix both the guest table and the shadow table or TDP table,
    depending on the guest's memory virtualization.
    """

    copies = 0  # class-wide counters let tests prove host-native
    maps = 0    # operations never come through here

    def __init__(self, record: "GuestProcessRecord", memv: MemoryVirtualizer,
                 log: EventLog | None = None):
        self._record = record
        self._memv = memv
        self._log = log

    def copy_to_user(self, gva: int, data: bytes) -> int:
        SoftwareHasAccess.copies += 1
        return copy_user_buffer("to_guest", Gva(gva), len(data), data,
                                translator=self._record.translator,
                                host_mem=self._memv.host_mem)

    def copy_from_user(self, gva: int, length: int) -> bytes:
        SoftwareHasAccess.copies += 1
        buf = bytearray(length)
        copy_user_buffer("from_guest", Gva(gva), length, buf,
                         translator=self._record.translator,
                         host_mem=self._memv.host_mem)
        return bytes(buf)

    def map_page(self, gva: int, hpa: int) -> None:
        SoftwareHasAccess.maps += 1
        record = self._record
        self._memv.map_page_into_guest(record.space, Gva(gva), hpa,
                                       record.space.guest.mem_mode,
                                       cache=record.translation_cache)
        if self._log is not None:
            self._log.append("map", guest=record.guest_id, process=record.pid,
                             gva=hex(gva), hpa=hex(hpa), route="software")


class _HybridResolver:
    """Per-page resolution through the merged table, with trap fixup."""

    def __init__(self, record: "GuestProcessRecord", memv: MemoryVirtualizer):
        self._record = record
        self._memv = memv

    def translate(self, gva: int) -> int:
        self._record.hw_translations += 1
        return resolve_hybrid_with_fixup(gva, self._record.active_hybrid,
                                         self._memv.host_mem,
                                         self._record.trap_shim)


class HardwareHasAccess:
    """User-memory routines over the activated hybrid address space.

    The merged top-level table makes guest user pages directly
    walkable, so copies are plain walks.  Maps manipulate the process's
    shadow table directly; the guest's own table is left alone, which
    is safe because every file operation of the process is handled on
    the host side through this same address space.
    """

    copies = 0
    maps = 0

    def __init__(self, record: "GuestProcessRecord", memv: MemoryVirtualizer,
                 log: EventLog | None = None):
        self._record = record
        self._memv = memv
        self._log = log
        record.activate_hybrid(memv)
        self._resolver = _HybridResolver(record, memv)

    def copy_to_user(self, gva: int, data: bytes) -> int:
        HardwareHasAccess.copies += 1
        return copy_user_buffer("to_guest", Gva(gva), len(data), data,
                                translator=self._resolver, host_mem=self._memv.host_mem)

    def copy_from_user(self, gva: int, length: int) -> bytes:
        HardwareHasAccess.copies += 1
        buf = bytearray(length)
        copy_user_buffer("from_guest", Gva(gva), length, buf,
                         translator=self._resolver, host_mem=self._memv.host_mem)
        return bytes(buf)

    def map_page(self, gva: int, hpa: int) -> None:
        HardwareHasAccess.maps += 1
        record = self._record
        space = record.space
        shadow = TableEditor(self._memv.host_mem, space.shadow_root,
                             self._memv.host_alloc.alloc)
        shadow.map(gva, hpa >> PAGE_SHIFT, replace=True)
        space.driver_mappings[gva >> PAGE_SHIFT] = hpa >> PAGE_SHIFT
        if self._log is not None:
            self._log.append("map", guest=record.guest_id, process=record.pid,
                             gva=hex(gva), hpa=hex(hpa), route="hardware")


class HostNativeAccess:
    """Unmarked context: ordinary host user-memory routines.

    Models a native host process; pages materialize on first touch in
    host memory, with no guest tables anywhere near the path.
    """

    def __init__(self, memv: MemoryVirtualizer):
        self._memv = memv
        self._pages: dict[int, int] = {}

    def _page(self, va: int) -> int:
        page = va >> PAGE_SHIFT
        if page not in self._pages:
            self._pages[page] = self._memv.host_alloc.alloc()
        return self._pages[page]

    def copy_to_user(self, va: int, data: bytes) -> int:
        done = 0
        while done < len(data):
            cur = va + done
            chunk = min(len(data) - done, PAGE_SIZE - (cur & PAGE_MASK))
            hpa = (self._page(cur) << PAGE_SHIFT) | (cur & PAGE_MASK)
            self._memv.host_mem.write(hpa, data[done : done + chunk])
            done += chunk
        return done

    def copy_from_user(self, va: int, length: int) -> bytes:
        out = bytearray()
        done = 0
        while done < length:
            cur = va + done
            chunk = min(length - done, PAGE_SIZE - (cur & PAGE_MASK))
            hpa = (self._page(cur) << PAGE_SHIFT) | (cur & PAGE_MASK)
            out += self._memv.host_mem.read(hpa, chunk)
            done += chunk
        return bytes(out)

    def map_page(self, va: int, hpa: int) -> None:
        self._pages[va >> PAGE_SHIFT] = hpa >> PAGE_SHIFT


@dataclass
class MapRequest:
    device_id: int
    length: int
    pfns: list[int]


class MapRetryLedger:
    """Recorded driver-initiated map requests, each consumed exactly once."""

    def __init__(self):
        self._entries: dict[tuple[int, int, int], MapRequest] = {}
        self._next_id = 1
        self._lock = threading.Lock()

    def record(self, guest: int, pid: int, request: MapRequest) -> int:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            self._entries[(guest, pid, request_id)] = request
            return request_id

    def consume(self, guest: int, pid: int, request_id: int) -> MapRequest:
        with self._lock:
            entry = self._entries.pop((guest, pid, request_id), None)
        if entry is None:
            raise StaleRequest(f"map request {request_id} was never recorded or already used")
        return entry

    def outstanding(self) -> int:
        with self._lock:
            return len(self._entries)


class ForegroundState:
    def __init__(self, owner=HOST):
        self.owner = owner
        self.lock = threading.Lock()


class GuestProcessRecord:
    """Backend-side state for one guest process.

    The page-table root is stored at creation and used for every later
    translation; the translation cache is per process and shared by all
    of the process's threads.
    """

    def __init__(self, guest: Guest, space: ProcessSpace, memv: MemoryVirtualizer):
        self.guest_id = guest.id
        self.pid = space.pid
        self.guest = guest
        self.space = space
        self.stored_pt_root = space.guest_root
        self.translation_cache = TranslationCache()
        self.translator = memv.translator(space, self.translation_cache)
        self.result_pages: dict[int, tuple[int, int]] = {}  # thread -> (gpa, hpa)
        self.hybrid = HybridTopLevel(memv.host_mem, memv.host_alloc)
        self.active_hybrid = None
        self.hw_translations = 0
        self.dispatch_lock = threading.RLock()
        self._memv = memv

    def activate_hybrid(self, memv: MemoryVirtualizer) -> None:
        if self.guest.mem_mode == "tdp":
            raise TdpUnsupported("hybrid table activation for a TDP guest")
        self.active_hybrid = self.hybrid.build(self.space.shadow_root,
                                               memv.host_kernel_root)

    def trap_shim(self, trap) -> None:
        """Default hypervisor shim: resync the trapping shadow entry from
        the guest's own tables, then let the walk retry."""
        space = self.space
        gpa = walk_guest(Gva(trap.va & ~PAGE_MASK), space.guest_root, space.guest.mem)
        hpa = self._memv.gpa_to_hpa(gpa, self.guest_id)
        editor = TableEditor(self._memv.host_mem, space.shadow_root,
                             self._memv.host_alloc.alloc)
        editor.map(trap.va & ~PAGE_MASK, hpa >> PAGE_SHIFT, replace=True)


@dataclass
class ExecutionContext:
    """What a driver handler sees while servicing one operation."""

    backend: "Backend"
    record: GuestProcessRecord | None
    mem: object
    marked: bool
    clock: VirtualClock = None

    def record_map_and_fail(self, device_id: int, length: int, pfns: list[int]) -> int:
        return self.backend.record_map_and_fail(self.record, device_id, length, pfns)

    def consume_map_request(self, request_id: int) -> MapRequest:
        return self.backend.consume_map_request(self.record, request_id)


class DualThread:
    """Host worker paired with one guest thread.

    Runs that thread's forwarded operations so the hypercall can return
    immediately; on completion writes the shared result page and pokes
    the completion line with the guest thread id.
    """

    def __init__(self, backend: "Backend", guest_thread: GuestThread):
        self._backend = backend
        self.guest_thread_id = guest_thread.id
        self._guest = guest_thread.guest
        self._q: queue.Queue = queue.Queue()
        self.state = "idle"
        self._py = threading.Thread(target=self._run, daemon=True,
                                    name=f"dual-{guest_thread.id}")
        self._py.start()

    def submit(self, record: GuestProcessRecord, op: FileOp) -> None:
        self._q.put((record, op))

    def _run(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                return
            record, op = item
            self.state = "busy"
            backend = self._backend
            backend.log.append("dual_pickup", guest=record.guest_id,
                               thread=self.guest_thread_id, op=op.kind.name)
            try:
                outcome, staged = backend.execute_fileop(record, op, backend.has_mode,
                                                         deliver="page")
            except TdpUnsupported:
                outcome, staged = OpOutcome(Status.ERR_UNSUPPORTED), False
            gpa, hpa = record.result_pages[self.guest_thread_id]
            page = resultpage.encode(outcome.status, outcome.values,
                                     outcome.blob, staged)
            backend.memv.host_mem.write(hpa, page)
            fabric = backend.fabrics[record.guest_id]
            line = fabric.line_for(PURPOSE_COMPLETION)
            fabric.inject(InterruptEvent(record.guest_id, line, self.guest_thread_id))
            self.state = "idle"

    def shutdown(self) -> None:
        self._q.put(None)
        self._py.join(timeout=5.0)


class Backend:
    def __init__(self, memv: MemoryVirtualizer, registry: VcpuRegistry,
                 class_driver: ClassDriver, log: EventLog, clock: VirtualClock,
                 has_mode: str = "software"):
        self.memv = memv
        self.registry = registry
        self.class_driver = class_driver
        self.log = log
        self.clock = clock
        self.has_mode = has_mode
        self.records: dict[tuple[int, int], GuestProcessRecord] = {}
        self.dual_threads: dict[int, DualThread] = {}
        self.ledger = MapRetryLedger()
        self.foreground = ForegroundState(HOST)
        self.guests: dict[int, Guest] = {}
        self.fabrics: dict[int, InterruptFabric] = {}
        self.mode_config: dict[tuple[int, int], str] = {}
        self.subscriptions: dict[int, set[int]] = {}
        self.dropped_events: dict[int, int] = {}
        self._spaces: dict[tuple[int, int], ProcessSpace] = {}
        self.assembler = FrameAssembler()
        self._tls = threading.local()
        self._lock = threading.Lock()
        self.host_access = HostNativeAccess(memv)
        self.boycott_hook = None  # would reject ops from a non-pausing guest
        class_driver.set_event_sink(self.route_host_event)

    # -- registration ------------------------------------------------------

    def register_guest(self, guest: Guest, fabric: InterruptFabric) -> None:
        self.guests[guest.id] = guest
        self.fabrics[guest.id] = fabric
        fabric.reserve_line(PURPOSE_COMPLETION)
        fabric.reserve_line(PURPOSE_PAUSE_RESUME)

    def register_process(self, guest: Guest, space: ProcessSpace) -> None:
        self.registry.register_process(guest.id, space.cr3, space.pid)
        self._spaces[(guest.id, space.pid)] = space

    def register_device_for_guest(self, guest_id: int, device_id: int) -> None:
        self.fabrics[guest_id].reserve_line(purpose_notification(device_id))

    def set_mode(self, guest_id: int, device_id: int, mode: str) -> None:
        if mode not in ("blocking", "nonblocking"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode_config[(guest_id, device_id)] = mode

    def mode_for(self, guest_id: int, device_id: int | None) -> str:
        if device_id is None:
            return "blocking"
        return self.mode_config.get((guest_id, device_id), "blocking")

    def record_process_root(self, guest_id: int, pid: int) -> GuestProcessRecord:
        """Capture (once) the process's page-table location for all
        future translations by this process's workers."""
        with self._lock:
            record = self.records.get((guest_id, pid))
            if record is None:
                space = self._spaces[(guest_id, pid)]
                record = GuestProcessRecord(self.guests[guest_id], space, self.memv)
                self.records[(guest_id, pid)] = record
            return record

    def announce_result_page(self, guest_id: int, pid: int, thread_id: int, gpa: int) -> None:
        record = self.record_process_root(guest_id, pid)
        hpa = self.memv.gpa_to_hpa(gpa, guest_id)
        record.result_pages[thread_id] = (gpa, hpa)

    # -- dispatch ------------------------------------------------------------

    def dispatch(self, frames: list[HypercallFrame]) -> HypercallResult:
        result = HypercallResult(Status.CONTINUE)
        for frame in frames:
            guest_id, pid = self.registry.identify(frame)
            op = self.assembler.feed(frame, guest_id, pid)
            if op is None:
                result = HypercallResult(Status.CONTINUE)
                continue
            record = self.record_process_root(guest_id, pid)
            result = self._dispatch_op(record, op, frame)
        return result

    def _device_id_of(self, op: FileOp) -> int | None:
        if op.kind is FileOpKind.OPEN:
            return op.device_id
        try:
            return self.class_driver.device_of_handle(op.handle).device_id
        except Exception:
            return None

    def _dispatch_op(self, record: GuestProcessRecord, op: FileOp,
                     frame: HypercallFrame) -> HypercallResult:
        device_id = self._device_id_of(op)
        mode = self.mode_for(record.guest_id, device_id)
        with record.dispatch_lock:
            if mode == "blocking":
                try:
                    outcome, _ = self.execute_fileop(record, op, self.has_mode,
                                                     deliver="inline")
                except TdpUnsupported:
                    raise
                self.log.append("dispatch", guest=record.guest_id, process=record.pid,
                                op=op.kind.name, mode=mode, status=int(outcome.status))
                self._note_subscription(record, op, outcome.status)
                return HypercallResult(outcome.status, outcome.values[:6])
            thread = self.guests[record.guest_id].holder_of(frame.vcpu)
            if not isinstance(thread, GuestThread):
                return HypercallResult(Status.ERR_INTERNAL)
            if thread.id not in record.result_pages:
                self.log.append("dispatch", guest=record.guest_id, process=record.pid,
                                op=op.kind.name, mode=mode,
                                status=int(Status.ERR_NO_RESULT_PAGE))
                return HypercallResult(Status.ERR_NO_RESULT_PAGE)
            if thread.id not in self.dual_threads:
                self.dual_threads[thread.id] = DualThread(self, thread)
            self.log.append("dispatch", guest=record.guest_id, process=record.pid,
                            op=op.kind.name, mode=mode, status=int(Status.ACCEPTED))
            if op.kind is FileOpKind.NOTIFY_SUBSCRIBE:
                # Routing must begin before the completion comes back.
                self._note_subscription(record, op, Status.OK)
            self.dual_threads[thread.id].submit(record, op)
            return HypercallResult(Status.ACCEPTED, (thread.id,))

    def _note_subscription(self, record: GuestProcessRecord, op: FileOp, status: int) -> None:
        if op.kind is not FileOpKind.NOTIFY_SUBSCRIBE or status != Status.OK:
            return
        device_id = self._device_id_of(op)
        if device_id is None:
            return
        with self._lock:
            self.subscriptions.setdefault(device_id, set()).add(record.guest_id)

    # -- execution -----------------------------------------------------------

    def current_context(self) -> ExecutionContext | None:
        return getattr(self._tls, "ctx", None)

    def execute_fileop(self, record: GuestProcessRecord, op: FileOp, has_mode: str,
                       deliver: str = "inline") -> tuple[OpOutcome, bool]:
        """Run one operation against the host driver in a marked context.

        ``deliver`` says where the result will travel: inline hypercall
        slots (blocking) or the thread's result page (non-blocking).
        Bulk payloads that cannot ride the chosen vehicle are staged
        into the caller's buffer through the user-copy path.
        """
        if has_mode == "hardware":
            if record.guest.mem_mode == "tdp":
                raise TdpUnsupported(
                    "hardware hybrid address space cannot be used with a TDP guest")
            mem = HardwareHasAccess(record, self.memv, self.log)
        elif has_mode == "software":
            mem = SoftwareHasAccess(record, self.memv, self.log)
        else:
            raise ValueError(f"unknown address-space mode {has_mode!r}")
        ctx = ExecutionContext(backend=self, record=record, mem=mem,
                               marked=True, clock=self.clock)
        prev = getattr(self._tls, "ctx", None)
        self._tls.ctx = ctx
        try:
            outcome = self.class_driver.handle_op(op, ctx)
            staged = False
            if outcome.blob is not None:
                inline_ok = deliver == "page" and len(outcome.blob) <= resultpage.BLOB_CAPACITY
                if not inline_ok:
                    if op.arg_gva:
                        ctx.mem.copy_to_user(op.arg_gva, outcome.blob)
                    staged = deliver == "page"
                    outcome = OpOutcome(outcome.status, outcome.values, None)
        finally:
            self._tls.ctx = prev
        self.log.append("execute", guest=record.guest_id, process=record.pid,
                        op=op.kind.name, has=has_mode, status=int(outcome.status))
        return outcome, staged

    def execute_host_native(self, op: FileOp) -> OpOutcome:
        """Run a host process's operation: unmarked, no redirection."""
        ctx = ExecutionContext(backend=self, record=None, mem=self.host_access,
                               marked=False, clock=self.clock)
        prev = getattr(self._tls, "ctx", None)
        self._tls.ctx = ctx
        try:
            return self.class_driver.handle_op(op, ctx)
        finally:
            self._tls.ctx = prev

    # -- driver-initiated maps -------------------------------------------------

    def record_map_and_fail(self, record: GuestProcessRecord, device_id: int,
                            length: int, pfns: list[int]) -> int:
        request_id = self.ledger.record(record.guest_id, record.pid,
                                        MapRequest(device_id, length, list(pfns)))
        self.log.append("need_gva_range", guest=record.guest_id, process=record.pid,
                        device=device_id, length=length, request=request_id)
        return request_id

    def consume_map_request(self, record: GuestProcessRecord, request_id: int) -> MapRequest:
        entry = self.ledger.consume(record.guest_id, record.pid, request_id)
        self.log.append("map_reexecute", guest=record.guest_id, process=record.pid,
                        device=entry.device_id, request=request_id)
        return entry

    # -- events and sharing policy ----------------------------------------------

    def route_host_event(self, device_id: int, payload) -> None:
        """Notify guests of a new device event.

        Input devices notify only the foreground guest; other devices
        notify every subscriber.  Events with nobody to notify are
        dropped and counted.
        """
        device = self.class_driver.device(device_id)
        with self._lock:
            subscribers = set(self.subscriptions.get(device_id, ()))
        if device.dev_class is DeviceClass.INPUT:
            with self.foreground.lock:
                owner = self.foreground.owner
            targets = [owner] if owner in subscribers else []
        else:
            targets = sorted(subscribers)
        self.log.append("host_event", device=device_id, targets=len(targets))
        if not targets:
            with self._lock:
                self.dropped_events[device_id] = self.dropped_events.get(device_id, 0) + 1
            return
        for guest_id in targets:
            fabric = self.fabrics[guest_id]
            line = fabric.line_for(purpose_notification(device_id))
            fabric.inject(InterruptEvent(guest_id, line))

    def set_foreground(self, owner) -> None:
        if owner != HOST and owner not in self.guests:
            raise UnknownOwner(f"{owner!r} is neither the host nor a registered guest")
        with self.foreground.lock:
            previous = self.foreground.owner
            if previous == owner:
                return
            self.foreground.owner = owner
        self.log.append("foreground", previous=previous, owner=owner)
        if previous != HOST:
            fabric = self.fabrics[previous]
            fabric.inject(InterruptEvent(previous, fabric.line_for(PURPOSE_PAUSE_RESUME),
                                         PAUSE_ARG))
        if owner != HOST:
            fabric = self.fabrics[owner]
            fabric.inject(InterruptEvent(owner, fabric.line_for(PURPOSE_PAUSE_RESUME),
                                         RESUME_ARG))
        if self.boycott_hook is not None:
            self.boycott_hook(previous)

    # -- lifecycle ---------------------------------------------------------------

    def shutdown(self) -> None:
        for dual in self.dual_threads.values():
            dual.shutdown()
