"""Synthetic host-side devices behind a generic class driver.

Three device classes stand in for real hardware: an event device
(mouse/keyboard analog), a frame stream device (camera analog, with a
direction flag instead of a separate speaker class), and a framebuffer
device whose ioctl can initiate a memory map from inside the driver.

Handlers never see guest identities.  All user-memory traffic goes
through the execution context handed in by the dispatcher (``ctx.mem``),
which is how the same driver code serves native host callers and
redirected guest callers.
"""

from __future__ import annotations

import enum
import struct
import threading
from collections import deque
from dataclasses import dataclass

from .clock import VirtualClock
from .errors import BadHandle, Busy, InvalidCmd, PageFault, StaleRequest, UnknownDevice
from .hypercall import FileOp, FileOpKind
from .memvirt import PAGE_MASK, PAGE_SHIFT, PAGE_SIZE
from .status import Status

EVENT_RECORD = struct.Struct("<III")  # time_ms, code, value
EVENT_BYTES = EVENT_RECORD.size

POLLIN = 0x1

# ioctl command words
IOCTL_GET_CONFIG = 0xC0F1
IOCTL_SNAPSHOT = 0x5A4E     # returns a driver-generated blob of arg_len bytes
IOCTL_DRIVER_MAP = 0xD31A   # kernel-initiated memory map (needs a gva range)

MMAP_FLAG_LAZY = 0x1        # defer mapping to page_fault operations
OPEN_FLAG_MONITOR = 0x8     # notification-only open; claims no stream

DEFAULT_OPS = frozenset(FileOpKind)


class DeviceClass(enum.Enum):
    INPUT = "input"
    STREAM = "stream"
    FRAMEBUFFER = "framebuffer"


@dataclass(frozen=True)
class OpOutcome:
    status: int
    values: tuple[int, ...] = ()
    blob: bytes | None = None


class Device:
    dev_class = DeviceClass.INPUT
    supported_ops: frozenset = DEFAULT_OPS

    def __init__(self, device_id: int, name: str, clock: VirtualClock):
        self.device_id = device_id
        self.name = name
        self.clock = clock
        self.event_callback = None  # wired by the dispatcher at registration

    def attach_host(self, host_mem, host_alloc) -> None:
        """Called once at registration for devices that own host pages."""

    def info_blob(self) -> dict:
        return {"name": self.name, "class": self.dev_class.value}

    def fire_event(self, payload=None) -> None:
        if self.event_callback is not None:
            self.event_callback(self.device_id, payload)

    # File-operation handlers; devices override what they support.

    def open(self, flags: int) -> None:
        pass

    def release(self, flags: int = 0) -> None:
        pass

    def read(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd("device does not read")

    def write(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd("device does not write")

    def ioctl(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd(f"unknown ioctl {op.cmd:#x}")

    def mmap(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd("device does not mmap")

    def page_fault(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd("device has no fault handler")

    def poll(self, op: FileOp, ctx) -> OpOutcome:
        raise InvalidCmd("device does not poll")

    def subscribe(self, op: FileOp, ctx) -> OpOutcome:
        return OpOutcome(Status.OK)


class EventDevice(Device):
    """Queue of (time, code, value) input events; reads drain FIFO."""

    dev_class = DeviceClass.INPUT

    def __init__(self, device_id: int, name: str, clock: VirtualClock):
        super().__init__(device_id, name, clock)
        self._queue: deque[tuple[int, int, int, float]] = deque()
        self._cond = threading.Condition()
        clock.register_condition(self._cond)
        self.pushed = 0
        # Virtual-time gap between an event reaching the driver and the
        # read that picked it up; the input-latency measurement.
        self.read_latencies_ms: list[float] = []

    def info_blob(self) -> dict:
        blob = super().info_blob()
        blob.update({"vendor_id": 0x1A2B, "model_id": 0x0007, "event_bytes": EVENT_BYTES})
        return blob

    def push(self, code: int, value: int) -> None:
        now = self.clock.now_ms()
        with self._cond:
            self._queue.append((int(now) & 0xFFFFFFFF, code, value, now))
            self.pushed += 1
            self._cond.notify_all()
        self.fire_event((code, value))

    def queued(self) -> int:
        with self._cond:
            return len(self._queue)

    def read(self, op: FileOp, ctx) -> OpOutcome:
        max_events = op.length // EVENT_BYTES
        now = self.clock.now_ms()
        with self._cond:
            take = min(max_events, len(self._queue))
            events = [self._queue.popleft() for _ in range(take)]
            self.read_latencies_ms.extend(now - e[3] for e in events)
        data = b"".join(EVENT_RECORD.pack(*e[:3]) for e in events)
        if data:
            ctx.mem.copy_to_user(op.gva, data)
        return OpOutcome(Status.OK, (len(data),))

    def poll(self, op: FileOp, ctx) -> OpOutcome:
        """Sleep in the driver until an event is ready or the timeout
        passes; a zero timeout means wait indefinitely."""
        deadline = self.clock.now_ms() + op.timeout_ms if op.timeout_ms else None
        with self._cond:
            while not self._queue:
                if deadline is not None and self.clock.now_ms() >= deadline:
                    return OpOutcome(Status.OK, (0,))
                self.clock.cond_wait(self._cond, deadline)
            return OpOutcome(Status.OK, (POLLIN,))

    def ioctl(self, op: FileOp, ctx) -> OpOutcome:
        if op.cmd == IOCTL_SNAPSHOT:
            blob = bytes((i * 7 + 3) & 0xFF for i in range(op.arg_len))
            return OpOutcome(Status.OK, (len(blob),), blob=blob)
        raise InvalidCmd(f"unknown ioctl {op.cmd:#x}")


class StreamDevice(Device):
    """Fixed-period frame source (or sink, when direction is playback).

    Only one opener at a time, like the camera driver it stands in for.
    Frames become ready at multiples of the period; an explicit
    ``push_frame`` also marks readiness and fires the event callback for
    notification fan-out.
    """

    dev_class = DeviceClass.STREAM

    def __init__(self, device_id: int, name: str, clock: VirtualClock,
                 period_ms: int = 100, payload_bytes: int = 512,
                 direction: str = "capture"):
        super().__init__(device_id, name, clock)
        self.period_ms = period_ms
        self.payload_bytes = payload_bytes
        self.direction = direction
        self._cond = threading.Condition()
        clock.register_condition(self._cond)
        self._opened = False
        self._last_boundary = 0
        self._pushed: deque[bytes] = deque()
        self.frames_delivered = 0

    def info_blob(self) -> dict:
        blob = super().info_blob()
        blob.update({"period_ms": self.period_ms, "payload_bytes": self.payload_bytes,
                     "direction": self.direction})
        return blob

    def open(self, flags: int) -> None:
        if flags & OPEN_FLAG_MONITOR:
            return
        with self._cond:
            if self._opened:
                raise Busy(f"{self.name} supports one application at a time")
            self._opened = True
            self._last_boundary = int(self.clock.now_ms() // self.period_ms)

    def release(self, flags: int = 0) -> None:
        if flags & OPEN_FLAG_MONITOR:
            return
        with self._cond:
            self._opened = False

    def push_frame(self, payload: bytes | None = None) -> None:
        with self._cond:
            self._pushed.append(payload or self._frame_payload(self._last_boundary + 1))
            self._cond.notify_all()
        self.fire_event(None)

    def _frame_payload(self, index: int) -> bytes:
        return bytes((index + i) & 0xFF for i in range(self.payload_bytes))

    def _boundary(self) -> int:
        return int(self.clock.now_ms() // self.period_ms)

    def _ready(self) -> bool:
        return bool(self._pushed) or self._boundary() > self._last_boundary

    def poll(self, op: FileOp, ctx) -> OpOutcome:
        deadline = self.clock.now_ms() + op.timeout_ms if op.timeout_ms else None
        with self._cond:
            while not self._ready():
                if deadline is not None and self.clock.now_ms() >= deadline:
                    return OpOutcome(Status.OK, (0,))
                next_boundary = (self._last_boundary + 1) * self.period_ms
                wait_until = next_boundary if deadline is None else min(next_boundary, deadline)
                self.clock.cond_wait(self._cond, wait_until)
            return OpOutcome(Status.OK, (POLLIN,))

    def read(self, op: FileOp, ctx) -> OpOutcome:
        """Block in the driver until the next frame, then hand it over."""
        with self._cond:
            while not self._ready():
                next_boundary = (self._last_boundary + 1) * self.period_ms
                self.clock.cond_wait(self._cond, next_boundary)
            if self._pushed:
                payload = self._pushed.popleft()
            else:
                self._last_boundary = self._boundary()
                payload = self._frame_payload(self._last_boundary)
            self.frames_delivered += 1
        data = payload[: op.length]
        ctx.mem.copy_to_user(op.gva, data)
        return OpOutcome(Status.OK, (len(data),))

    def write(self, op: FileOp, ctx) -> OpOutcome:
        """Playback direction: accept one buffer per frame period."""
        if self.direction != "playback":
            raise InvalidCmd("capture stream is read-only")
        data = ctx.mem.copy_from_user(op.gva, op.length)
        with self._cond:
            while self._boundary() <= self._last_boundary:
                self.clock.cond_wait(self._cond, (self._last_boundary + 1) * self.period_ms)
            self._last_boundary = self._boundary()
            self.frames_delivered += 1
        return OpOutcome(Status.OK, (len(data),))


class FbDevice(Device):
    """Framebuffer with mmap, lazy fault-in, and a driver-initiated map.

    The driver-map ioctl mirrors GPU drivers that create a memory map in
    the kernel as a side effect of an I/O control: on the first pass the
    driver has no guest address range, records the request through the
    dispatcher, and fails; the re-executed operation carries the range
    and consumes the recorded request.  Nothing about the device changes
    on the first pass, so re-execution is safe.
    """

    dev_class = DeviceClass.FRAMEBUFFER

    def __init__(self, device_id: int, name: str, clock: VirtualClock, n_pages: int = 16):
        super().__init__(device_id, name, clock)
        self.n_pages = n_pages
        self.fb_pfns: list[int] = []
        self._host_mem = None
        self.pci_config = bytes((0x40 + (i % 0x3F)) for i in range(256))

    def attach_host(self, host_mem, host_alloc) -> None:
        self._host_mem = host_mem
        self.fb_pfns = [host_alloc.alloc() for _ in range(self.n_pages)]
        for i, pfn in enumerate(self.fb_pfns):
            host_mem.write(pfn * PAGE_SIZE, bytes([(0xA0 + i) & 0xFF]) * PAGE_SIZE)

    def info_blob(self) -> dict:
        blob = super().info_blob()
        blob.update({"vendor_id": 0x8086, "model_id": 0x2A42, "pci_slot": 2,
                     "pci_config": self.pci_config, "fb_pages": self.n_pages})
        return blob

    def _fb_range(self, offset: int, length: int) -> bytes:
        end = offset + length
        if end > self.n_pages * PAGE_SIZE:
            raise InvalidCmd("read beyond framebuffer")
        out = bytearray()
        while offset < end:
            page, off = offset >> PAGE_SHIFT, offset & PAGE_MASK
            chunk = min(end - offset, PAGE_SIZE - off)
            out += self._host_mem.read(self.fb_pfns[page] * PAGE_SIZE + off, chunk)
            offset += chunk
        return bytes(out)

    def read(self, op: FileOp, ctx) -> OpOutcome:
        data = self._fb_range(op.offset, op.length)
        ctx.mem.copy_to_user(op.gva, data)
        return OpOutcome(Status.OK, (len(data),))

    def write(self, op: FileOp, ctx) -> OpOutcome:
        data = ctx.mem.copy_from_user(op.gva, op.length)
        offset, end = op.offset, op.offset + len(data)
        if end > self.n_pages * PAGE_SIZE:
            raise InvalidCmd("write beyond framebuffer")
        written = 0
        while offset < end:
            page, off = offset >> PAGE_SHIFT, offset & PAGE_MASK
            chunk = min(end - offset, PAGE_SIZE - off)
            self._host_mem.write(self.fb_pfns[page] * PAGE_SIZE + off,
                                 data[written : written + chunk])
            offset += chunk
            written += chunk
        return OpOutcome(Status.OK, (written,))

    def mmap(self, op: FileOp, ctx) -> OpOutcome:
        pages = (op.length + PAGE_SIZE - 1) >> PAGE_SHIFT
        first = op.offset >> PAGE_SHIFT
        if first + pages > self.n_pages:
            raise InvalidCmd("map beyond framebuffer")
        if not op.flags & MMAP_FLAG_LAZY:
            for i in range(pages):
                ctx.mem.map_page(op.gva + i * PAGE_SIZE,
                                 self.fb_pfns[first + i] << PAGE_SHIFT)
        return OpOutcome(Status.OK, (op.gva,))

    def page_fault(self, op: FileOp, ctx) -> OpOutcome:
        """Fault-in of one page of a lazily created mapping."""
        page_index = ((op.gva - op.vma_start) >> PAGE_SHIFT) + (op.offset >> PAGE_SHIFT)
        if not 0 <= page_index < self.n_pages:
            raise InvalidCmd("fault outside the framebuffer mapping")
        ctx.mem.map_page(op.gva & ~PAGE_MASK, self.fb_pfns[page_index] << PAGE_SHIFT)
        return OpOutcome(Status.OK, (1,))

    def ioctl(self, op: FileOp, ctx) -> OpOutcome:
        if op.cmd == IOCTL_GET_CONFIG:
            return OpOutcome(Status.OK, (len(self.pci_config),), blob=self.pci_config)
        if op.cmd == IOCTL_DRIVER_MAP:
            length = op.arg_len
            pages = (length + PAGE_SIZE - 1) >> PAGE_SHIFT
            if pages > self.n_pages:
                raise InvalidCmd("driver map beyond framebuffer")
            if op.gva == 0:
                request_id = ctx.record_map_and_fail(
                    self.device_id, length, self.fb_pfns[:pages])
                return OpOutcome(Status.NEED_GVA_RANGE, (request_id, length))
            entry = ctx.consume_map_request(op.flags)
            for i, pfn in enumerate(entry.pfns):
                ctx.mem.map_page(op.gva + i * PAGE_SIZE, pfn << PAGE_SHIFT)
            return OpOutcome(Status.OK, (op.gva,))
        raise InvalidCmd(f"unknown ioctl {op.cmd:#x}")


class ClassDriver:
    """Generic driver layer: handle table plus file-operation dispatch."""

    def __init__(self):
        self._devices: dict[int, Device] = {}
        self._handles: dict[int, tuple[Device, int]] = {}
        self._next_handle = 3
        self._lock = threading.Lock()
        self._event_sink = None

    def register(self, device: Device, host_mem=None, host_alloc=None) -> None:
        self._devices[device.device_id] = device
        if host_mem is not None:
            device.attach_host(host_mem, host_alloc)
        device.event_callback = self._on_event

    def set_event_sink(self, sink) -> None:
        self._event_sink = sink

    def _on_event(self, device_id: int, payload) -> None:
        if self._event_sink is not None:
            self._event_sink(device_id, payload)

    def device(self, device_id: int) -> Device:
        try:
            return self._devices[device_id]
        except KeyError:
            raise UnknownDevice(f"no device {device_id}") from None

    def device_of_handle(self, handle: int) -> Device:
        with self._lock:
            if handle not in self._handles:
                raise BadHandle(f"handle {handle} is not open")
            return self._handles[handle][0]

    def supported_ops(self, device_id: int) -> frozenset:
        return self.device(device_id).supported_ops

    def handle_op(self, op: FileOp, ctx) -> OpOutcome:
        """Route one file operation to its device, mapping driver
        exceptions to wire statuses."""
        try:
            return self._dispatch(op, ctx)
        except Busy as exc:
            return OpOutcome(Status.ERR_BUSY, ())
        except InvalidCmd:
            return OpOutcome(Status.ERR_INVALID_CMD, ())
        except BadHandle:
            return OpOutcome(Status.ERR_BAD_HANDLE, ())
        except StaleRequest:
            return OpOutcome(Status.ERR_STALE_REQUEST, ())
        except PageFault as fault:
            return OpOutcome(Status.ERR_BAD_ADDRESS, (fault.bytes_copied,))

    def _dispatch(self, op: FileOp, ctx) -> OpOutcome:
        if op.kind is FileOpKind.OPEN:
            device = self.device(op.device_id)
            device.open(op.flags)
            with self._lock:
                handle = self._next_handle
                self._next_handle += 1
                self._handles[handle] = (device, op.flags)
            return OpOutcome(Status.OK, (handle,))
        device = self.device_of_handle(op.handle)
        if op.kind is FileOpKind.RELEASE:
            with self._lock:
                flags = self._handles[op.handle][1]
                del self._handles[op.handle]
            device.release(flags)
            return OpOutcome(Status.OK)
        method = {
            FileOpKind.READ: device.read,
            FileOpKind.WRITE: device.write,
            FileOpKind.IOCTL: device.ioctl,
            FileOpKind.MMAP: device.mmap,
            FileOpKind.PAGE_FAULT: device.page_fault,
            FileOpKind.POLL: device.poll,
            FileOpKind.NOTIFY_SUBSCRIBE: device.subscribe,
        }[op.kind]
        return method(op, ctx)


def load_schedule(path) -> list[tuple[int, int, int]]:
    """Parse an event schedule file: one ``time_ms code value`` per line."""
    schedule = []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            time_ms, code, value = (int(tok, 0) for tok in line.split())
            schedule.append((time_ms, code, value))
    return schedule


def generate_events(device: EventDevice, schedule: list[tuple[int, int, int]],
                    clock: VirtualClock) -> threading.Thread:
    """Push events at their scheduled virtual times; returns the pump thread."""

    def pump():
        for time_ms, code, value in sorted(schedule):
            delay = time_ms - clock.now_ms()
            if delay > 0:
                clock.sleep(delay)
            device.push(code, value)

    thread = threading.Thread(target=pump, daemon=True, name=f"events-{device.name}")
    thread.start()
    return thread
