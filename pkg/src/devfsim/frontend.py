"""Guest-side indirection layer posing as the device driver.

Owns the virtual device files, packs and issues file operations over
the hypercall channel, and handles the interrupts coming back: waking
threads on completions, fanning event notifications out to subscribed
processes as signals, and pausing or resuming the registered renderer
on foreground changes.

Two transport shapes exist per device.  Blocking: the operation's
result comes back in the hypercall's inline slots.  Non-blocking: the
hypercall returns ACCEPTED immediately, the thread sleeps, and after
the completion interrupt the result is read from the thread's shared
result page.  Callers observe identical results either way.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .backend import Backend
from .errors import (
    DuplicateDevice,
    NoResultPage,
    OpUnsupported,
    PoolExhausted,
    RetryFailed,
    UnknownDevice,
    UnknownLine,
)
from .eventlog import EventLog
from .guest import Guest, GuestThread, Signal, SignalKind
from .hypercall import FileOp, FileOpKind, HypercallChannel, TWO_FRAME_KINDS, pack
from .interrupts import InterruptFabric
from .memvirt import MemoryVirtualizer, PAGE_SHIFT, PAGE_SIZE
from . import resultpage
from .status import Status

# File operations this frontend version knows how to forward; mounting
# intersects it with the backend's per-device list, which is also how a
# version-skewed peer is accommodated.
FRONTEND_SUPPORTED = frozenset(FileOpKind)


@dataclass(frozen=True)
class VirtualDeviceFile:
    path: str
    device_id: int
    ops_table: frozenset


def _six(values: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(values[:6]) + (0,) * (6 - min(len(values), 6))


@dataclass(frozen=True)
class OpResult:
    status: int
    values: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


class Frontend:
    def __init__(self, guest: Guest, channel: HypercallChannel, fabric: InterruptFabric,
                 memv: MemoryVirtualizer, backend: Backend, log: EventLog):
        self.guest = guest
        self.channel = channel
        self.fabric = fabric
        self.memv = memv
        self.backend = backend
        self.log = log
        self.files: dict[str, VirtualDeviceFile] = {}
        self.notification_lists: dict[int, list[int]] = {}
        self.renderer_pid: int | None = None
        self._info: dict[int, dict] = {}
        self._inflight: set[int] = set()
        self._lock = threading.Lock()
        self.retries = 0

    # -- mounting and device info -------------------------------------------

    def mount(self, path: str, device_id: int,
              frontend_ops: frozenset = FRONTEND_SUPPORTED) -> VirtualDeviceFile:
        """Create the virtual device file; its operation table is the
        handshake between what this frontend and the host driver offer."""
        backend_ops = self.backend.class_driver.supported_ops(device_id)
        file = VirtualDeviceFile(path, device_id, frozenset(frontend_ops & backend_ops))
        self.files[path] = file
        return file

    def export_device_info(self, device_id: int, blob: dict) -> None:
        if device_id in self._info:
            raise DuplicateDevice(f"device {device_id} info already exported")
        self._info[device_id] = dict(blob)

    def get_device_info(self, device_id: int) -> dict:
        try:
            return dict(self._info[device_id])
        except KeyError:
            raise UnknownDevice(f"no info exported for device {device_id}") from None

    # -- notification registration --------------------------------------------

    def register_renderer(self, pid: int) -> None:
        self.renderer_pid = pid

    def _note_local_subscription(self, device_id: int, pid: int) -> None:
        with self._lock:
            pids = self.notification_lists.setdefault(device_id, [])
            if pid not in pids:  # double subscribe stays a single entry
                pids.append(pid)

    def subscribe_notifications(self, thread: GuestThread, file: VirtualDeviceFile,
                                handle: int) -> OpResult:
        op = FileOp(kind=FileOpKind.NOTIFY_SUBSCRIBE, handle=handle,
                    pid=thread.process.pid)
        return self.vfs_dispatch(thread, file, op)

    # -- the dispatch path -------------------------------------------------------

    def vfs_dispatch(self, thread: GuestThread, file: VirtualDeviceFile,
                     op: FileOp) -> OpResult:
        """Forward one file operation and return its caller-visible result."""
        if op.kind not in file.ops_table:
            raise OpUnsupported(f"{op.kind.name} not supported by {file.path}")
        result = self._transport(thread, file, op)
        if result.status == Status.NEED_GVA_RANGE:
            result = self._mmap_retry(thread, file, op,
                                      request_id=result.values[0],
                                      length=result.values[1])
        if result.ok and op.kind is FileOpKind.NOTIFY_SUBSCRIBE:
            self._note_local_subscription(file.device_id, op.pid)
        return result

    def _transport(self, thread: GuestThread, file: VirtualDeviceFile,
                   op: FileOp) -> OpResult:
        mode = self.backend.mode_for(self.guest.id, file.device_id)
        tag = self.channel.next_tag() if op.kind in TWO_FRAME_KINDS else 0
        frames = pack(op, vcpu=thread.vcpu, virtual_cr3=thread.process.space.cr3, tag=tag)
        if mode == "blocking":
            res = self.channel.issue(frames, thread.vcpu)
            return OpResult(res.status, _six(res.values))
        return self._transport_nonblocking(thread, op, frames)

    def _transport_nonblocking(self, thread: GuestThread, op: FileOp,
                               frames) -> OpResult:
        self.ensure_result_page(thread)
        with self._lock:
            assert thread.id not in self._inflight, \
                "a thread may have only one operation in flight"
            self._inflight.add(thread.id)
        try:
            res = self.channel.issue(frames, thread.vcpu)
            if res.status == Status.ERR_NO_RESULT_PAGE:
                raise NoResultPage(f"thread {thread.id} has no announced result page")
            if res.status != Status.ACCEPTED:
                return OpResult(res.status, _six(res.values))
            thread.sleep()  # completion interrupt wakes us
            record = self._read_result_page(thread)
        finally:
            with self._lock:
                self._inflight.discard(thread.id)
        if record.blob is not None and op.arg_gva:
            # Small payloads ride the result page; land them in the
            # caller's buffer so both modes leave identical memory.
            self.guest_write(thread, op.arg_gva, record.blob)
        return OpResult(record.status, _six(record.values))

    def ensure_result_page(self, thread: GuestThread) -> int:
        process = thread.process
        gpa = process.result_page_gpa.get(thread.id)
        if gpa is None:
            pfn = self.guest.memory.os_alloc.alloc()
            gpa = pfn << PAGE_SHIFT
            process.result_page_gpa[thread.id] = gpa
            self.backend.announce_result_page(self.guest.id, process.pid, thread.id, gpa)
        return gpa

    def _read_result_page(self, thread: GuestThread) -> resultpage.ResultRecord:
        gpa = thread.process.result_page_gpa[thread.id]
        return resultpage.decode(self.guest.memory.mem.read(gpa, PAGE_SIZE))

    def _mmap_retry(self, thread: GuestThread, file: VirtualDeviceFile, op: FileOp,
                    request_id: int, length: int) -> OpResult:
        """Allocate a guest address range and re-execute, hiding the
        intermediate failure from the caller entirely."""
        self.retries += 1
        try:
            base = thread.process.space.alloc_va_range(length)
        except PoolExhausted as exc:
            raise RetryFailed(f"no guest address range for {length} bytes") from exc
        retried = op.with_fields(gva=base, flags=request_id)
        result = self._transport(thread, file, retried)
        if not result.ok:
            raise RetryFailed("re-executed operation failed", status=result.status)
        return result

    # -- guest-side memory access (the process touching its own memory) ----------

    def guest_write(self, thread: GuestThread, gva: int, data: bytes) -> None:
        translator = self.memv.translator(thread.process.space, use_cache=False)
        done = 0
        while done < len(data):
            cur = gva + done
            chunk = min(len(data) - done, PAGE_SIZE - (cur % PAGE_SIZE))
            self.memv.host_mem.write(translator.translate(cur), data[done : done + chunk])
            done += chunk

    def guest_read(self, thread: GuestThread, gva: int, length: int) -> bytes:
        translator = self.memv.translator(thread.process.space, use_cache=False)
        out = bytearray()
        done = 0
        while done < length:
            cur = gva + done
            chunk = min(length - done, PAGE_SIZE - (cur % PAGE_SIZE))
            out += self.memv.host_mem.read(translator.translate(cur), chunk)
            done += chunk
        return bytes(out)

    # -- interrupt handling ---------------------------------------------------------

    def handle_interrupt(self, line: int, arg: int | None) -> None:
        """Infer the purpose of the interrupt from its line and route it."""
        try:
            purpose = self.fabric.purpose_of(line)
        except UnknownLine:
            self.log.append("interrupt_drop", guest=self.guest.id, line=line)
            return
        kind = purpose[0]
        if kind == "completion":
            thread = self.guest.threads.get(arg)
            if thread is not None:
                self.log.append("wake", guest=self.guest.id, thread=arg,
                                cause="completion")
                thread.wake()
            return
        if kind == "notification":
            device_id = purpose[1]
            with self._lock:
                pids = list(self.notification_lists.get(device_id, ()))
            for pid in pids:
                self.guest.deliver_signal(pid, Signal(SignalKind.IO_EVENT, device_id))
            return
        if kind == "pause_resume" and self.renderer_pid is not None:
            signal = SignalKind.PAUSE if arg == 0 else SignalKind.RESUME
            self.guest.deliver_signal(self.renderer_pid, Signal(signal))
