"""Instrumented guest workloads driving the concurrency scenarios.

Each workload is a body function run on a guest thread.  Progress is
counted through the thread's own counter (compute workloads) or a stats
object (device workloads), and the bodies hit scheduling points so the
FIFO token handoff stays fair.  The renderer does its per-frame work
without yielding, like an application rendering one frame at a time.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from .frontend import Frontend, VirtualDeviceFile
from .guest import GuestThread, SignalKind
from .hypercall import FileOp, FileOpKind


@dataclass
class IoStats:
    polls: int = 0
    reads: int = 0
    writes: int = 0
    bytes: int = 0
    frames: int = 0
    events: int = 0


@dataclass
class WorkloadResult:
    kind: str
    progress: int
    duration_s: float
    extra: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.progress / self.duration_s if self.duration_s > 0 else 0.0


def open_device(frontend: Frontend, thread: GuestThread, file: VirtualDeviceFile,
                flags: int = 0) -> int:
    result = frontend.vfs_dispatch(
        thread, file, FileOp(kind=FileOpKind.OPEN, device_id=file.device_id, flags=flags))
    assert result.ok, f"open failed with status {result.status}"
    return result.values[0]


def cpu_loop_body(stop: threading.Event):
    """Pure compute: one progress unit per scheduling quantum."""

    def body(thread: GuestThread):
        while not stop.is_set():
            thread.bump()
            thread.yield_cpu()

    return body


def poll_reader_body(frontend: Frontend, file: VirtualDeviceFile, handle: int,
                     buf_gva: int, n_reads: int, stats: IoStats,
                     read_len: int = 512, timeout_ms: int = 0):
    """Poll-then-read loop, the camera application analog."""

    def body(thread: GuestThread):
        for _ in range(n_reads):
            res = frontend.vfs_dispatch(thread, file, FileOp(
                kind=FileOpKind.POLL, handle=handle, event_mask=1,
                timeout_ms=timeout_ms))
            stats.polls += 1
            if res.values and res.values[0] == 0:
                continue  # poll timed out; try again
            res = frontend.vfs_dispatch(thread, file, FileOp(
                kind=FileOpKind.READ, handle=handle, gva=buf_gva, length=read_len))
            stats.reads += 1
            stats.bytes += res.values[0] if res.values else 0
            thread.yield_cpu()

    return body


def render_loop_body(frontend: Frontend, file: VirtualDeviceFile, handle: int,
                     buf_gva: int, stats: IoStats, stop: threading.Event,
                     work_s: float = 0.005, frame_bytes: int = 256):
    """Render loop: ``work_s`` of uninterrupted frame compute, one device
    write per frame, pause and resume honored at frame boundaries."""

    def body(thread: GuestThread):
        paused = False
        while not stop.is_set():
            while (sig := thread.process.next_signal()) is not None:
                if sig.kind is SignalKind.PAUSE:
                    paused = True
                elif sig.kind is SignalKind.RESUME:
                    paused = False
            if paused:
                thread.sleep()  # the next signal wakes us to re-check
                continue
            deadline = time.perf_counter() + work_s
            while time.perf_counter() < deadline:
                thread.bump()
            frontend.vfs_dispatch(thread, file, FileOp(
                kind=FileOpKind.WRITE, handle=handle, gva=buf_gva,
                length=frame_bytes, offset=0))
            stats.frames += 1
            thread.yield_cpu()

    return body


def event_reader_body(frontend: Frontend, file: VirtualDeviceFile, handle: int,
                      buf_gva: int, n_events: int, stats: IoStats):
    """Notification-driven reader: sleep until signaled, then read the
    new events from the device.

    One interrupt may stand for several queued events (same-line
    coalescing), so each signal is followed by reads until one comes
    back empty.
    """

    def body(thread: GuestThread):
        while stats.events < n_events:
            sig = thread.process.next_signal()
            if sig is None:
                thread.sleep()
                continue
            if sig.kind is not SignalKind.IO_EVENT:
                continue
            while stats.events < n_events:
                res = frontend.vfs_dispatch(thread, file, FileOp(
                    kind=FileOpKind.READ, handle=handle, gva=buf_gva, length=12))
                stats.reads += 1
                if not (res.values and res.values[0]):
                    break
                stats.events += 1
            thread.yield_cpu()

    return body


def run_workload(guest, process, kind: str, params: dict) -> WorkloadResult:
    """Run one named workload to completion and report its progress.

    cpu_loop params: duration_s.  poll_reader params: frontend, file,
    handle, buf_gva, n_reads, stats.  render_loop params: frontend,
    file, handle, buf_gva, frames, stats.
    """
    thread = guest.new_thread(process, name=f"wl-{kind}")
    start = time.monotonic()
    if kind == "cpu_loop":
        stop = threading.Event()
        thread.start(cpu_loop_body(stop))
        time.sleep(params.get("duration_s", 0.1))
        stop.set()
        thread.join(10.0)
        return WorkloadResult(kind, thread.progress, time.monotonic() - start)
    if kind == "poll_reader":
        stats = params.get("stats") or IoStats()
        thread.start(poll_reader_body(params["frontend"], params["file"],
                                      params["handle"], params["buf_gva"],
                                      params["n_reads"], stats,
                                      timeout_ms=params.get("timeout_ms", 0)))
        thread.join(60.0)
        return WorkloadResult(kind, stats.reads, time.monotonic() - start,
                              extra={"stats": stats})
    if kind == "render_loop":
        stats = params.get("stats") or IoStats()
        stop = threading.Event()
        thread.start(render_loop_body(params["frontend"], params["file"],
                                      params["handle"], params["buf_gva"],
                                      stats, stop,
                                      work_s=params.get("work_s", 0.005)))
        time.sleep(params.get("duration_s", 0.2))
        stop.set()
        thread.join(30.0)
        return WorkloadResult(kind, stats.frames, time.monotonic() - start,
                              extra={"stats": stats})
    raise ValueError(f"unknown workload kind {kind!r}")
