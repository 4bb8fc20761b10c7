"""Simulated guest OS substrate: vCPU tokens, threads, and signals.

Guest threads are real execution contexts (Python threads) gated by a
fair FIFO set of vCPU tokens, so blocking effects emerge from genuine
contention rather than modeled delays.  A thread runs only while it
holds a token; its progress counter may only move while running.

Scheduling is cooperative: workloads hit scheduling points where they
release and reacquire their token (``yield_cpu``), mirroring a guest
kernel with voluntary preemption.  ``sleep`` releases the token
atomically with the state change; ``wake`` either makes a sleeping
thread runnable or leaves a single saturating permit so a wake racing
ahead of the sleep is not lost.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass

from .errors import UnknownProcess
from .memvirt import GuestMemory, ProcessSpace


class ThreadState(enum.Enum):
    NEW = "new"
    RUNNABLE = "runnable"
    RUNNING = "running"
    SLEEPING = "sleeping"
    DONE = "done"


class SignalKind(enum.Enum):
    IO_EVENT = "io_event"
    PAUSE = "pause"
    RESUME = "resume"


@dataclass(frozen=True)
class Signal:
    kind: SignalKind
    device: int | None = None


IRQ_CONTEXT = "irq"


class VcpuSet:
    """Identified vCPU tokens with fair FIFO handoff."""

    def __init__(self, vcpu_ids: list[int]):
        self.ids = tuple(vcpu_ids)
        self._free: deque[int] = deque(vcpu_ids)
        self._waiters: deque[tuple[threading.Event, list[int]]] = deque()
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        return len(self.ids)

    @property
    def free_count(self) -> int:
        with self._lock:
            return len(self._free)

    def acquire(self) -> int:
        with self._lock:
            if self._free and not self._waiters:
                return self._free.popleft()
            gate = threading.Event()
            box: list[int] = []
            self._waiters.append((gate, box))
        gate.wait()
        return box[0]

    def release(self, vcpu: int) -> None:
        with self._lock:
            if self._waiters:
                gate, box = self._waiters.popleft()
                box.append(vcpu)
                gate.set()
            else:
                self._free.append(vcpu)


class GuestProcess:
    """A guest process: one address space shared by all its threads."""

    def __init__(self, guest: "Guest", space: ProcessSpace):
        self.guest = guest
        self.space = space
        self.pid = space.pid
        self.threads: list[GuestThread] = []
        self.signal_queue: deque[Signal] = deque()
        self.result_page_gpa: dict[int, int] = {}  # thread id -> announced gpa
        self._sig_lock = threading.Lock()
        self.alive = True

    @property
    def page_table_root(self):
        return self.space.guest_root

    def next_signal(self) -> Signal | None:
        with self._sig_lock:
            if self.signal_queue:
                return self.signal_queue.popleft()
            return None

    def pending_signals(self) -> int:
        with self._sig_lock:
            return len(self.signal_queue)


class GuestThread:
    def __init__(self, guest: "Guest", process: GuestProcess, thread_id: int, name: str = ""):
        self.guest = guest
        self.process = process
        self.id = thread_id
        self.name = name or f"gthread-{thread_id}"
        self.state = ThreadState.NEW
        self.progress = 0
        self._wake_permit = False
        self._vcpu: int | None = None
        self._cond = threading.Condition()
        self._py: threading.Thread | None = None

    # -- token discipline ------------------------------------------------

    @property
    def vcpu(self) -> int | None:
        return self._vcpu

    def acquire_vcpu(self) -> int:
        with self._cond:
            assert self._vcpu is None, "thread already holds a vCPU"
            self.state = ThreadState.RUNNABLE
        vcpu = self.guest.vcpus.acquire()
        with self._cond:
            self._vcpu = vcpu
            self.state = ThreadState.RUNNING
        self.guest.set_holder(vcpu, self)
        return vcpu

    def release_vcpu(self) -> None:
        with self._cond:
            assert self._vcpu is not None, "release without holding a vCPU"
            vcpu = self._vcpu
            self._vcpu = None
            self.state = ThreadState.RUNNABLE
        self.guest.set_holder(vcpu, None)
        self.guest.vcpus.release(vcpu)

    def yield_cpu(self) -> None:
        """Scheduling point: go to the back of the FIFO if anyone waits."""
        self.release_vcpu()
        self.acquire_vcpu()

    def bump(self, amount: int = 1) -> None:
        assert self.state is ThreadState.RUNNING, "progress only moves while running"
        self.progress += amount

    # -- sleep / wake ------------------------------------------------------

    def sleep(self) -> None:
        """Block until woken, releasing the vCPU token for the duration.

        A pending wake permit is consumed instead of sleeping, which
        resolves the wake-arrives-first race.
        """
        with self._cond:
            if self._wake_permit:
                self._wake_permit = False
                return
            assert self._vcpu is not None, "sleep without holding a vCPU"
            vcpu = self._vcpu
            self._vcpu = None
            self.state = ThreadState.SLEEPING
        self.guest.set_holder(vcpu, None)
        self.guest.vcpus.release(vcpu)
        with self._cond:
            while self.state is ThreadState.SLEEPING:
                self._cond.wait(timeout=30.0)
        self.acquire_vcpu()

    def wake(self) -> None:
        with self._cond:
            if self.state is ThreadState.SLEEPING:
                self.state = ThreadState.RUNNABLE
                self._cond.notify_all()
            elif self.state is not ThreadState.DONE:
                self._wake_permit = True  # saturating: two wakes keep one permit

    # -- lifecycle ---------------------------------------------------------

    def start(self, body) -> None:
        self._py = threading.Thread(target=self._main, args=(body,),
                                    name=self.name, daemon=True)
        self._py.start()

    def _main(self, body) -> None:
        self.acquire_vcpu()
        try:
            body(self)
        finally:
            with self._cond:
                holding = self._vcpu is not None
            if holding:
                self.release_vcpu()
            with self._cond:
                self.state = ThreadState.DONE
                self._cond.notify_all()

    def join(self, timeout: float | None = None) -> None:
        if self._py is not None:
            self._py.join(timeout)
            if self._py.is_alive():
                raise TimeoutError(f"{self.name} did not finish")


class Guest:
    """One guest VM: vCPU tokens, processes, threads, signal delivery."""

    def __init__(self, guest_id: int, vcpu_ids: list[int], memory: GuestMemory):
        self.id = guest_id
        self.vcpus = VcpuSet(vcpu_ids)
        self.memory = memory
        self.mem_mode = memory.mem_mode
        self.processes: dict[int, GuestProcess] = {}
        self.threads: dict[int, GuestThread] = {}
        self._holders: dict[int, object] = {}
        self._holder_lock = threading.Lock()
        self._next_thread_id = guest_id * 1000 + 1

    def set_holder(self, vcpu: int, holder) -> None:
        with self._holder_lock:
            if holder is None:
                self._holders.pop(vcpu, None)
            else:
                self._holders[vcpu] = holder

    def holder_of(self, vcpu: int):
        with self._holder_lock:
            return self._holders.get(vcpu)

    def tokens_held(self) -> int:
        return self.vcpus.total - self.vcpus.free_count

    def add_process(self, space: ProcessSpace) -> GuestProcess:
        process = GuestProcess(self, space)
        self.processes[process.pid] = process
        return process

    def new_thread(self, process: GuestProcess, name: str = "") -> GuestThread:
        thread = GuestThread(self, process, self._next_thread_id, name)
        self._next_thread_id += 1
        process.threads.append(thread)
        self.threads[thread.id] = thread
        return thread

    def deliver_signal(self, pid: int, signal: Signal) -> None:
        """Enqueue a signal; threads observe it at their next scheduling
        point, and sleeping threads are woken to get there."""
        process = self.processes.get(pid)
        if process is None or not process.alive:
            raise UnknownProcess(f"guest {self.id} has no live process {pid}")
        with process._sig_lock:
            process.signal_queue.append(signal)
        for thread in process.threads:
            thread.wake()
