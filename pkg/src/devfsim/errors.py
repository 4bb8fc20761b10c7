"""Exception types shared across the simulator.

Errors that cross the guest/host boundary as wire statuses are listed in
``status.py``; the classes here are raised inside whichever side detected
the problem.
"""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""


class PageFault(SimError):
    """A page-table walk hit a not-present entry.

    ``level`` is 1 for the top table, 2 for the middle, 3 for the leaf.
    ``bytes_copied`` is filled in by buffer copies that faulted partway.
    """

    def __init__(self, va: int, level: int, bytes_copied: int = 0):
        self.va = va
        self.level = level
        self.bytes_copied = bytes_copied
        super().__init__(f"page fault at {va:#010x} (level {level})")


class TrapExit(SimError):
    """A walk hit a trapping entry and must exit to the hypervisor shim."""

    def __init__(self, va: int, level: int, node_pfn: int, index: int):
        self.va = va
        self.level = level
        self.node_pfn = node_pfn
        self.index = index
        super().__init__(f"trap exit at {va:#010x} (level {level})")


class TrapFixupFailed(SimError):
    """A second trap on the same address after one shim fixup attempt."""


class OutOfRange(SimError):
    """Address beyond the owning memory or memory slot."""


class PoolExhausted(SimError):
    """A reserved page pool has no free pages left."""


class AlreadyMapped(SimError):
    """A driver tried to map a guest virtual page that is already mapped."""


class TdpUnsupported(SimError):
    """Hardware hybrid address space requested for a TDP guest."""


class ChannelClosed(SimError):
    """Hypercall issued after the backend shut down."""


class UnknownVcpu(SimError):
    """Hypercall frame carries a vCPU id not registered to any guest."""


class Unpackable(SimError):
    """A file operation cannot be framed or a frame sequence is malformed."""


class LinesExhausted(SimError):
    """No free interrupt lines left for the guest."""


class UnknownLine(SimError):
    """Interrupt injected on a line that was never reserved."""


class UnknownProcess(SimError):
    """Signal or lookup addressed to a process the guest does not have."""


class UnknownOwner(SimError):
    """Foreground switch to an owner that is neither the host nor a guest."""


class UnknownDevice(SimError):
    """Lookup of a device id that was never registered or exported."""


class DuplicateDevice(SimError):
    """Device info exported twice for the same device."""


class OpUnsupported(SimError):
    """File operation not in the device file's operation table."""


class NoResultPage(SimError):
    """Non-blocking operation from a thread that never announced a result page."""


class RetryFailed(SimError):
    """Driver-initiated map retry could not complete."""

    def __init__(self, reason: str, status: int | None = None):
        self.status = status
        super().__init__(reason)


class StaleRequest(SimError):
    """Re-execution referenced a map request that was already consumed."""


class Busy(SimError):
    """Exclusive device already opened."""


class InvalidCmd(SimError):
    """ioctl command not understood by the device."""


class BadHandle(SimError):
    """File operation referenced an unknown or closed handle."""


class InvalidConfig(SimError):
    """Scenario configuration violates a constraint; message names it."""


class MissingMetric(SimError):
    """Run comparison referenced a metric absent from one of the runs."""
