"""Simulated physical memory and multi-level page tables.

Addresses are 32 bit with 4096-byte pages.  Tables use a three-level
layout with a 4-entry top table, so a virtual address splits as::

    bits 31:30   top index    (4 entries, each covering 1 GiB)
    bits 29:21   mid index    (512 entries)
    bits 20:12   leaf index   (512 entries)
    bits 11:0    page offset

Entries are 64-bit little-endian words: ``target_pfn << 12`` plus flag
bits.  Four address kinds flow through this module and are never mixed
implicitly: guest virtual (gva), guest physical (gpa), host virtual
(hva) and host physical (hpa).  A guest's physical memory is a window
into host physical memory at a fixed slot offset, so data written
through either view is seen by the other.

Table kinds and what they translate:

    guest    gva -> gpa    (nodes live in guest memory)
    shadow   gva -> hpa    (hypervisor-owned, nodes in host memory)
    tdp      gpa -> hpa    (hypervisor-owned, nodes in host memory)
    host     hva -> hpa    (host OS table, nodes in host memory)
    hybrid   user gva + kernel hva -> hpa  (merged top level)
"""

from __future__ import annotations

import enum
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NewType

from .errors import (
    AlreadyMapped,
    OutOfRange,
    PageFault,
    PoolExhausted,
    TdpUnsupported,
    TrapExit,
    TrapFixupFailed,
)

Gva = NewType("Gva", int)
Gpa = NewType("Gpa", int)
Hva = NewType("Hva", int)
Hpa = NewType("Hpa", int)

PAGE_SIZE = 4096
PAGE_SHIFT = 12
PAGE_MASK = PAGE_SIZE - 1
ENTRY_SIZE = 8
TOP_ENTRIES = 4
TABLE_ENTRIES = 512
ADDRESS_BITS = 32
KERNEL_BASE = 0xC000_0000  # top entry 3; entries 0-2 are the user region

LEVEL_TOP = 1
LEVEL_MID = 2
LEVEL_LEAF = 3

FLAG_PRESENT = 0x1
FLAG_WRITABLE = 0x2
FLAG_TRAPPING = 0x4

_WORD = struct.Struct("<Q")


class TableKind(enum.Enum):
    GUEST = "guest"
    SHADOW = "shadow"
    TDP = "tdp"
    HOST = "host"
    HYBRID = "hybrid"


class EntryState(enum.Enum):
    NOT_PRESENT = "not_present"
    PRESENT = "present"
    TRAPPING = "trapping"


@dataclass(frozen=True)
class PageTableEntry:
    state: EntryState
    target_pfn: int
    writable: bool


@dataclass(frozen=True)
class PageTableRoot:
    kind: TableKind
    root_pfn: int
    owner_process: int | None = None


def encode_entry(entry: PageTableEntry) -> int:
    word = entry.target_pfn << PAGE_SHIFT
    if entry.state is EntryState.PRESENT:
        word |= FLAG_PRESENT
    elif entry.state is EntryState.TRAPPING:
        word |= FLAG_TRAPPING
    if entry.writable:
        word |= FLAG_WRITABLE
    return word


def decode_entry(word: int) -> PageTableEntry:
    if word & FLAG_TRAPPING:
        state = EntryState.TRAPPING
    elif word & FLAG_PRESENT:
        state = EntryState.PRESENT
    else:
        state = EntryState.NOT_PRESENT
    return PageTableEntry(state, word >> PAGE_SHIFT, bool(word & FLAG_WRITABLE))


def split_va(va: int) -> tuple[int, int, int, int]:
    return (va >> 30) & 0x3, (va >> 21) & 0x1FF, (va >> 12) & 0x1FF, va & PAGE_MASK


class PhysMem:
    """A flat byte array of physical memory, addressable by page frame.

    A guest's memory is constructed as a window into the host's backing
    buffer (``backing``/``base``), which realizes the linear memory slot:
    guest physical page N is the same storage as host physical page
    ``base/PAGE_SIZE + N``.

    Reads and writes rely on the interpreter lock for atomicity; callers
    that need exclusive multi-word updates serialize externally.
    """

    def __init__(self, size_bytes: int, *, backing: bytearray | None = None, base: int = 0):
        if size_bytes % PAGE_SIZE:
            raise ValueError("memory size must be a multiple of the page size")
        if backing is None:
            backing = bytearray(size_bytes)
            base = 0
        if base + size_bytes > len(backing):
            raise OutOfRange("window exceeds backing buffer")
        self._buf = backing
        self._base = base
        self.size_bytes = size_bytes

    @property
    def n_pages(self) -> int:
        return self.size_bytes // PAGE_SIZE

    @property
    def backing(self) -> bytearray:
        return self._buf

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or addr + length > self.size_bytes:
            raise OutOfRange(f"access [{addr:#x}, +{length}) beyond {self.size_bytes:#x}")

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        off = self._base + addr
        return bytes(self._buf[off : off + length])

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        off = self._base + addr
        self._buf[off : off + len(data)] = data

    def read_word(self, pfn: int, index: int) -> int:
        off = self._base + pfn * PAGE_SIZE + index * ENTRY_SIZE
        return _WORD.unpack_from(self._buf, off)[0]

    def write_word(self, pfn: int, index: int, word: int) -> None:
        off = self._base + pfn * PAGE_SIZE + index * ENTRY_SIZE
        _WORD.pack_into(self._buf, off, word)

    def zero_page(self, pfn: int) -> None:
        self.write(pfn * PAGE_SIZE, bytes(PAGE_SIZE))

    def dump_hex(self, pfn: int) -> str:
        """Hex dump of one page, 32 bytes per line, for debugging."""
        data = self.read(pfn * PAGE_SIZE, PAGE_SIZE)
        lines = []
        for i in range(0, PAGE_SIZE, 32):
            chunk = data[i : i + 32]
            lines.append(f"{pfn * PAGE_SIZE + i:08x}  {chunk.hex()}")
        return "\n".join(lines)


class FrameAllocator:
    """Hands out page frames from a fixed pfn range, oldest-freed first."""

    def __init__(self, mem: PhysMem, first_pfn: int, n_pages: int):
        self._mem = mem
        self._free: deque[int] = deque(range(first_pfn, first_pfn + n_pages))
        self._lock = threading.Lock()

    @property
    def free_count(self) -> int:
        return len(self._free)

    def alloc(self) -> int:
        with self._lock:
            if not self._free:
                raise PoolExhausted("frame allocator empty")
            pfn = self._free.popleft()
        self._mem.zero_page(pfn)
        return pfn

    def free(self, pfn: int) -> None:
        with self._lock:
            self._free.append(pfn)


class ReservedPagePool:
    """Guest pages set aside for backend-created mappings.

    ``free_gpa_pages`` were reserved through the hypervisor and are not
    known to the guest OS; they become the guest-table targets of
    driver-created maps.  ``free_guest_pt_pages`` were donated by the
    guest at startup and hold new guest page-table nodes, which the
    guest OS must be able to recognize as its own.
    """

    def __init__(self, free_gpa_pages: list[int], free_guest_pt_pages: list[int]):
        self.free_gpa_pages: deque[int] = deque(free_gpa_pages)
        self.free_guest_pt_pages: deque[int] = deque(free_guest_pt_pages)
        self._lock = threading.Lock()

    def take_gpa_page(self) -> int:
        with self._lock:
            if not self.free_gpa_pages:
                raise PoolExhausted("no reserved guest physical pages left")
            return self.free_gpa_pages.popleft()

    def take_pt_page(self) -> int:
        with self._lock:
            if not self.free_guest_pt_pages:
                raise PoolExhausted("no donated guest page-table pages left")
            return self.free_guest_pt_pages.popleft()


def walk(mem: PhysMem, root_pfn: int, va: int) -> int:
    """Three-level walk; returns the leaf target pfn.

    Raises PageFault on a not-present entry and TrapExit on a trapping
    entry, in both cases naming the level that stopped the walk.
    """
    top, mid, leaf, _ = split_va(va)
    node = root_pfn
    for level, index in ((LEVEL_TOP, top), (LEVEL_MID, mid), (LEVEL_LEAF, leaf)):
        entry = decode_entry(mem.read_word(node, index))
        if entry.state is EntryState.NOT_PRESENT:
            raise PageFault(va, level)
        if entry.state is EntryState.TRAPPING:
            raise TrapExit(va, level, node, index)
        node = entry.target_pfn
    return node


def walk_guest(gva: Gva, root: PageTableRoot, guest_mem: PhysMem) -> Gpa:
    """Resolve a guest virtual address through the guest's own tables."""
    if root.kind is not TableKind.GUEST:
        raise ValueError(f"walk_guest needs a guest root, got {root.kind}")
    pfn = walk(guest_mem, root.root_pfn, gva)
    return Gpa((pfn << PAGE_SHIFT) | (gva & PAGE_MASK))


class TableEditor:
    """Creates and edits entries of one page table.

    New intermediate nodes come from ``node_alloc``; trapping entries are
    rejected for any table kind other than shadow.
    """

    def __init__(self, mem: PhysMem, root: PageTableRoot, node_alloc: Callable[[], int]):
        self._mem = mem
        self._root = root
        self._alloc = node_alloc

    def _descend(self, va: int, *, create: bool) -> tuple[int, int]:
        """Return (leaf node pfn, leaf index), creating mid/leaf tables."""
        top, mid, leaf, _ = split_va(va)
        node = self._root.root_pfn
        for index in (top, mid):
            entry = decode_entry(self._mem.read_word(node, index))
            if entry.state is EntryState.NOT_PRESENT:
                if not create:
                    level = LEVEL_TOP if index is top else LEVEL_MID
                    raise PageFault(va, level)
                child = self._alloc()
                self._mem.write_word(
                    node, index,
                    encode_entry(PageTableEntry(EntryState.PRESENT, child, True)),
                )
                node = child
            else:
                node = entry.target_pfn
        return node, leaf

    def map(self, va: int, target_pfn: int, *, writable: bool = True,
            state: EntryState = EntryState.PRESENT,
            replace: bool = False) -> None:
        if va & PAGE_MASK:
            raise ValueError("mapping address must be page aligned")
        if state is EntryState.TRAPPING and self._root.kind is not TableKind.SHADOW:
            raise ValueError("trapping entries are legal only in shadow tables")
        node, leaf = self._descend(va, create=True)
        existing = decode_entry(self._mem.read_word(node, leaf))
        if existing.state is not EntryState.NOT_PRESENT and not replace:
            raise AlreadyMapped(f"{va:#010x} already mapped in {self._root.kind.value} table")
        self._mem.write_word(node, leaf, encode_entry(PageTableEntry(state, target_pfn, writable)))

    def entry_at(self, va: int) -> PageTableEntry:
        node, leaf = self._descend(va, create=False)
        return decode_entry(self._mem.read_word(node, leaf))

    def set_leaf_state(self, va: int, state: EntryState) -> None:
        """Flip the state of an existing leaf entry, keeping its target."""
        if state is EntryState.TRAPPING and self._root.kind is not TableKind.SHADOW:
            raise ValueError("trapping entries are legal only in shadow tables")
        node, leaf = self._descend(va, create=False)
        entry = decode_entry(self._mem.read_word(node, leaf))
        self._mem.write_word(
            node, leaf, encode_entry(PageTableEntry(state, entry.target_pfn, entry.writable))
        )

    def is_mapped(self, va: int) -> bool:
        try:
            return self.entry_at(va).state is not EntryState.NOT_PRESENT
        except PageFault:
            return False


class TranslationCache:
    """Per-process FIFO cache of gva page -> hpa page, capacity 10.

    Eviction is strictly oldest-inserted-first, independent of hits.
    """

    CAPACITY = 10

    def __init__(self, capacity: int = CAPACITY):
        self.capacity = capacity
        self._entries: deque[tuple[int, int]] = deque()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def lookup(self, gva_page: int) -> int | None:
        for page, hpa_page in self._entries:
            if page == gva_page:
                self.hits += 1
                return hpa_page
        self.misses += 1
        return None

    def insert(self, gva_page: int, hpa_page: int) -> None:
        if len(self._entries) >= self.capacity:
            self._entries.popleft()
        self._entries.append((gva_page, hpa_page))

    def flush_page(self, gva_page: int) -> None:
        self._entries = deque(e for e in self._entries if e[0] != gva_page)

    def entries(self) -> list[tuple[int, int]]:
        return list(self._entries)


@dataclass
class GuestMemory:
    """One guest's physical memory window plus its allocation state."""

    guest_id: int
    mem: PhysMem
    base_hpa: int
    mem_mode: str  # "shadow" or "tdp"
    os_alloc: FrameAllocator
    pool: ReservedPagePool
    tdp_root: PageTableRoot | None = None


@dataclass
class ProcessSpace:
    """A guest process's address space: its own table plus the shadow."""

    pid: int
    guest: GuestMemory
    guest_root: PageTableRoot
    shadow_root: PageTableRoot | None
    va_next: int = 0x4000_0000  # bump allocator for driver-requested ranges
    va_limit: int = 0xC000_0000
    driver_mappings: dict[int, int] = field(default_factory=dict)  # gva page -> hpa page
    _va_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def cr3(self) -> int:
        """The root pfn, as planted in the virtual CR3 register."""
        return self.guest_root.root_pfn

    def alloc_va_range(self, length: int) -> int:
        """Reserve a page-aligned gva range for a driver-initiated map."""
        pages = (length + PAGE_SIZE - 1) // PAGE_SIZE
        with self._va_lock:
            base = self.va_next
            if base + pages * PAGE_SIZE > self.va_limit:
                raise PoolExhausted("guest virtual address space exhausted")
            self.va_next = base + pages * PAGE_SIZE
            return base


class MemoryVirtualizer:
    """Host memory, per-guest slots, and all table construction.

    Guest slots are carved linearly from host memory after a host-private
    region, so gpa -> hpa is a single base offset per guest.
    """

    DEFAULT_HOST_BYTES = 64 * 1024 * 1024
    DEFAULT_GUEST_BYTES = 16 * 1024 * 1024
    HOST_PRIVATE_BYTES = 16 * 1024 * 1024
    KERNEL_PAGES = 64
    POOL_GPA_PAGES = 64
    POOL_PT_PAGES = 64

    def __init__(self, host_bytes: int = DEFAULT_HOST_BYTES):
        self.host_mem = PhysMem(host_bytes)
        self.host_alloc = FrameAllocator(self.host_mem, 1, self.HOST_PRIVATE_BYTES // PAGE_SIZE - 1)
        self._slots: dict[int, tuple[int, int]] = {}
        self._next_slot = self.HOST_PRIVATE_BYTES
        self._guests: dict[int, GuestMemory] = {}
        self._next_pid = 1
        self.host_kernel_root = self._build_host_table()

    def _build_host_table(self) -> PageTableRoot:
        root = PageTableRoot(TableKind.HOST, self.host_alloc.alloc())
        editor = TableEditor(self.host_mem, root, self.host_alloc.alloc)
        for i in range(self.KERNEL_PAGES):
            page = self.host_alloc.alloc()
            self.host_mem.write(page * PAGE_SIZE, bytes([i & 0xFF]) * 16)
            editor.map(KERNEL_BASE + i * PAGE_SIZE, page)
        return root

    def guest_base_offset(self, guest_id: int) -> int:
        return self._slots[guest_id][0]

    def guest_memory(self, guest_id: int) -> GuestMemory:
        return self._guests[guest_id]

    def add_guest(self, guest_id: int, mem_mode: str,
                  size_bytes: int = DEFAULT_GUEST_BYTES) -> GuestMemory:
        if mem_mode not in ("shadow", "tdp"):
            raise ValueError(f"unknown memory mode {mem_mode!r}")
        base = self._next_slot
        if base + size_bytes > self.host_mem.size_bytes:
            raise OutOfRange("host memory cannot fit another guest slot")
        self._next_slot = base + size_bytes
        self._slots[guest_id] = (base, size_bytes)
        mem = PhysMem(size_bytes, backing=self.host_mem.backing, base=base)
        n_pages = size_bytes // PAGE_SIZE
        # Top pool pages are hypervisor-reserved and invisible to the guest
        # OS allocator; the pt pool is donated out of ordinary guest pages.
        os_alloc = FrameAllocator(mem, 1, n_pages - 1 - self.POOL_GPA_PAGES)
        gpa_pool = list(range(n_pages - self.POOL_GPA_PAGES, n_pages))
        pt_pool = [os_alloc.alloc() for _ in range(self.POOL_PT_PAGES)]
        guest = GuestMemory(
            guest_id=guest_id, mem=mem, base_hpa=base, mem_mode=mem_mode,
            os_alloc=os_alloc, pool=ReservedPagePool(gpa_pool, pt_pool),
        )
        if mem_mode == "tdp":
            guest.tdp_root = self._build_tdp(guest)
        self._guests[guest_id] = guest
        return guest

    def _build_tdp(self, guest: GuestMemory) -> PageTableRoot:
        """TDP table mapping the guest's whole slot at its linear offset."""
        root = PageTableRoot(TableKind.TDP, self.host_alloc.alloc())
        editor = TableEditor(self.host_mem, root, self.host_alloc.alloc)
        base_pfn = guest.base_hpa >> PAGE_SHIFT
        for gpa_pfn in range(guest.mem.n_pages):
            editor.map(gpa_pfn << PAGE_SHIFT, base_pfn + gpa_pfn)
        return root

    def gpa_to_hpa(self, gpa: Gpa, guest_id: int) -> Hpa:
        """Linear memory-slot translation; TDP walks must agree for
        ordinary guest memory (cross-checked in tests)."""
        base, size = self._slots[guest_id]
        if not 0 <= gpa < size:
            raise OutOfRange(f"gpa {gpa:#x} beyond guest slot of {size:#x}")
        return Hpa(base + gpa)

    def create_process(self, guest: GuestMemory) -> ProcessSpace:
        pid = self._next_pid
        self._next_pid += 1
        guest_root = PageTableRoot(TableKind.GUEST, guest.os_alloc.alloc(), pid)
        shadow_root = None
        if guest.mem_mode == "shadow":
            shadow_root = PageTableRoot(TableKind.SHADOW, self.host_alloc.alloc(), pid)
        return ProcessSpace(pid=pid, guest=guest, guest_root=guest_root, shadow_root=shadow_root)

    def map_process_page(self, space: ProcessSpace, gva: Gva, *, writable: bool = True) -> Gpa:
        """Guest-OS mapping of one fresh data page at ``gva``.

        Keeps the shadow table in sync under shadow paging; under TDP the
        prebuilt slot table already covers the new page.
        """
        guest = space.guest
        data_pfn = guest.os_alloc.alloc()
        editor = TableEditor(guest.mem, space.guest_root, guest.os_alloc.alloc)
        editor.map(gva, data_pfn, writable=writable)
        if space.shadow_root is not None:
            hpa = self.gpa_to_hpa(Gpa(data_pfn << PAGE_SHIFT), guest.guest_id)
            shadow = TableEditor(self.host_mem, space.shadow_root, self.host_alloc.alloc)
            shadow.map(gva, hpa >> PAGE_SHIFT, writable=writable)
        return Gpa(data_pfn << PAGE_SHIFT)

    def map_region(self, space: ProcessSpace, gva: Gva, n_pages: int) -> None:
        for i in range(n_pages):
            self.map_process_page(space, Gva(gva + i * PAGE_SIZE))

    def map_page_into_guest(self, space: ProcessSpace, gva: Gva, hpa: Hpa, mode: str,
                            cache: TranslationCache | None = None) -> None:
        """Backend-created mapping of a device or system page at ``gva``.

        Shadow mode points the shadow table at ``hpa`` and the guest table
        at a fresh hypervisor-reserved gpa page; TDP mode points the guest
        table at the fresh gpa and the TDP table from that gpa to ``hpa``.
        Guest-table nodes come from the donated pool.
        """
        if gva & PAGE_MASK:
            raise ValueError("gva must be page aligned")
        guest = space.guest
        guest_editor = TableEditor(guest.mem, space.guest_root, guest.pool.take_pt_page)
        if guest_editor.is_mapped(gva):
            raise AlreadyMapped(f"driver bug: {gva:#010x} is already mapped")
        reserved_gpa_pfn = guest.pool.take_gpa_page()
        if mode == "shadow":
            if space.shadow_root is None:
                raise ValueError("shadow-mode map for a guest without shadow tables")
            shadow = TableEditor(self.host_mem, space.shadow_root, self.host_alloc.alloc)
            shadow.map(gva, hpa >> PAGE_SHIFT, replace=True)
        elif mode == "tdp":
            if guest.tdp_root is None:
                raise ValueError("tdp-mode map for a guest without a TDP table")
            tdp = TableEditor(self.host_mem, guest.tdp_root, self.host_alloc.alloc)
            tdp.map(reserved_gpa_pfn << PAGE_SHIFT, hpa >> PAGE_SHIFT, replace=True)
        else:
            raise ValueError(f"unknown map mode {mode!r}")
        guest_editor.map(gva, reserved_gpa_pfn)
        space.driver_mappings[gva >> PAGE_SHIFT] = hpa >> PAGE_SHIFT
        if cache is not None:
            cache.flush_page(gva >> PAGE_SHIFT)

    def translator(self, space: ProcessSpace, cache: TranslationCache | None = None,
                   use_cache: bool = True) -> "ProcessTranslator":
        if cache is None:
            cache = TranslationCache()
        return ProcessTranslator(self, space, cache, use_cache=use_cache)


class ProcessTranslator:
    """Software gva -> hpa translation for one guest process.

    Honors the guest's memory virtualization: under shadow paging the
    shadow table is walked directly; under TDP the guest tables give the
    gpa and the TDP table finishes the job.  For pages the guest OS
    mapped itself both routes equal ``gpa_to_hpa(walk_guest(gva))``.
    Results are cached in a small FIFO, one cache per process.
    """

    def __init__(self, memv: MemoryVirtualizer, space: ProcessSpace,
                 cache: TranslationCache, use_cache: bool = True):
        self._memv = memv
        self.space = space
        self.cache = cache
        self.use_cache = use_cache

    def translate(self, gva: Gva) -> Hpa:
        page, off = gva >> PAGE_SHIFT, gva & PAGE_MASK
        if self.use_cache:
            hit = self.cache.lookup(page)
            if hit is not None:
                return Hpa((hit << PAGE_SHIFT) | off)
        hpa_page = self._resolve_page(gva)
        if self.use_cache:
            self.cache.insert(page, hpa_page)
        return Hpa((hpa_page << PAGE_SHIFT) | off)

    def _resolve_page(self, gva: Gva) -> int:
        space = self.space
        if space.guest.mem_mode == "shadow":
            return walk(self._memv.host_mem, space.shadow_root.root_pfn, gva)
        gpa = walk_guest(gva, space.guest_root, space.guest.mem)
        return walk(self._memv.host_mem, space.guest.tdp_root.root_pfn, gpa)


def copy_user_buffer(direction: str, gva: Gva, length: int, host_buf,
                     *, translator: ProcessTranslator, host_mem: PhysMem) -> int:
    """Copy ``length`` bytes between a host buffer and guest process memory.

    The address translation is performed once per page touched.  On a
    fault the raised PageFault carries how many bytes were copied before
    the failing page.
    """
    if direction not in ("to_guest", "from_guest"):
        raise ValueError(f"unknown direction {direction!r}")
    copied = 0
    while copied < length:
        cur = gva + copied
        chunk = min(length - copied, PAGE_SIZE - (cur & PAGE_MASK))
        try:
            hpa = translator.translate(Gva(cur))
        except PageFault as fault:
            fault.bytes_copied = copied
            raise
        if direction == "to_guest":
            host_mem.write(hpa, bytes(host_buf[copied : copied + chunk]))
        else:
            host_buf[copied : copied + chunk] = host_mem.read(hpa, chunk)
        copied += chunk
    return copied


class HybridTopLevel:
    """Cached per-process merge of shadow (user) and host (kernel) tops.

    The merged table has the user entries 0-2 of the process's shadow
    table and the kernel entry 3 of the host table.  It is built once
    and only rebuilt when either source top level changes, which the
    snapshot of source entry words detects.
    """

    def __init__(self, host_mem: PhysMem, host_alloc: FrameAllocator):
        self._host_mem = host_mem
        self._host_alloc = host_alloc
        self._root: PageTableRoot | None = None
        self._snapshot: tuple[int, ...] | None = None

    def _source_words(self, shadow_root: PageTableRoot, host_root: PageTableRoot) -> tuple[int, ...]:
        words = [self._host_mem.read_word(shadow_root.root_pfn, i) for i in range(3)]
        words.append(self._host_mem.read_word(host_root.root_pfn, 3))
        return tuple(words)

    def build(self, shadow_root: PageTableRoot, host_root: PageTableRoot) -> PageTableRoot:
        if shadow_root.kind is not TableKind.SHADOW:
            raise TdpUnsupported(
                "hybrid top level needs a shadow table; TDP guests have none"
            )
        if host_root.kind is not TableKind.HOST:
            raise ValueError("kernel entries must come from a host table")
        words = self._source_words(shadow_root, host_root)
        if self._root is not None and words == self._snapshot:
            return self._root
        if self._root is None:
            self._root = PageTableRoot(
                TableKind.HYBRID, self._host_alloc.alloc(), shadow_root.owner_process
            )
        for i in range(TOP_ENTRIES):
            self._host_mem.write_word(self._root.root_pfn, i, words[i])
        self._snapshot = words
        return self._root


def build_hybrid_top_level(shadow_root: PageTableRoot, host_root: PageTableRoot,
                           host_mem: PhysMem, host_alloc: FrameAllocator) -> PageTableRoot:
    """One-shot hybrid build without per-process caching."""
    return HybridTopLevel(host_mem, host_alloc).build(shadow_root, host_root)


def resolve_hybrid(va: int, root: PageTableRoot, host_mem: PhysMem) -> Hpa:
    """MMU-style walk of a merged table; trapping entries exit to the shim."""
    if root.kind is not TableKind.HYBRID:
        raise ValueError(f"resolve_hybrid needs a hybrid root, got {root.kind}")
    pfn = walk(host_mem, root.root_pfn, va)
    return Hpa((pfn << PAGE_SHIFT) | (va & PAGE_MASK))


def resolve_hybrid_with_fixup(va: int, root: PageTableRoot, host_mem: PhysMem,
                              shim: Callable[[TrapExit], None]) -> Hpa:
    """Resolve, letting the hypervisor shim fix one trap; a second trap
    on the same address is a hard error."""
    try:
        return resolve_hybrid(va, root, host_mem)
    except TrapExit as trap:
        shim(trap)
    try:
        return resolve_hybrid(va, root, host_mem)
    except TrapExit as trap:
        raise TrapFixupFailed(f"still trapping at {va:#010x} after shim fixup") from trap
