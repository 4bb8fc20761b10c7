"""Page tables, walks, the FIFO translation cache, and hybrid merges."""

from __future__ import annotations

import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from devfsim.errors import (
    AlreadyMapped,
    OutOfRange,
    PageFault,
    PoolExhausted,
    TdpUnsupported,
    TrapExit,
    TrapFixupFailed,
)
from devfsim.memvirt import (
    ENTRY_SIZE,
    EntryState,
    FrameAllocator,
    HybridTopLevel,
    KERNEL_BASE,
    MemoryVirtualizer,
    PAGE_SIZE,
    PageTableEntry,
    PageTableRoot,
    PhysMem,
    TableEditor,
    TableKind,
    TranslationCache,
    copy_user_buffer,
    decode_entry,
    encode_entry,
    resolve_hybrid,
    resolve_hybrid_with_fixup,
    walk,
    walk_guest,
)

WORD = struct.Struct("<Q")


def scan_levels(mem: PhysMem, root_pfn: int, va: int):
    """Independent walk oracle: linear scan of every entry at each level,
    using division arithmetic instead of the walker's shifts."""
    wants = [va // 2**30, (va % 2**30) // 2**21, (va % 2**21) // 2**12]
    raw = mem.read(0, mem.size_bytes)
    node = root_pfn
    for level, want in enumerate(wants, start=1):
        limit = 4 if level == 1 else 512
        found = None
        for i in range(limit):
            word = WORD.unpack_from(raw, node * PAGE_SIZE + i * ENTRY_SIZE)[0]
            if i == want:
                found = word
        if found & 0x4:
            return ("trap", level)
        if not found & 0x1:
            return ("fault", level)
        node = found >> 12
    return ("ok", node * PAGE_SIZE + va % PAGE_SIZE)


class TestPhysMem:
    def test_size_must_be_page_multiple(self):
        with pytest.raises(ValueError):
            PhysMem(4097)

    def test_read_write_roundtrip(self):
        mem = PhysMem(4 * PAGE_SIZE)
        mem.write(100, b"hello")
        assert mem.read(100, 5) == b"hello"

    def test_out_of_range(self):
        mem = PhysMem(PAGE_SIZE)
        with pytest.raises(OutOfRange):
            mem.read(PAGE_SIZE - 2, 4)

    def test_window_shares_backing(self):
        host = PhysMem(8 * PAGE_SIZE)
        win = PhysMem(2 * PAGE_SIZE, backing=host.backing, base=4 * PAGE_SIZE)
        win.write(8, b"\xAA\xBB")
        assert host.read(4 * PAGE_SIZE + 8, 2) == b"\xAA\xBB"

    def test_dump_hex_has_one_line_per_32_bytes(self):
        mem = PhysMem(PAGE_SIZE)
        assert len(mem.dump_hex(0).splitlines()) == PAGE_SIZE // 32


class TestEntryCodec:
    @given(pfn=st.integers(0, (1 << 20) - 1),
           state=st.sampled_from(list(EntryState)),
           writable=st.booleans())
    def test_roundtrip(self, pfn, state, writable):
        entry = PageTableEntry(state, pfn, writable)
        assert decode_entry(encode_entry(entry)) == entry


def build_by_hand(mem: PhysMem, root_pfn: int, gva: int, target_pfn: int,
                  mid_pfn: int, leaf_pfn: int):
    """Raw-word table construction, no editor involved."""
    top, mid, leaf = gva >> 30, (gva >> 21) & 0x1FF, (gva >> 12) & 0x1FF
    mem.write_word(root_pfn, top, (mid_pfn << 12) | 0x3)
    mem.write_word(mid_pfn, mid, (leaf_pfn << 12) | 0x3)
    mem.write_word(leaf_pfn, leaf, (target_pfn << 12) | 0x3)


class TestWalkGuest:
    def test_identity_mapping(self):
        mem = PhysMem(64 * PAGE_SIZE)
        alloc = FrameAllocator(mem, 16, 32)
        root = PageTableRoot(TableKind.GUEST, alloc.alloc())
        editor = TableEditor(mem, root, alloc.alloc)
        for page in range(8):
            editor.map(page * PAGE_SIZE, page)
        assert walk_guest(0x0000_3004, root, mem) == 0x0000_3004

    def test_single_mapping_matches_scan_oracle(self):
        # gva page 5 -> gpa page 9, table written by hand
        mem = PhysMem(64 * PAGE_SIZE)
        root = PageTableRoot(TableKind.GUEST, 1)
        build_by_hand(mem, 1, 0x0000_5000, 9, mid_pfn=2, leaf_pfn=3)
        gva = 0x0000_5010
        assert walk_guest(gva, root, mem) == 0x0000_9010
        assert scan_levels(mem, 1, gva) == ("ok", 0x0000_9010)

    def test_empty_table_faults_at_top(self):
        mem = PhysMem(16 * PAGE_SIZE)
        root = PageTableRoot(TableKind.GUEST, 1)
        with pytest.raises(PageFault) as exc:
            walk_guest(0xDEAD_B000, root, mem)
        assert exc.value.level == 1

    def test_fault_levels_two_and_three(self):
        mem = PhysMem(64 * PAGE_SIZE)
        root = PageTableRoot(TableKind.GUEST, 1)
        build_by_hand(mem, 1, 0x0000_5000, 9, mid_pfn=2, leaf_pfn=3)
        with pytest.raises(PageFault) as exc:
            walk_guest(0x0020_0000, root, mem)  # same top, different mid
        assert exc.value.level == 2
        with pytest.raises(PageFault) as exc:
            walk_guest(0x0000_6000, root, mem)  # same leaf table, hole
        assert exc.value.level == 3

    def test_wrong_root_kind_rejected(self):
        mem = PhysMem(16 * PAGE_SIZE)
        with pytest.raises(ValueError):
            walk_guest(0, PageTableRoot(TableKind.SHADOW, 1), mem)


class TestTrappingEntries:
    def test_trapping_only_in_shadow_tables(self):
        mem = PhysMem(64 * PAGE_SIZE)
        alloc = FrameAllocator(mem, 16, 32)
        guest_root = PageTableRoot(TableKind.GUEST, alloc.alloc())
        editor = TableEditor(mem, guest_root, alloc.alloc)
        with pytest.raises(ValueError):
            editor.map(0x1000, 5, state=EntryState.TRAPPING)
        shadow_root = PageTableRoot(TableKind.SHADOW, alloc.alloc())
        shadow = TableEditor(mem, shadow_root, alloc.alloc)
        shadow.map(0x1000, 5, state=EntryState.TRAPPING)
        with pytest.raises(TrapExit):
            walk(mem, shadow_root.root_pfn, 0x1000)


class TestGpaToHpa:
    def test_linear_offset(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        base = memv.guest_base_offset(0)
        assert memv.gpa_to_hpa(0x2000, 0) == base + 0x2000

    def test_out_of_range_at_guest_size(self):
        memv = MemoryVirtualizer()
        guest = memv.add_guest(0, "shadow")
        with pytest.raises(OutOfRange):
            memv.gpa_to_hpa(guest.mem.size_bytes, 0)

    def test_tdp_walk_equals_memslot_for_ordinary_memory(self):
        memv = MemoryVirtualizer()
        guest = memv.add_guest(0, "tdp")
        rng = random.Random(7)
        for _ in range(200):
            gpa = rng.randrange(guest.mem.size_bytes)
            slot = memv.gpa_to_hpa(gpa, 0)
            pfn = walk(memv.host_mem, guest.tdp_root.root_pfn, gpa)
            assert (pfn << 12) | (gpa & 0xFFF) == slot


@pytest.fixture(params=["shadow", "tdp"])
def process_env(request):
    memv = MemoryVirtualizer()
    guest = memv.add_guest(0, request.param)
    space = memv.create_process(guest)
    return memv, guest, space


BUF = 0x2000_0000


class TestTranslate:
    def test_repeat_lookup_hits(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 2)
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        first = tr.translate(BUF + 8)
        hits0 = cache.hits
        again = tr.translate(BUF + 8)
        assert again == first
        assert cache.hits == hits0 + 1

    def test_fifo_capacity_forces_eviction(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 11)
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        for page in range(11):
            tr.translate(BUF + page * PAGE_SIZE)
        misses0 = cache.misses
        tr.translate(BUF)  # page 0 was the oldest, evicted by page 10
        assert cache.misses == misses0 + 1

    def test_looped_workload_hit_rate(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 8)
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        for it in range(1000):
            for page in range(8):
                tr.translate(BUF + page * PAGE_SIZE + (it % PAGE_SIZE))
        assert cache.hits / cache.lookups >= 0.85

    def test_cache_transparency_on_os_mapped_pages(self, process_env):
        memv, guest, space = process_env
        rng = random.Random(3)
        pages = sorted(rng.sample(range(256), 24))
        for page in pages:
            memv.map_process_page(space, BUF + page * PAGE_SIZE)
        cached = memv.translator(space, TranslationCache())
        uncached = memv.translator(space, use_cache=False)
        for page in pages:
            gva = BUF + page * PAGE_SIZE + rng.randrange(PAGE_SIZE)
            expected = memv.gpa_to_hpa(walk_guest(gva, space.guest_root, guest.mem), 0)
            assert cached.translate(gva) == expected
            assert cached.translate(gva) == expected  # hit path agrees too
            assert uncached.translate(gva) == expected

    def test_propagates_page_fault(self, process_env):
        memv, guest, space = process_env
        tr = memv.translator(space)
        with pytest.raises(PageFault):
            tr.translate(0x7000_0000)


class TestCopyUserBuffer:
    def test_zero_length_no_translations(self, process_env):
        memv, guest, space = process_env
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        assert copy_user_buffer("to_guest", BUF, 0, b"", translator=tr,
                                host_mem=memv.host_mem) == 0
        assert cache.lookups == 0

    def test_unaligned_span_translates_once_per_page(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 5)
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        data = bytes(range(256)) * 48  # 12 KiB
        gva = BUF + 0x800  # unaligned start: 12 KiB spans 4 pages
        copied = copy_user_buffer("to_guest", gva, len(data), data,
                                  translator=tr, host_mem=memv.host_mem)
        assert copied == len(data)
        assert cache.lookups == 4

    def test_roundtrip_is_involution(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 3)
        tr = memv.translator(space)
        data = bytes(random.Random(5).randrange(256) for _ in range(3 * PAGE_SIZE))
        copy_user_buffer("to_guest", BUF, len(data), data,
                         translator=tr, host_mem=memv.host_mem)
        back = bytearray(len(data))
        copy_user_buffer("from_guest", BUF, len(data), back,
                         translator=tr, host_mem=memv.host_mem)
        assert bytes(back) == data

    def test_fault_reports_completed_prefix(self, process_env):
        memv, guest, space = process_env
        memv.map_region(space, BUF, 2)  # third page unmapped
        tr = memv.translator(space)
        data = b"\xCC" * (3 * PAGE_SIZE)
        with pytest.raises(PageFault) as exc:
            copy_user_buffer("to_guest", BUF, len(data), data,
                             translator=tr, host_mem=memv.host_mem)
        assert exc.value.bytes_copied == 2 * PAGE_SIZE
        back = bytearray(2 * PAGE_SIZE)
        copy_user_buffer("from_guest", BUF, len(back), back,
                         translator=tr, host_mem=memv.host_mem)
        assert bytes(back) == b"\xCC" * (2 * PAGE_SIZE)

    @settings(max_examples=60, deadline=None)
    @given(start=st.integers(0, PAGE_SIZE - 1), length=st.integers(1, 6 * PAGE_SIZE))
    def test_translation_count_equals_page_span(self, start, length):
        memv = MemoryVirtualizer()
        guest = memv.add_guest(0, "shadow")
        space = memv.create_process(guest)
        memv.map_region(space, BUF, 8)
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        gva = BUF + start
        copy_user_buffer("to_guest", gva, length, bytes(length),
                         translator=tr, host_mem=memv.host_mem)
        span = ((gva + length - 1) // PAGE_SIZE) - (gva // PAGE_SIZE) + 1
        assert cache.lookups == span


class TestMapPageIntoGuest:
    def _device_page(self, memv):
        pfn = memv.host_alloc.alloc()
        memv.host_mem.write(pfn * PAGE_SIZE, b"\xD5" * 64)
        return pfn << 12

    def test_map_then_translate_reads_back(self, process_env):
        memv, guest, space = process_env
        hpa = self._device_page(memv)
        gva = 0x3000_0000
        memv.map_page_into_guest(space, gva, hpa, guest.mem_mode)
        tr = memv.translator(space)
        assert tr.translate(gva) == hpa
        assert memv.host_mem.read(tr.translate(gva), 4) == b"\xD5" * 4

    def test_fresh_leaf_table_consumes_donated_page(self, process_env):
        memv, guest, space = process_env
        before = len(guest.pool.free_guest_pt_pages)
        memv.map_page_into_guest(space, 0x3000_0000, self._device_page(memv),
                                 guest.mem_mode)
        # top never existed for this range: mid and leaf nodes both drawn
        assert len(guest.pool.free_guest_pt_pages) == before - 2

    def test_duplicate_map_is_a_driver_bug(self, process_env):
        memv, guest, space = process_env
        gva = 0x3000_0000
        memv.map_page_into_guest(space, gva, self._device_page(memv), guest.mem_mode)
        with pytest.raises(AlreadyMapped):
            memv.map_page_into_guest(space, gva, self._device_page(memv),
                                     guest.mem_mode)

    def test_pool_exhaustion(self, process_env):
        memv, guest, space = process_env
        guest.pool.free_gpa_pages.clear()
        with pytest.raises(PoolExhausted):
            memv.map_page_into_guest(space, 0x3000_0000, self._device_page(memv),
                                     guest.mem_mode)

    def test_shadow_divergence_from_guest_table(self):
        memv = MemoryVirtualizer()
        guest = memv.add_guest(0, "shadow")
        space = memv.create_process(guest)
        hpa = self._device_page(memv)
        gva = 0x3000_0000
        memv.map_page_into_guest(space, gva, hpa, "shadow")
        gpa = walk_guest(gva, space.guest_root, guest.mem)
        shadow_pfn = walk(memv.host_mem, space.shadow_root.root_pfn, gva)
        assert shadow_pfn << 12 == hpa
        assert memv.gpa_to_hpa(gpa, 0) != hpa  # the two tables diverge
        # and ordinary guest-OS pages keep translating unchanged
        memv.map_process_page(space, BUF)
        tr = memv.translator(space)
        assert tr.translate(BUF) == memv.gpa_to_hpa(
            walk_guest(BUF, space.guest_root, guest.mem), 0)

    def test_map_flushes_cached_page(self, process_env):
        memv, guest, space = process_env
        cache = TranslationCache()
        tr = memv.translator(space, cache)
        memv.map_region(space, BUF, 1)
        tr.translate(BUF)
        assert any(page == BUF // PAGE_SIZE for page, _ in cache.entries())
        gva = 0x3000_0000
        tr.translate(BUF)  # keep it warm
        memv.map_page_into_guest(space, gva, self._device_page(memv),
                                 guest.mem_mode, cache=cache)
        assert all(page != gva // PAGE_SIZE for page, _ in cache.entries())


def random_user_shadow(memv, rng, n_pages=40):
    """A shadow table over random user-region pages; returns mappings."""
    space = memv.create_process(memv.guest_memory(0))
    editor = TableEditor(memv.host_mem, space.shadow_root, memv.host_alloc.alloc)
    mappings = {}
    while len(mappings) < n_pages:
        page = rng.randrange(0, KERNEL_BASE // PAGE_SIZE)
        if page in mappings:
            continue
        target = memv.host_alloc.alloc()
        editor.map(page * PAGE_SIZE, target)
        mappings[page] = target
    return space, mappings


class TestHybridMerge:
    def test_user_and_kernel_equivalence(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        rng = random.Random(11)
        space, mappings = random_user_shadow(memv, rng)
        hybrid = HybridTopLevel(memv.host_mem, memv.host_alloc)
        root = hybrid.build(space.shadow_root, memv.host_kernel_root)
        for page, target in mappings.items():
            va = page * PAGE_SIZE + rng.randrange(PAGE_SIZE)
            shadow_pfn = walk(memv.host_mem, space.shadow_root.root_pfn, va)
            assert resolve_hybrid(va, root, memv.host_mem) == (
                (shadow_pfn << 12) | (va & 0xFFF))
        for i in range(memv.KERNEL_PAGES):
            va = KERNEL_BASE + i * PAGE_SIZE + rng.randrange(PAGE_SIZE)
            host_pfn = walk(memv.host_mem, memv.host_kernel_root.root_pfn, va)
            assert resolve_hybrid(va, root, memv.host_mem) == (
                (host_pfn << 12) | (va & 0xFFF))

    def test_tdp_guest_is_unsupported(self):
        memv = MemoryVirtualizer()
        guest = memv.add_guest(0, "tdp")
        hybrid = HybridTopLevel(memv.host_mem, memv.host_alloc)
        with pytest.raises(TdpUnsupported):
            hybrid.build(guest.tdp_root, memv.host_kernel_root)

    def test_unchanged_sources_return_cached_root(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        space, _ = random_user_shadow(memv, random.Random(1), n_pages=4)
        hybrid = HybridTopLevel(memv.host_mem, memv.host_alloc)
        first = hybrid.build(space.shadow_root, memv.host_kernel_root)
        second = hybrid.build(space.shadow_root, memv.host_kernel_root)
        assert second is first

    def test_rebuilds_when_a_source_top_changes(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        space, _ = random_user_shadow(memv, random.Random(2), n_pages=4)
        hybrid = HybridTopLevel(memv.host_mem, memv.host_alloc)
        root = hybrid.build(space.shadow_root, memv.host_kernel_root)
        gva = 0x8000_0000  # top entry 2, previously empty
        editor = TableEditor(memv.host_mem, space.shadow_root, memv.host_alloc.alloc)
        target = memv.host_alloc.alloc()
        editor.map(gva, target)
        rebuilt = hybrid.build(space.shadow_root, memv.host_kernel_root)
        assert rebuilt is root  # same table page, refreshed entries
        assert resolve_hybrid(gva, root, memv.host_mem) == target << 12

    def test_trapping_entry_exits_and_shim_fixes_once(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        space, mappings = random_user_shadow(memv, random.Random(3), n_pages=4)
        page, target = next(iter(mappings.items()))
        va = page * PAGE_SIZE
        editor = TableEditor(memv.host_mem, space.shadow_root, memv.host_alloc.alloc)
        editor.set_leaf_state(va, EntryState.TRAPPING)
        root = HybridTopLevel(memv.host_mem, memv.host_alloc).build(
            space.shadow_root, memv.host_kernel_root)
        with pytest.raises(TrapExit):
            resolve_hybrid(va, root, memv.host_mem)

        def shim(trap):
            editor.set_leaf_state(va, EntryState.PRESENT)

        assert resolve_hybrid_with_fixup(va, root, memv.host_mem, shim) == target << 12

    def test_second_trap_is_a_hard_error(self):
        memv = MemoryVirtualizer()
        memv.add_guest(0, "shadow")
        space, mappings = random_user_shadow(memv, random.Random(4), n_pages=4)
        page = next(iter(mappings))
        va = page * PAGE_SIZE
        editor = TableEditor(memv.host_mem, space.shadow_root, memv.host_alloc.alloc)
        editor.set_leaf_state(va, EntryState.TRAPPING)
        root = HybridTopLevel(memv.host_mem, memv.host_alloc).build(
            space.shadow_root, memv.host_kernel_root)
        with pytest.raises(TrapFixupFailed):
            resolve_hybrid_with_fixup(va, root, memv.host_mem, lambda trap: None)


class FifoModel:
    """Reference FIFO cache: insertion-ordered list, no reorder on hit."""

    def __init__(self, capacity=10):
        self.capacity = capacity
        self.keys: list[int] = []
        self.values: dict[int, int] = {}
        self.hits = 0
        self.misses = 0

    def access(self, key, value):
        if key in self.values:
            self.hits += 1
            return
        self.misses += 1
        if len(self.keys) >= self.capacity:
            evicted = self.keys.pop(0)
            del self.values[evicted]
        self.keys.append(key)
        self.values[key] = value


class TestFifoLaw:
    def test_random_traces_match_model(self):
        rng = random.Random(42)
        for _ in range(200):
            cache = TranslationCache()
            model = FifoModel()
            for _ in range(rng.randrange(5, 60)):
                key = rng.randrange(16)
                if cache.lookup(key) is None:
                    cache.insert(key, key + 100)
                model.access(key, key + 100)
                assert [k for k, _ in cache.entries()] == model.keys
            assert (cache.hits, cache.misses) == (model.hits, model.misses)

    @settings(max_examples=200, deadline=None)
    @given(trace=st.lists(st.integers(0, 14), max_size=80))
    def test_capacity_and_insertion_order(self, trace):
        # Oldest-first eviction means the cache holds exactly the most
        # recent min(10, total) insertions, in insertion order.
        cache = TranslationCache()
        inserted = []
        for key in trace:
            if cache.lookup(key) is None:
                cache.insert(key, key)
                inserted.append(key)
        assert len(cache) <= 10
        live = [k for k, _ in cache.entries()]
        assert live == inserted[-min(10, len(inserted)):]
