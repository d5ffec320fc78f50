"""Range-based memory translation for NPU cores, with a page-based baseline.

Each core owns a range translation table (RTT) of variable-size virtual to
physical ranges, sorted by virtual address.  Lookups start at the current
entry cursor and use a per-entry ``last_v`` hint (the entry that followed it
in the previous iteration) before falling back to a circular scan.
"""

from __future__ import annotations

import bisect
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import OverlappingRanges, PermissionDenied, TranslationFault

ADDR_BITS = 48
SIZE_BITS = 32
RTT_ENTRY_BITS = 144
PAGE_SIZE = 4096


@dataclass
class RttEntry:
    vaddr: int
    paddr: int
    size: int
    perms: frozenset = frozenset({"read", "write"})
    last_v: int | None = None

    def __post_init__(self):
        if self.size <= 0 or self.size >= 1 << SIZE_BITS:
            raise ValueError(f"range size {self.size} must be in (0, 2**32)")
        for base in (self.vaddr, self.paddr):
            if base < 0 or base + self.size > 1 << ADDR_BITS:
                raise ValueError("range wraps the 48-bit address space")
        self.perms = frozenset(self.perms)

    def covers(self, vaddr: int) -> bool:
        return self.vaddr <= vaddr < self.vaddr + self.size

    @property
    def vend(self) -> int:
        return self.vaddr + self.size


class RangeTranslationTable:
    def __init__(self, entries: list):
        self.entries = entries
        self.rtt_base = 0
        self.rtt_end = len(entries)
        self.rtt_cur = 0
        self._starts = [e.vaddr for e in entries]

    def __len__(self):
        return len(self.entries)

    def reset_hints(self):
        for e in self.entries:
            e.last_v = None
        self.rtt_cur = self.rtt_base

    def find(self, vaddr: int) -> int:
        """Binary-search lookup; independent of the cursor machinery."""
        i = bisect.bisect_right(self._starts, vaddr) - 1
        if i < 0 or not self.entries[i].covers(vaddr):
            raise TranslationFault(f"vaddr {vaddr:#x} not covered by any range")
        return i

    def to_dict(self) -> list:
        return [{"vaddr": e.vaddr, "paddr": e.paddr, "size": e.size, "perms": sorted(e.perms)}
                for e in self.entries]


def build_rtt(blocks) -> RangeTranslationTable:
    """Sorted RTT from ``(vaddr, paddr, size[, perms])`` tuples."""
    entries = []
    for b in blocks:
        perms = b[3] if len(b) > 3 else ("read", "write")
        entries.append(RttEntry(b[0], b[1], b[2], frozenset(perms)))
    entries.sort(key=lambda e: e.vaddr)
    for a, b in zip(entries, entries[1:]):
        if b.vaddr < a.vend:
            raise OverlappingRanges(f"ranges at {a.vaddr:#x} and {b.vaddr:#x} overlap")
    return RangeTranslationTable(entries)


@dataclass
class Lookup:
    index: int
    paddr: int
    scan_steps: int


def rtt_lookup(table: RangeTranslationTable, vaddr: int) -> Lookup:
    """Cursor lookup: current entry, then its ``last_v`` hint, then a circular scan.

    ``scan_steps`` counts the extra entries fetched: 0 when the current entry
    covers ``vaddr``, 1 for a correct hint or an immediate next-entry hit.
    A stale hint costs one fetch before the scan starts.
    """
    n = len(table.entries)
    if n == 0:
        raise TranslationFault("empty range table")
    cur = table.rtt_cur
    entries = table.entries
    e = entries[cur]
    if e.covers(vaddr):
        return Lookup(cur, e.paddr + vaddr - e.vaddr, 0)
    steps = 0
    if e.last_v is not None:
        steps += 1
        hint = entries[e.last_v]
        if hint.covers(vaddr):
            table.rtt_cur = e.last_v
            return Lookup(e.last_v, hint.paddr + vaddr - hint.vaddr, steps)
    i = cur
    span = table.rtt_end - table.rtt_base
    for _ in range(span - 1):
        i += 1
        if i >= table.rtt_end:
            i = table.rtt_base
        steps += 1
        if entries[i].covers(vaddr):
            e.last_v = i
            table.rtt_cur = i
            return Lookup(i, entries[i].paddr + vaddr - entries[i].vaddr, steps)
    raise TranslationFault(f"vaddr {vaddr:#x} not covered by any range")


@dataclass
class TranslationCosts:
    """Stall cycles charged on translation misses."""

    range_miss_cycles: int = 20     # fetch of the resolved RTT entry
    range_step_cycles: int = 20     # each extra entry scanned
    page_walk_cycles: int = 100     # 3-level walk
    page_size: int = PAGE_SIZE


class LruTlb:
    """Fully associative LRU set of translation keys."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("TLB capacity must be positive")
        self.capacity = capacity
        self.resident: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def touch(self, key) -> bool:
        if key in self.resident:
            self.resident.move_to_end(key)
            self.hits += 1
            return True
        self.misses += 1
        self.resident[key] = True
        if len(self.resident) > self.capacity:
            self.resident.popitem(last=False)
        return False

    def flush(self):
        self.resident.clear()


class RangeTlb(LruTlb):
    entry_bits = RTT_ENTRY_BITS


def _range_access(tlb: RangeTlb, table: RangeTranslationTable, vaddr: int,
                  costs: TranslationCosts):
    """Returns ``(paddr, stall, entry_index, scan_steps, hit)``."""
    for idx in reversed(tlb.resident):
        e = table.entries[idx]
        if e.covers(vaddr):
            tlb.touch(idx)
            table.rtt_cur = idx
            return e.paddr + vaddr - e.vaddr, 0, idx, 0, True
    found = rtt_lookup(table, vaddr)
    tlb.touch(found.index)
    stall = costs.range_miss_cycles + found.scan_steps * costs.range_step_cycles
    return found.paddr, stall, found.index, found.scan_steps, False


def range_tlb_access(tlb: RangeTlb, table: RangeTranslationTable, vaddr: int,
                     costs: TranslationCosts = TranslationCosts()):
    """Translate through the range TLB; returns ``(paddr, stall_cycles)``."""
    paddr, stall, _idx, _steps, _hit = _range_access(tlb, table, vaddr, costs)
    return paddr, stall


class PageTable:
    """Fixed-size page map over the same blocks as an RTT.

    Page table entries are derived from the block list on demand; every
    block must be page aligned.
    """

    def __init__(self, blocks, page_size: int = PAGE_SIZE):
        self.page_size = page_size
        blocks = sorted((b[0], b[1], b[2], frozenset(b[3]) if len(b) > 3 else frozenset({"read", "write"}))
                        for b in blocks)
        for vaddr, paddr, size, _ in blocks:
            if vaddr % page_size or paddr % page_size or size % page_size:
                raise ValueError("page-table blocks must be page aligned")
        for a, b in zip(blocks, blocks[1:]):
            if b[0] < a[0] + a[2]:
                raise OverlappingRanges(f"blocks at {a[0]:#x} and {b[0]:#x} overlap")
        self._blocks = blocks
        self._starts = [b[0] for b in blocks]

    @classmethod
    def from_rtt(cls, table: RangeTranslationTable, page_size: int = PAGE_SIZE) -> "PageTable":
        return cls([(e.vaddr, e.paddr, e.size, e.perms) for e in table.entries], page_size)

    def __len__(self):
        return sum(b[2] for b in self._blocks) // self.page_size

    def lookup(self, vaddr: int):
        i = bisect.bisect_right(self._starts, vaddr) - 1
        if i >= 0:
            base, pbase, size, perms = self._blocks[i]
            if vaddr < base + size:
                return pbase + vaddr - base, perms
        raise TranslationFault(f"vaddr {vaddr:#x} not mapped")


def page_tlb_access(tlb: LruTlb, pages: PageTable, vaddr: int,
                    costs: TranslationCosts = TranslationCosts()):
    """Translate through a page TLB; returns ``(paddr, stall_cycles)``."""
    paddr, _perms = pages.lookup(vaddr)
    hit = tlb.touch(vaddr // pages.page_size)
    return paddr, 0 if hit else costs.page_walk_cycles


# ---------------------------------------------------------------------------
# DMA-level translation

@dataclass
class DmaTranslation:
    segments: list      # (paddr, len), in virtual-address order
    stall_cycles: int
    misses: int
    scan_steps: int = 0


class RangeTranslator:
    """Per-core range translation: RTT plus range TLB."""

    kind = "range"

    def __init__(self, table: RangeTranslationTable, tlb_entries: int = 4,
                 costs: TranslationCosts = TranslationCosts()):
        self.table = table
        self.tlb = RangeTlb(tlb_entries)
        self.costs = costs
        self.scan_steps = 0

    def translate(self, vaddr: int, length: int, write: bool = False) -> DmaTranslation:
        return translate_dma(self.table, self.tlb, vaddr, length, write=write, costs=self.costs,
                             stats=self)


class PageTranslator:
    kind = "page"

    def __init__(self, pages: PageTable, tlb_entries: int = 4,
                 costs: TranslationCosts = TranslationCosts()):
        self.pages = pages
        self.tlb = LruTlb(tlb_entries)
        self.costs = costs
        self.scan_steps = 0

    def translate(self, vaddr: int, length: int, write: bool = False) -> DmaTranslation:
        if length <= 0:
            raise ValueError("DMA length must be positive")
        ps = self.pages.page_size
        segs = []
        stall = 0
        misses = 0
        addr, end = vaddr, vaddr + length
        while addr < end:
            paddr, perms = self.pages.lookup(addr)
            if write and "write" not in perms:
                raise PermissionDenied(f"write to read-only page at {addr:#x}")
            _, s = page_tlb_access(self.tlb, self.pages, addr, self.costs)
            stall += s
            misses += s > 0
            n = min(end, (addr // ps + 1) * ps) - addr
            if segs and segs[-1][0] + segs[-1][1] == paddr:
                segs[-1] = (segs[-1][0], segs[-1][1] + n)
            else:
                segs.append((paddr, n))
            addr += n
        return DmaTranslation(segs, stall, misses)


class PhysicalTranslator:
    """Virtualization bypassed: addresses are physical, no stalls."""

    kind = "physical"

    def __init__(self):
        self.tlb = None
        self.scan_steps = 0

    def translate(self, vaddr: int, length: int, write: bool = False) -> DmaTranslation:
        if length <= 0:
            raise ValueError("DMA length must be positive")
        return DmaTranslation([(vaddr, length)], 0, 0)


def translate_dma(table: RangeTranslationTable, tlb: RangeTlb, vaddr: int, length: int, *,
                  write: bool = False, costs: TranslationCosts = TranslationCosts(),
                  stats=None) -> DmaTranslation:
    """Split ``[vaddr, vaddr+length)`` at range boundaries and translate each piece."""
    if length <= 0:
        raise ValueError("DMA length must be positive")
    segs = []
    stall = 0
    misses = 0
    steps = 0
    addr, end = vaddr, vaddr + length
    while addr < end:
        paddr, s, idx, n_steps, hit = _range_access(tlb, table, addr, costs)
        e = table.entries[idx]
        if write and "write" not in e.perms:
            raise PermissionDenied(f"write to read-only range at {e.vaddr:#x}")
        if not hit:
            misses += 1
            steps += n_steps
        stall += s
        n = min(end, e.vend) - addr
        segs.append((paddr, n))
        addr += n
    if stats is not None:
        stats.scan_steps += steps
    return DmaTranslation(segs, stall, misses, steps)


# ---------------------------------------------------------------------------
# bandwidth accounting

@dataclass
class AccessCounter:
    """Bytes moved per monitored window, with an optional cap."""

    window_cycles: int = 1000
    cap_bytes_per_window: int | None = None
    bytes_in_window: int = 0
    window_start: int = 0
    total_bytes: int = 0
    peak_window_bytes: int = 0
    history: dict = field(default_factory=dict)  # window index -> bytes

    def _roll(self, now: int):
        start = now - now % self.window_cycles
        if start != self.window_start:
            self.window_start = start
            self.bytes_in_window = 0

    def window_allowance(self, now: int) -> float:
        """Bytes still admissible in the window containing ``now``."""
        if self.cap_bytes_per_window is None:
            return float("inf")
        used = self.history.get(now // self.window_cycles, 0)
        return max(0, self.cap_bytes_per_window - used)

    def charge(self, now: int, nbytes: int):
        """Record bytes already granted at ``now`` (may be out of time order)."""
        w = now // self.window_cycles
        self.history[w] = self.history.get(w, 0) + nbytes
        self.total_bytes += nbytes
        self.peak_window_bytes = max(self.peak_window_bytes, self.history[w])
        if w * self.window_cycles == self.window_start:
            self.bytes_in_window = self.history[w]


def record_and_throttle(counter: AccessCounter, nbytes: int, now_cycle: int):
    """Admit ``nbytes`` at ``now_cycle`` or return the first cycle of the next window.

    Returns ``None`` when admitted.  A capped request larger than the cap is
    never admitted; callers split transfers into cap-sized pieces.
    """
    if nbytes <= 0:
        raise ValueError("bytes must be positive")
    counter._roll(now_cycle)
    cap = counter.cap_bytes_per_window
    if cap is not None and counter.bytes_in_window + nbytes > cap:
        return counter.window_start + counter.window_cycles
    counter.bytes_in_window += nbytes
    counter.total_bytes += nbytes
    w = counter.window_start // counter.window_cycles
    counter.history[w] = counter.history.get(w, 0) + nbytes
    counter.peak_window_bytes = max(counter.peak_window_bytes, counter.bytes_in_window)
    return None


def throttled_admission(counter: AccessCounter, nbytes: int, now_cycle: int, chunk: int | None = None):
    """Admit a transfer piecewise; returns ``[(cycle, bytes), ...]`` admission times."""
    cap = counter.cap_bytes_per_window
    piece = chunk or (cap if cap is not None else nbytes)
    if cap is not None:
        piece = min(piece, cap)
    out = []
    t = now_cycle
    left = nbytes
    while left > 0:
        n = min(piece, left)
        delayed = record_and_throttle(counter, n, t)
        if delayed is None:
            out.append((t, n))
            left -= n
        else:
            t = delayed
    return out
