"""Physical chip model: mesh NoC, per-core engines, SRAM zones and HBM.

All timing is computed by reserving shared resources in the order requests
arrive.  Links, send engines, DMA engines and compute units are exclusive
FIFO resources tracked by a "free at" cycle; HBM bandwidth is a calendar of
fixed-size buckets that several DMA streams may share.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import asdict, dataclass, field, fields

from .errors import MetaZoneOverflow, MetaZoneViolation, SramOverflow, UnmappedVirtualCore
from .topology import Topology
from .vchunk import AccessCounter, PhysicalTranslator, TranslationCosts
from .vrouter import constrained_route, dor_route

log = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB


@dataclass
class ChipConfig:
    """Chip parameters.  Defaults approximate the 36-core simulated SoC."""

    width: int = 6
    height: int = 6
    sram_per_core: int = 30 * MiB
    meta_zone_bytes: int = 64 * KiB
    flit_bytes: int = 16
    link_cycles_per_flit: int = 1
    hop_latency: int = 1
    packet_bytes: int = 2048
    packet_translation_cycles: int = 2
    rt_lookup_cycles: int = 8
    hbm_bytes: int = 16 * GiB
    hbm_bytes_per_cycle: int = 720
    hbm_latency: int = 100
    dma_bytes_per_cycle: int = 32
    macs_per_cycle: int = 16384
    sram_bytes_per_cycle: int = 64
    window_cycles: int = 1000
    hbm_bucket_cycles: int = 50
    mem_interfaces: str = "west-east"
    controller_core: int = 0
    frequency_mhz: int = 500
    range_tlb_entries: int = 4
    page_tlb_entries: int = 4
    range_miss_cycles: int = 20
    range_step_cycles: int = 20
    page_walk_cycles: int = 25
    page_size: int = 4096
    tdm_switch_cycles: int = 200
    weight_residency: bool = True
    rtt_capacity: int = 64

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("mesh dimensions must be positive")
        if not 0 <= self.meta_zone_bytes < self.sram_per_core:
            raise ValueError("meta zone must be smaller than per-core SRAM")
        rates = ("flit_bytes", "link_cycles_per_flit", "packet_bytes", "hbm_bytes_per_cycle",
                 "dma_bytes_per_cycle", "macs_per_cycle", "sram_bytes_per_cycle", "window_cycles",
                 "hbm_bucket_cycles", "frequency_mhz", "range_tlb_entries", "page_tlb_entries",
                 "page_size", "rtt_capacity")
        for name in rates:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.controller_core < self.width * self.height:
            raise ValueError("controller_core outside the mesh")

    @classmethod
    def sim(cls, **overrides) -> "ChipConfig":
        return cls(**overrides)

    @classmethod
    def fpga(cls, **overrides) -> "ChipConfig":
        base = dict(width=4, height=2, sram_per_core=512 * KiB, meta_zone_bytes=16 * KiB,
                    hbm_bytes=1 * GiB, hbm_bytes_per_cycle=16, dma_bytes_per_cycle=16,
                    macs_per_cycle=256, sram_bytes_per_cycle=16, frequency_mhz=1000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ChipConfig":
        try:
            return {"sim": cls.sim, "fpga": cls.fpga}[name](**overrides)
        except KeyError:
            raise ValueError(f"unknown chip preset {name!r}") from None

    @property
    def cores(self) -> int:
        return self.width * self.height

    @property
    def weight_zone_bytes(self) -> int:
        return self.sram_per_core - self.meta_zone_bytes

    def translation_costs(self) -> TranslationCosts:
        return TranslationCosts(self.range_miss_cycles, self.range_step_cycles,
                                self.page_walk_cycles, self.page_size)

    def memory_interface_cores(self) -> list:
        if self.mem_interfaces == "west-east":
            cols = sorted({0, self.width - 1})
        elif self.mem_interfaces == "west":
            cols = [0]
        else:
            raise ValueError(f"unknown memory interface layout {self.mem_interfaces!r}")
        return sorted(y * self.width + x for y in range(self.height) for x in cols)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChipConfig":
        d = dict(d)
        preset = d.pop("preset", "sim")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown chip fields: {sorted(unknown)}")
        return cls.preset(preset, **d)


@dataclass(frozen=True)
class KernelOp:
    """A kernel on one core: ``matmul`` dims (m, k, n); ``conv`` dims
    (out_h, out_w, c_in, c_out, k_h, k_w); ``copy`` moves ``bytes_in``."""

    kind: str
    dims: tuple = ()
    bytes_in: int = 0
    bytes_out: int = 0

    def __post_init__(self):
        expected = {"matmul": 3, "conv": 6, "copy": 0}
        if self.kind not in expected:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if len(self.dims) != expected[self.kind] or any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.kind} needs {expected[self.kind]} positive dims, got {self.dims}")
        if self.bytes_in < 0 or self.bytes_out < 0:
            raise ValueError("byte counts must be nonnegative")

    @property
    def macs(self) -> int:
        return math.prod(self.dims) if self.dims else 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "bytes_in": self.bytes_in,
                "bytes_out": self.bytes_out}


def compute_cycles(op: KernelOp, config: ChipConfig) -> int:
    if op.kind == "copy":
        return -(-op.bytes_in // config.sram_bytes_per_cycle)
    return -(-op.macs // config.macs_per_cycle)


class EventQueue:
    """Min-heap keyed by (cycle, insertion sequence)."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, cycle: int, item):
        heapq.heappush(self._heap, (cycle, self._seq, item))
        self._seq += 1

    def pop(self):
        cycle, _seq, item = heapq.heappop(self._heap)
        return cycle, item

    def peek_cycle(self):
        return self._heap[0][0]

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)


@dataclass
class VmContext:
    """Everything the chip needs to execute one VM's work.

    ``placement`` maps virtual to physical cores and may be many-to-one when
    a partition time-shares cores.  ``virtualized=False`` bypasses routing
    lookups, packet translation and address translation.
    """

    vmid: int
    placement: dict
    virtualized: bool = True
    table: object = None                 # RoutingTable, when confined routing is deployed
    translators: dict = field(default_factory=dict)
    counter: AccessCounter = field(default_factory=AccessCounter)
    memsync_only: bool = False           # UVM: no inter-core links
    scratch_vaddr: int = 0
    context_bytes: dict = field(default_factory=dict)  # vcore -> weight bytes

    def pcore(self, vcore: int) -> int:
        try:
            return self.placement[vcore]
        except KeyError:
            raise UnmappedVirtualCore(f"vm {self.vmid}: virtual core {vcore} not mapped") from None

    def translator(self, pcore: int):
        t = self.translators.get(pcore)
        if t is None:
            t = self.translators[pcore] = PhysicalTranslator()
        return t

    def shared_cores(self) -> dict:
        by_p = {}
        for v, p in sorted(self.placement.items()):
            by_p.setdefault(p, []).append(v)
        return by_p


@dataclass
class VmStats:
    compute_cycles: int = 0
    noc_busy_cycles: int = 0
    stall_cycles: int = 0
    tlb_misses: int = 0
    scan_steps: int = 0
    hbm_bytes: int = 0
    dma_bytes: int = 0
    dispatch_lookups: int = 0
    packets: int = 0
    interference_hops: int = 0
    tdm_switches: int = 0
    tdm_switch_cycles: int = 0
    first_dma_start: int | None = None
    warmup_end: int = 0
    first_kernel_start: int | None = None
    last_kernel_end: int = 0
    last_event: int = 0
    kernels: int = 0


@dataclass
class TransferResult:
    arrival: int
    inject_done: int
    hops: int
    packets: int
    occupancy: list


@dataclass
class DmaResult:
    start: int
    finish: int
    engine_free: int
    stall_cycles: int
    misses: int
    hbm_bytes: int
    resident_hit: bool = False


class Chip:
    """Mutable resource state of one chip for one simulation."""

    def __init__(self, config: ChipConfig | None = None, trace: bool = False):
        self.config = config or ChipConfig()
        c = self.config
        self.topology = Topology.mesh(c.width, c.height, c.memory_interface_cores())
        self.trace = trace
        self.vms: dict = {}
        self.meta_used = {p: {} for p in range(c.cores)}
        self.hyper_regs = {p: {} for p in range(c.cores)}
        self.hyper_mode = False
        self.violations: list = []
        self.reset()

    def reset(self):
        c = self.config
        self.link_free: dict = {}
        self.send_free = [0] * c.cores
        self.dma_free = [0] * c.cores
        self.compute_free = [0] * c.cores
        self.last_dst: dict = {}
        self.last_ctx = [None] * c.cores
        self.hbm_used: dict = {}
        self.resident = {}          # (pcore, vmid, vcore) -> {key: bytes}
        self.resident_ready = {}    # ((pcore, vmid, vcore), key) -> cycle the data lands
        self.occupancy: list = []
        self.stats: dict = {vmid: VmStats() for vmid in self.vms}
        self.core_busy = [0] * c.cores

    # -- VM attachment and meta-zone protection --------------------------

    def attach(self, ctx: VmContext):
        self.vms[ctx.vmid] = ctx
        self.stats.setdefault(ctx.vmid, VmStats())

    def detach(self, vmid: int):
        self.vms.pop(vmid, None)
        self.stats.pop(vmid, None)

    def deploy_meta(self, pcore: int, vmid: int, nbytes: int, regs: dict | None = None):
        """Hyper-mode write of a VM's tables into a core's meta-zone."""
        used = sum(v for k, v in self.meta_used[pcore].items() if k != vmid)
        if used + nbytes > self.config.meta_zone_bytes:
            raise MetaZoneOverflow(
                f"core {pcore}: {used + nbytes} B of tables exceed the {self.config.meta_zone_bytes} B meta-zone")
        self.meta_used[pcore][vmid] = nbytes
        if regs:
            self.hyper_regs[pcore].update(regs)

    def clear_meta(self, pcore: int, vmid: int):
        self.meta_used[pcore].pop(vmid, None)
        if not self.meta_used[pcore]:
            self.hyper_regs[pcore].clear()

    def write_sram(self, pcore: int, offset: int, nbytes: int, *, hyper: bool = False):
        """Guest (or hyper-mode) write into core SRAM; the meta-zone is hyper-only."""
        if offset < 0 or nbytes < 0 or offset + nbytes > self.config.sram_per_core:
            raise SramOverflow(f"core {pcore}: write [{offset}, {offset + nbytes}) outside SRAM")
        if offset < self.config.meta_zone_bytes and not hyper:
            entry = {"core": pcore, "offset": offset, "bytes": nbytes}
            self.violations.append(entry)
            log.warning("rejected guest write into meta-zone: %s", entry)
            raise MetaZoneViolation(f"core {pcore}: guest write at {offset} hits the meta-zone")

    # -- instruction dispatch --------------------------------------------

    def dispatch_hops(self, pcore: int) -> int:
        w = self.config.width
        cx, cy = self.config.controller_core % w, self.config.controller_core // w
        return 1 + abs(pcore % w - cx) + abs(pcore // w - cy)

    def dispatch_instruction(self, ctx: VmContext, v_core: int, prev_vcore: int | None = None):
        """Returns ``(pcore, issue_cycles, travel_cycles)`` for one instruction.

        Issue takes one cycle plus a routing-table lookup unless the previous
        instruction went to the same virtual core.
        """
        pcore = ctx.pcore(v_core)
        lookup = ctx.virtualized and v_core != prev_vcore
        issue = 1 + (self.config.rt_lookup_cycles if lookup else 0)
        return pcore, issue, self.dispatch_hops(pcore) * self.config.hop_latency

    # -- NoC ---------------------------------------------------------------

    def route(self, ctx: VmContext | None, src: int, dst: int) -> list:
        if ctx is not None and ctx.table is not None and ctx.table.directions and src != dst:
            return constrained_route(src, dst, ctx.table)
        return dor_route(src, dst, self.config.width, self.config.height)

    def noc_transfer(self, src: int, dst: int, nbytes: int, path: list | None = None, now: int = 0, *,
                     virtualized: bool = False, lookup: bool = True, tag=None) -> TransferResult:
        """Move ``nbytes`` from ``src`` to ``dst`` as routing packets.

        Every packet reserves each link of its path (plus the destination's
        ejection port) for its serialization time; the head advances one hop
        per ``hop_latency``.  Virtualized transfers pay a routing-table lookup
        and a per-packet header translation that overlaps the previous
        packet's injection.
        """
        c = self.config
        if path is None:
            path = dor_route(src, dst, c.width, c.height)
        if path[0] != src or path[-1] != dst:
            raise ValueError("path must start at src and end at dst")
        hops = len(path) - 1
        links = list(zip(path, path[1:])) + [("ej", dst)] if hops else [("loc", src)]
        start = now + (c.rt_lookup_cycles if virtualized and lookup else 0)
        npk = -(-nbytes // c.packet_bytes)
        translated_at = start
        inject_free = start
        arrival = start
        occupancy = []
        left = nbytes
        for _ in range(npk):
            pb = min(c.packet_bytes, left)
            left -= pb
            ser = -(-pb // c.flit_bytes) * c.link_cycles_per_flit
            if virtualized:
                translated_at += c.packet_translation_cycles
            s = max(translated_at, inject_free)
            for j, link in enumerate(links):
                if j:
                    s += c.hop_latency
                s = max(s, self.link_free.get(link, 0))
                self.link_free[link] = s + ser
                occupancy.append((link, s, s + ser))
                if j == 0:
                    inject_free = s + ser
            arrival = s + ser
        if self.trace:
            self.occupancy.extend((link, a, b, tag) for link, a, b in occupancy)
        return TransferResult(arrival, inject_free, hops, npk, occupancy)

    def handshake(self, src: int, dst: int, path: list, now: int, tag=None) -> int:
        """One round trip of a single-flit control packet; returns completion cycle."""
        f = self.config.flit_bytes
        there = self.noc_transfer(src, dst, f, path, now, tag=tag)
        back = self.noc_transfer(dst, src, f, list(reversed(path)), there.arrival, tag=tag)
        return back.arrival

    # -- HBM / DMA -----------------------------------------------------------

    def _stream_hbm(self, counter: AccessCounter, t: int, nbytes: int) -> int:
        """Stream ``nbytes`` starting at ``t``; returns the cycle the last byte moves.

        Each bucket grants at most the engine rate, the HBM capacity left in
        that bucket, and the VM's remaining per-window allowance.
        """
        c = self.config
        rate = c.dma_bytes_per_cycle
        B = c.hbm_bucket_cycles
        cap_bucket = c.hbm_bytes_per_cycle * B
        remaining = nbytes
        cur = t
        while remaining > 0:
            b = cur // B
            b_end = (b + 1) * B
            grant = min(remaining, (b_end - cur) * rate, cap_bucket - self.hbm_used.get(b, 0),
                        counter.window_allowance(cur))
            if grant > 0:
                self.hbm_used[b] = self.hbm_used.get(b, 0) + grant
                counter.charge(cur, grant)
                remaining -= grant
                if remaining == 0:
                    return cur + -(-grant // rate)
            cur = b_end
        return cur

    def weight_zone_free(self, pcore: int, ctx_key) -> int:
        used = sum(self.resident.get(ctx_key, {}).values())
        if ctx_key is not None and self._shares_core(pcore):
            # a time-shared core keeps one context in SRAM at a time
            return self.config.weight_zone_bytes - used
        used = sum(sum(v.values()) for (p, *_), v in self.resident.items() if p == pcore)
        return self.config.weight_zone_bytes - used

    def _shares_core(self, pcore: int) -> bool:
        n = 0
        for ctx in self.vms.values():
            n += sum(1 for p in ctx.placement.values() if p == pcore)
        return n > 1

    def dma_load(self, pcore: int, ctx: VmContext, vaddr: int, nbytes: int, now: int = 0, *,
                 vcore: int | None = None, key=None, write: bool = False) -> DmaResult:
        """HBM<->SRAM transfer through the core's DMA engine.

        Reads with a ``key`` become resident weights; a later load of a
        resident key completes immediately when weight residency is on.
        """
        c = self.config
        stats = self.stats[ctx.vmid]
        ctx_key = (pcore, ctx.vmid, vcore)
        res = self.resident.setdefault(ctx_key, {})
        if key is not None and c.weight_residency and key in res:
            ready = max(now, self.resident_ready[(ctx_key, key)])
            return DmaResult(ready, ready, self.dma_free[pcore], 0, 0, 0, True)
        start = max(now, self.dma_free[pcore])
        if key is not None and not write and nbytes > self.weight_zone_free(pcore, ctx_key):
            raise SramOverflow(f"core {pcore}: {nbytes} B load exceeds the free weight-zone")
        if stats.first_dma_start is None or start < stats.first_dma_start:
            stats.first_dma_start = start
        tr = ctx.translator(pcore).translate(vaddr, nbytes, write=write) if nbytes else None
        stall = tr.stall_cycles if tr else 0
        misses = tr.misses if tr else 0
        end = self._stream_hbm(ctx.counter, start + stall, nbytes) if nbytes else start + stall
        finish = end + c.hbm_latency
        self.dma_free[pcore] = end
        if key is not None and c.weight_residency and not write:
            res[key] = nbytes
            self.resident_ready[(ctx_key, key)] = finish
        stats.stall_cycles += stall
        stats.tlb_misses += misses
        stats.scan_steps += tr.scan_steps if tr else 0
        stats.hbm_bytes += nbytes
        stats.dma_bytes += nbytes
        stats.last_event = max(stats.last_event, finish)
        return DmaResult(start, finish, end, stall, misses, nbytes)

    # -- broadcast -------------------------------------------------------

    def broadcast(self, ctx: VmContext, src_v: int, dst_vs, nbytes: int, mode: str, now: int = 0,
                  tag=None) -> int:
        """Send one result to several virtual cores; returns the completion cycle.

        ``noc`` fans out unicast transfers from the sender, each preceded by a
        handshake.  ``memsync`` writes the data to HBM, publishes a flag, and
        every receiver reads it back through its own DMA engine.
        """
        dst_vs = list(dst_vs)
        if not dst_vs:
            raise ValueError("broadcast needs at least one destination")
        src = ctx.pcore(src_v)
        stats = self.stats[ctx.vmid]
        if mode == "noc":
            t = max(now, self.send_free[src])
            done = t
            for dv in dst_vs:
                dst = ctx.pcore(dv)
                path = self.route(ctx, src, dst)
                t = self.handshake(src, dst, path, t, tag)
                if nbytes:
                    lookup = self.last_dst.get(src) != (ctx.vmid, dst)
                    r = self.noc_transfer(src, dst, nbytes, path, t, virtualized=ctx.virtualized,
                                          lookup=lookup, tag=tag)
                    self.last_dst[src] = (ctx.vmid, dst)
                    self._account_transfer(ctx, r, path)
                    t = r.inject_done
                    done = max(done, r.arrival)
                else:
                    done = max(done, t)
            self.send_free[src] = t
            stats.last_event = max(stats.last_event, done)
            return done
        if mode == "memsync":
            c = self.config
            if nbytes:
                w = self.dma_load(src, ctx, ctx.scratch_vaddr, nbytes, now, write=True)
                flag = w.finish + c.hbm_latency
            else:
                flag = max(now, self.dma_free[src]) + c.hbm_latency
            done = flag
            for dv in dst_vs:
                dst = ctx.pcore(dv)
                poll = flag + c.hbm_latency
                if nbytes:
                    r = self.dma_load(dst, ctx, ctx.scratch_vaddr, nbytes, poll)
                    done = max(done, r.finish)
                else:
                    done = max(done, poll)
            stats.last_event = max(stats.last_event, done)
            return done
        raise ValueError(f"unknown broadcast mode {mode!r}")

    def transfer(self, ctx: VmContext, src_v: int, dst_v: int, nbytes: int, now: int, tag=None) -> int:
        """Activation hand-off between two virtual cores; returns arrival cycle."""
        if ctx.memsync_only:
            return self.broadcast(ctx, src_v, [dst_v], nbytes, "memsync", now, tag)
        src, dst = ctx.pcore(src_v), ctx.pcore(dst_v)
        path = self.route(ctx, src, dst)
        start = max(now, self.send_free[src])
        lookup = self.last_dst.get(src) != (ctx.vmid, dst)
        r = self.noc_transfer(src, dst, nbytes, path, start, virtualized=ctx.virtualized,
                              lookup=lookup, tag=tag)
        self.last_dst[src] = (ctx.vmid, dst)
        self.send_free[src] = r.inject_done
        self._account_transfer(ctx, r, path)
        self.stats[ctx.vmid].last_event = max(self.stats[ctx.vmid].last_event, r.arrival)
        return r.arrival

    def _account_transfer(self, ctx: VmContext, r: TransferResult, path: list):
        stats = self.stats[ctx.vmid]
        stats.packets += r.packets
        stats.noc_busy_cycles += sum(b - a for _l, a, b in r.occupancy)
        owned = set(ctx.placement.values())
        stats.interference_hops += sum(1 for p in path[1:-1] if p not in owned)

    # -- compute -------------------------------------------------------

    def run_kernel(self, ctx: VmContext, vcore: int, op: KernelOp, now: int) -> tuple[int, int]:
        """Execute a kernel on the core hosting ``vcore``; returns (start, finish).

        When several virtual cores share the physical core, switching context
        costs either a fixed switch or, if the contexts do not all fit in the
        weight zone, a reload of the incoming context's weights from HBM.
        """
        c = self.config
        p = ctx.pcore(vcore)
        stats = self.stats[ctx.vmid]
        start = max(now, self.compute_free[p])
        me = (ctx.vmid, vcore)
        prev = self.last_ctx[p]
        if prev is not None and prev != me:
            stats.tdm_switches += 1
            sharing = [(vm, v) for vm, cx in self.vms.items() for v, pp in cx.placement.items() if pp == p]
            total = sum(self.vms[vm].context_bytes.get(v, 0) for vm, v in sharing)
            if total > c.weight_zone_bytes:
                nbytes = ctx.context_bytes.get(vcore, 0)
                end = self._stream_hbm(ctx.counter, start, nbytes) + c.hbm_latency if nbytes else start
                stats.hbm_bytes += nbytes
                stats.dma_bytes += nbytes
                cost = end - start
            else:
                cost = c.tdm_switch_cycles
            stats.tdm_switch_cycles += cost
            start += cost
        self.last_ctx[p] = me
        cyc = compute_cycles(op, c)
        finish = start + cyc
        self.compute_free[p] = finish
        self.core_busy[p] += cyc
        stats.compute_cycles += cyc
        stats.kernels += 1
        if stats.first_kernel_start is None or start < stats.first_kernel_start:
            stats.first_kernel_start = start
        stats.last_kernel_end = max(stats.last_kernel_end, finish)
        stats.last_event = max(stats.last_event, finish)
        return start, finish
