"""Virtual NPU lifecycle: cores, HBM blocks, meta tables and baseline modes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .chip import MiB, Chip, VmContext
from .errors import ConfigError, InsufficientCores, MetaZoneOverflow, OutOfMemory, UnknownVm
from .topology import (UNIT_COSTS, AllocationRequest, EditCostModel, MappingResult, Strategy,
                       Topology, allocate_cores, is_connected)
from .vchunk import (RTT_ENTRY_BITS, AccessCounter, PageTable, PageTranslator, PhysicalTranslator,
                     RangeTranslator, build_rtt)
from .vrouter import build_routing_table, confined_directions, validate_directions

log = logging.getLogger(__name__)


class BuddyAllocator:
    """Power-of-two block allocator over ``[0, total)``."""

    def __init__(self, total: int, min_block: int = MiB):
        if min_block & (min_block - 1) or total % min_block:
            raise ValueError("min_block must be a power of two dividing total")
        self.total = total
        self.min_block = min_block
        self.free_lists: dict = {}      # block size -> sorted list of addresses
        self.live: dict = {}            # address -> block size
        addr = 0
        while addr < total:             # carve total into maximal aligned blocks
            size = min_block
            while addr % (size * 2) == 0 and addr + size * 2 <= total:
                size *= 2
            self.free_lists.setdefault(size, []).append(addr)
            addr += size

    @staticmethod
    def block_size(nbytes: int, min_block: int = MiB) -> int:
        size = min_block
        while size < nbytes:
            size *= 2
        return size

    def alloc(self, nbytes: int) -> tuple[int, int]:
        """Returns ``(address, block_size)`` of the lowest-addressed fitting block."""
        if nbytes <= 0:
            raise ValueError("allocation size must be positive")
        want = self.block_size(nbytes, self.min_block)
        fits = [s for s, lst in self.free_lists.items() if s >= want and lst]
        if not fits:
            raise OutOfMemory(f"no free block of {want} bytes")
        size = min(fits)
        addr = self.free_lists[size].pop(0)
        while size > want:
            size //= 2
            self._insert(size, addr + size)
        self.live[addr] = want
        return addr, want

    def free(self, addr: int):
        try:
            size = self.live.pop(addr)
        except KeyError:
            raise ValueError(f"no live block at {addr:#x}") from None
        while True:
            buddy = addr ^ size
            lst = self.free_lists.get(size, [])
            if buddy + size > self.total or buddy not in lst:
                break
            lst.remove(buddy)
            addr = min(addr, buddy)
            size *= 2
        self._insert(size, addr)

    def _insert(self, size: int, addr: int):
        lst = self.free_lists.setdefault(size, [])
        lst.append(addr)
        lst.sort()

    @property
    def free_bytes(self) -> int:
        return sum(s * len(lst) for s, lst in self.free_lists.items())

    def check(self):
        spans = [(a, a + s) for s, lst in self.free_lists.items() for a in lst]
        spans += [(a, a + s) for a, s in self.live.items()]
        spans.sort()
        for (a0, a1), (b0, _b1) in zip(spans, spans[1:]):
            assert a1 <= b0, "overlapping blocks"
        assert self.free_bytes + sum(self.live.values()) == self.total

    def state(self) -> dict:
        return {"free": {str(s): list(l) for s, l in sorted(self.free_lists.items()) if l},
                "live": {str(a): s for a, s in sorted(self.live.items())}}


@dataclass
class VnpuRequest:
    """What a tenant asks for.  ``tensors`` lists per-tensor byte sizes; each
    gets its own buddy block (and RTT entry)."""

    vmid: int
    topology: Topology
    tensors: list = field(default_factory=list)
    memory_bytes: int = 0
    scratch_bytes: int = 0
    bandwidth_cap: object = "proportional"     # "proportional", None or bytes per window
    strategy: Strategy = Strategy.SIMILAR
    noninterference: bool = False
    translation: str = "range"                 # "range" | "page" | "physical"
    mode: str = "vnpu"                         # "vnpu" | "uvm" | "bare" | "mig"


@dataclass
class VirtualNpu:
    vmid: int
    requested_topology: Topology
    mapping: dict
    routing_table: object
    rtt_blocks: list          # (vaddr, paddr, size, perms) sorted by vaddr
    memory_blocks: list       # (paddr, size)
    bandwidth_cap: int | None
    mode: str
    distance: float = 0
    method: str = ""
    partition: int | None = None
    scratch_vaddr: int = 0
    tensor_vaddrs: list = field(default_factory=list)
    context: VmContext | None = None

    @property
    def cores(self) -> tuple:
        return tuple(sorted(set(self.mapping.values())))

    def to_dict(self) -> dict:
        return {
            "vmid": self.vmid, "mode": self.mode, "partition": self.partition,
            "mapping": [[v, p] for v, p in sorted(self.mapping.items())],
            "distance": self.distance, "method": self.method,
            "bandwidth_cap": self.bandwidth_cap,
            "memory_blocks": [list(b) for b in self.memory_blocks],
            "rtt": [[v, p, s] for v, p, s, _ in self.rtt_blocks],
            "routing_table": self.routing_table.to_dict() if self.routing_table else None,
        }


def mig_partition(width: int, height: int, scheme) -> list:
    """Split the mesh into horizontal bands of whole rows, one per scheme entry.

    Returns the partitions as sorted core tuples.
    """
    parts = []
    row = 0
    for n in scheme:
        if n % width:
            raise ConfigError(f"partition of {n} cores is not a whole number of {width}-core rows")
        rows = n // width
        parts.append(tuple(range(row * width, (row + rows) * width)))
        row += rows
    if row != height:
        raise ConfigError(f"scheme {list(scheme)} does not tile a {width}x{height} mesh")
    return parts


def tdm_placement(n_virtual: int, pcores_in_order: list) -> dict:
    """Contiguous groups of virtual cores share a physical core."""
    m = len(pcores_in_order)
    return {v: pcores_in_order[v * m // n_virtual] for v in range(n_virtual)}


def snake_order(cores, width: int) -> list:
    """Cores ordered boustrophedon by row."""
    return sorted(cores, key=lambda c: (c // width, c % width if (c // width) % 2 == 0 else -(c % width)))


class Hypervisor:
    """Single management context owning a chip's allocation state."""

    def __init__(self, chip: Chip, cost_model: EditCostModel = UNIT_COSTS, mig_scheme=None):
        self.chip = chip
        self.config = chip.config
        self.cost_model = cost_model
        self.buddy = BuddyAllocator(self.config.hbm_bytes)
        self.vnpus: dict = {}
        self.partitions = (mig_partition(self.config.width, self.config.height, mig_scheme)
                           if mig_scheme else [])
        self.partition_owner: dict = {}
        self.reserved: frozenset = frozenset()

    def reserve(self, cores):
        """Mark cores as held outside this hypervisor (obstacles)."""
        cores = frozenset(cores)
        bad = cores - self.chip.topology.nodes
        if bad:
            raise ConfigError(f"reserved cores {sorted(bad)} are not on the chip")
        self.reserved = self.reserved | cores

    @property
    def allocated_cores(self) -> frozenset:
        return self.reserved | frozenset(p for v in self.vnpus.values() for p in v.mapping.values())

    @property
    def free_cores(self) -> frozenset:
        return self.chip.topology.nodes - self.allocated_cores

    # -- creation ----------------------------------------------------------

    def create_vnpu(self, req: VnpuRequest, **alloc_opts) -> VirtualNpu:
        if req.vmid in self.vnpus:
            raise ConfigError(f"vm {req.vmid} already exists")
        if req.translation not in ("range", "page", "physical"):
            raise ConfigError(f"unknown translation {req.translation!r}")
        if req.mode not in ("vnpu", "uvm", "bare", "mig"):
            raise ConfigError(f"unknown mode {req.mode!r}")
        if req.mode == "mig":
            return self._create_mig(req)
        ar = AllocationRequest(req.vmid, req.topology, req.strategy,
                               require_noninterference=req.noninterference)
        res = allocate_cores(self.chip.topology, self.allocated_cores, ar, self.cost_model, **alloc_opts)
        return self._finish(req, res.mapping, res)

    def _create_mig(self, req: VnpuRequest) -> VirtualNpu:
        if not self.partitions:
            raise ConfigError("MIG mode needs a partition scheme")
        k = len(req.topology.nodes)
        taken = self.allocated_cores
        free = [i for i, part in enumerate(self.partitions)
                if i not in self.partition_owner and not taken.intersection(part)]
        if not free:
            raise InsufficientCores(f"vm {req.vmid}: no free MIG partition")
        fitting = [i for i in free if len(self.partitions[i]) >= k]
        if fitting:
            pid = min(fitting, key=lambda i: (len(self.partitions[i]), i))
        else:
            pid = max(free, key=lambda i: (len(self.partitions[i]), -i))
        part = self.partitions[pid]
        order = snake_order(part, self.config.width)
        vorder = _pipeline_order(req.topology)
        if k <= len(part):
            mapping = {v: order[i] for i, v in enumerate(vorder)}
        else:
            placed = tdm_placement(k, order)
            mapping = {v: placed[i] for i, v in enumerate(vorder)}
        res = MappingResult(tuple(sorted(set(mapping.values()))), mapping, 0, "mig")
        vnpu = self._finish(req, mapping, res, shared=k > len(part))
        vnpu.partition = pid
        self.partition_owner[pid] = req.vmid
        return vnpu

    def _finish(self, req: VnpuRequest, mapping: dict, res: MappingResult, shared: bool = False) -> VirtualNpu:
        cfg = self.config
        mapping = dict(sorted(mapping.items()))
        taken = []
        try:
            sizes = list(req.tensors)
            if req.memory_bytes:
                sizes.append(req.memory_bytes)
            if req.scratch_bytes:
                sizes.append(req.scratch_bytes)
            if len(sizes) > cfg.rtt_capacity:
                raise MetaZoneOverflow(f"vm {req.vmid}: {len(sizes)} ranges exceed RTT capacity {cfg.rtt_capacity}")
            blocks = []
            vaddr = 0
            for s in sizes:
                paddr, size = self.buddy.alloc(s)
                taken.append(paddr)
                vaddr = -(-vaddr // size) * size
                blocks.append((vaddr, paddr, size, frozenset({"read", "write"})))
                vaddr += size
            pcores = sorted(set(mapping.values()))
            table = None
            if not shared:
                table = build_routing_table(req.vmid, mapping, mesh_shape=(cfg.width, cfg.height))
                if req.noninterference and is_connected(self.chip.topology.subgraph(pcores)):
                    dirs = confined_directions(pcores, cfg.width, cfg.height)
                    report = validate_directions(dirs, (cfg.width, cfg.height))
                    if not report.ok:
                        raise RuntimeError(f"generated directions deadlock: {report.cycle}")
                    table = table.with_directions(dirs)
            rtt_bytes = len(blocks) * RTT_ENTRY_BITS // 8
            deployed = []
            try:
                for p in pcores:
                    meta = rtt_bytes + (table.meta_bytes(p) if table else 8 + 4 * len(mapping))
                    self.chip.deploy_meta(p, req.vmid, meta, {"rtt_base": 0, "rt_base": rtt_bytes})
                    deployed.append(p)
            except Exception:
                for p in deployed:
                    self.chip.clear_meta(p, req.vmid)
                raise
        except Exception:
            for a in taken:
                self.buddy.free(a)
            raise
        cap = self._bandwidth_cap(req, pcores)
        n_scratch = 1 if req.scratch_bytes else 0
        n_tensors = len(req.tensors)
        vnpu = VirtualNpu(req.vmid, req.topology, mapping, table, blocks,
                          [(b[1], b[2]) for b in blocks], cap, req.mode, res.distance, res.method,
                          scratch_vaddr=blocks[-1][0] if n_scratch else 0,
                          tensor_vaddrs=[b[0] for b in blocks[:n_tensors]])
        vnpu.context = self._context(req, vnpu)
        self.vnpus[req.vmid] = vnpu
        self.chip.attach(vnpu.context)
        log.info("created vm %d on cores %s (%s, distance %s)", req.vmid, vnpu.cores, res.method, res.distance)
        return vnpu

    def _bandwidth_cap(self, req: VnpuRequest, pcores) -> int | None:
        cfg = self.config
        if req.bandwidth_cap is None:
            return None
        if req.bandwidth_cap != "proportional":
            return int(req.bandwidth_cap)
        ifaces = cfg.memory_interface_cores()
        mine = sum(1 for p in pcores if p in ifaces)
        share = max(1, mine) / len(ifaces)
        return int(cfg.hbm_bytes_per_cycle * cfg.window_cycles * share)

    def _context(self, req: VnpuRequest, vnpu: VirtualNpu) -> VmContext:
        cfg = self.config
        bare = req.mode == "bare"
        translators = {}
        for p in vnpu.cores:
            if bare or req.translation == "physical":
                translators[p] = PhysicalTranslator()
            elif req.translation == "page":
                translators[p] = PageTranslator(PageTable(vnpu.rtt_blocks, cfg.page_size),
                                                cfg.page_tlb_entries, cfg.translation_costs())
            elif req.translation == "range":
                translators[p] = RangeTranslator(build_rtt(vnpu.rtt_blocks), cfg.range_tlb_entries,
                                                 cfg.translation_costs())
            else:
                raise ConfigError(f"unknown translation {req.translation!r}")
        counter = AccessCounter(cfg.window_cycles, vnpu.bandwidth_cap)
        return VmContext(req.vmid, dict(vnpu.mapping), virtualized=not bare, table=vnpu.routing_table,
                         translators=translators, counter=counter, memsync_only=req.mode == "uvm",
                         scratch_vaddr=vnpu.scratch_vaddr)

    # -- teardown / modes --------------------------------------------------

    def destroy_vnpu(self, vmid: int) -> dict:
        try:
            vnpu = self.vnpus.pop(vmid)
        except KeyError:
            raise UnknownVm(f"vm {vmid} is not live") from None
        for paddr, _size in vnpu.memory_blocks:
            self.buddy.free(paddr)
        for p in vnpu.cores:
            self.chip.clear_meta(p, vmid)
        self.chip.detach(vmid)
        if vnpu.partition is not None:
            self.partition_owner.pop(vnpu.partition, None)
        return {"cores": list(vnpu.cores), "blocks": [list(b) for b in vnpu.memory_blocks]}

    def uvm_mode(self, vmid: int) -> VirtualNpu:
        """Lower all inter-core exchange of ``vmid`` to HBM write+read."""
        try:
            vnpu = self.vnpus[vmid]
        except KeyError:
            raise UnknownVm(f"vm {vmid} is not live") from None
        vnpu.mode = "uvm"
        vnpu.context.memsync_only = True
        return vnpu

    def reset_runtime(self):
        """Fresh translator and counter state, e.g. between repeated runs."""
        for vnpu in self.vnpus.values():
            for t in vnpu.context.translators.values():
                if isinstance(t, RangeTranslator):
                    t.table.reset_hints()
                    t.tlb = type(t.tlb)(t.tlb.capacity)
                elif isinstance(t, PageTranslator):
                    t.tlb = type(t.tlb)(t.tlb.capacity)
                t.scan_steps = 0
            c = vnpu.context.counter
            vnpu.context.counter = AccessCounter(c.window_cycles, c.cap_bytes_per_window)

    def state(self) -> dict:
        return {
            "free_cores": sorted(self.free_cores),
            "reserved": sorted(self.reserved),
            "buddy": self.buddy.state(),
            "vnpus": {str(k): v.to_dict() for k, v in sorted(self.vnpus.items())},
            "meta_used": {str(p): dict(sorted(m.items())) for p, m in self.chip.meta_used.items() if m},
            "partitions": [list(p) for p in self.partitions],
            "partition_owner": {str(k): v for k, v in sorted(self.partition_owner.items())},
        }

    def dump_json(self) -> str:
        return json.dumps(self.state(), sort_keys=True, indent=2)


def _pipeline_order(t: Topology) -> list:
    """Virtual cores in boustrophedon order of their coordinates."""
    if not all(n in t.coords for n in t.nodes):
        return list(t.sorted_nodes)
    return sorted(t.nodes, key=lambda n: (t.coords[n][1],
                                          t.coords[n][0] if t.coords[n][1] % 2 == 0 else -t.coords[n][0]))


pipeline_order = _pipeline_order
