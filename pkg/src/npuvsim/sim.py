"""Event-driven execution of task graphs on a :class:`~npuvsim.chip.Chip`."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

from .chip import Chip, EventQueue, KernelOp
from .errors import DeadlockDetected, UnknownVm

log = logging.getLogger(__name__)

METRICS_VERSION = 1

_READY, _DONE = 0, 1


@dataclass
class Task:
    """One unit of work for a VM.

    kinds: ``load`` (HBM->SRAM via DMA), ``store`` (SRAM->HBM), ``kernel``,
    ``xfer`` (activation hand-off to ``dst``) and ``bcast`` (``dsts`` in
    ``mode`` ``noc`` or ``memsync``).  Core ids are virtual.
    """

    tid: int
    vm: int
    kind: str
    core: int = 0
    deps: tuple = ()
    op: KernelOp | None = None
    vaddr: int = 0
    nbytes: int = 0
    key: object = None
    dst: int | None = None
    dsts: tuple = ()
    mode: str = "noc"
    iteration: int = 0
    weight: bool = False

    def __post_init__(self):
        if self.kind not in ("load", "store", "kernel", "xfer", "bcast"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "kernel" and self.op is None:
            raise ValueError("kernel task needs an op")
        if self.kind == "xfer" and self.dst is None:
            raise ValueError("xfer task needs a destination")


@dataclass
class VmMetrics:
    vmid: int
    total_cycles: int = 0
    compute_cycles: int = 0
    noc_busy_cycles: int = 0
    stall_cycles: int = 0
    tlb_misses: int = 0
    scan_steps: int = 0
    hbm_bytes: int = 0
    warmup_cycles: int = 0
    iterations: int = 0
    iterations_per_cycle: float = 0.0
    steady_iterations_per_cycle: float = 0.0
    cores_used: int = 0
    packets: int = 0
    interference_hops: int = 0
    tdm_switches: int = 0
    tdm_switch_cycles: int = 0
    kernels: int = 0


@dataclass
class Metrics:
    total_cycles: int = 0
    cores: int = 0
    utilization: float = 0.0
    vms: dict = field(default_factory=dict)   # vmid -> VmMetrics
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics_version": METRICS_VERSION,
            "total_cycles": self.total_cycles,
            "cores": self.cores,
            "utilization": round(self.utilization, 9),
            "vms": {str(k): _round_floats(asdict(v)) for k, v in sorted(self.vms.items())},
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def rows(self, scenario: str = "") -> list:
        """Long-form ``(scenario, vm, metric, value)`` rows."""
        out = [(scenario, "chip", "total_cycles", self.total_cycles),
               (scenario, "chip", "utilization", round(self.utilization, 9))]
        for vmid, m in sorted(self.vms.items()):
            for k, v in sorted(asdict(m).items()):
                if k != "vmid":
                    out.append((scenario, str(vmid), k, round(v, 12) if isinstance(v, float) else v))
        return out


def _round_floats(d: dict) -> dict:
    return {k: round(v, 12) if isinstance(v, float) else v for k, v in d.items()}


def dispatch_schedule(chip: Chip, tasks: list) -> dict:
    """Cycle at which each kernel's instruction reaches its core.

    The controller issues every VM's kernels in task order; a lookup is
    paid only when the target core changes.
    """
    arrival = {}
    issue_clock = {}
    prev = {}
    for t in tasks:
        if t.kind != "kernel":
            continue
        ctx = chip.vms[t.vm]
        _p, issue, travel = chip.dispatch_instruction(ctx, t.core, prev.get(t.vm))
        if ctx.virtualized and t.core != prev.get(t.vm):
            chip.stats[t.vm].dispatch_lookups += 1
        clock = issue_clock.get(t.vm, 0) + issue
        issue_clock[t.vm] = clock
        prev[t.vm] = t.core
        arrival[t.tid] = clock + travel
    return arrival


def run(chip: Chip, tasks: list) -> Metrics:
    """Drain all tasks; raises :class:`DeadlockDetected` if some never become ready."""
    chip.reset()
    by_id = {}
    for t in tasks:
        if t.vm not in chip.vms:
            raise UnknownVm(f"task {t.tid} belongs to unknown vm {t.vm}")
        if t.tid in by_id:
            raise ValueError(f"duplicate task id {t.tid}")
        by_id[t.tid] = t
    pending = {}
    dependents = {}
    for t in tasks:
        pending[t.tid] = len(t.deps)
        for d in t.deps:
            dependents.setdefault(d, []).append(t.tid)
    arrival = dispatch_schedule(chip, tasks)

    q = EventQueue()
    for t in tasks:
        if not t.deps:
            q.push(0, (_READY, t.tid))
    done = set()
    iter_end = {}
    warm_end = {}
    while q:
        now, (what, tid) = q.pop()
        t = by_id[tid]
        if what == _READY:
            finish = _execute(chip, t, now, arrival)
            q.push(finish, (_DONE, tid))
            continue
        done.add(tid)
        if t.kind == "kernel":
            key = (t.vm, t.iteration)
            iter_end[key] = max(iter_end.get(key, 0), now)
        if t.kind == "load" and t.weight and t.iteration == 0:
            warm_end[t.vm] = max(warm_end.get(t.vm, 0), now)
        for d in dependents.get(tid, ()):
            pending[d] -= 1
            if pending[d] == 0:
                q.push(now, (_READY, d))
    if len(done) != len(tasks):
        stuck = sorted(set(by_id) - done)
        raise DeadlockDetected(f"{len(stuck)} tasks never became ready, e.g. {stuck[:5]}")
    return collect_metrics(chip, iter_end, warm_end)


def _execute(chip: Chip, t: Task, now: int, arrival: dict) -> int:
    ctx = chip.vms[t.vm]
    if t.kind == "kernel":
        _s, finish = chip.run_kernel(ctx, t.core, t.op, max(now, arrival[t.tid]))
        return finish
    if t.kind in ("load", "store"):
        p = ctx.pcore(t.core)
        r = chip.dma_load(p, ctx, t.vaddr, t.nbytes, now, vcore=t.core,
                          key=t.key if t.kind == "load" else None, write=t.kind == "store")
        return r.finish
    if t.kind == "xfer":
        return chip.transfer(ctx, t.core, t.dst, t.nbytes, now, tag=t.tid)
    return chip.broadcast(ctx, t.core, t.dsts, t.nbytes, t.mode, now, tag=t.tid)


def steady_rate(ends: list, first_start: int | None) -> float:
    """Iterations per cycle over the second half of the run.

    Completions before the midpoint include pipeline fill and weight
    warm-up; a single iteration falls back to its full latency.
    """
    n = len(ends)
    if n == 0 or first_start is None:
        return 0.0
    if n == 1:
        span = ends[0] - first_start
        return 1 / span if span > 0 else 0.0
    w = (n - 1) // 2
    span = ends[-1] - ends[w]
    return (n - 1 - w) / span if span > 0 else 0.0


def collect_metrics(chip: Chip, iter_end: dict, warm_end: dict) -> Metrics:
    m = Metrics(cores=chip.config.cores)
    for vmid, st in sorted(chip.stats.items()):
        ctx = chip.vms[vmid]
        ends = sorted((it, c) for (vm, it), c in iter_end.items() if vm == vmid)
        vm = VmMetrics(vmid)
        vm.total_cycles = st.last_event
        vm.compute_cycles = st.compute_cycles
        vm.noc_busy_cycles = st.noc_busy_cycles
        vm.stall_cycles = st.stall_cycles
        vm.tlb_misses = st.tlb_misses
        vm.scan_steps = st.scan_steps
        vm.hbm_bytes = st.hbm_bytes
        vm.packets = st.packets
        vm.interference_hops = st.interference_hops
        vm.tdm_switches = st.tdm_switches
        vm.tdm_switch_cycles = st.tdm_switch_cycles
        vm.kernels = st.kernels
        vm.cores_used = len(set(ctx.placement.values()))
        vm.iterations = len(ends)
        if vmid in warm_end and st.first_dma_start is not None:
            vm.warmup_cycles = warm_end[vmid] - st.first_dma_start
        if ends and st.first_kernel_start is not None and st.last_kernel_end > st.first_kernel_start:
            vm.iterations_per_cycle = len(ends) / (st.last_kernel_end - st.first_kernel_start)
        vm.steady_iterations_per_cycle = steady_rate([c for _it, c in ends], st.first_kernel_start)
        m.vms[vmid] = vm
    m.total_cycles = max((v.total_cycles for v in m.vms.values()), default=0)
    if m.total_cycles:
        m.utilization = min(1.0, sum(chip.core_busy) / (m.cores * m.total_cycles))
    return m
