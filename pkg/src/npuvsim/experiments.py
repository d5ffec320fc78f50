"""Scenario files, experiment drivers and metrics output."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import sim
from .chip import Chip, ChipConfig, KernelOp
from .errors import ConfigError, NpuVsimError, UnknownParameter
from .hypervisor import Hypervisor, VnpuRequest
from .sim import METRICS_VERSION, Metrics
from .topology import Strategy, Topology
from .vchunk import PageTable, PageTranslator, RangeTranslator, TranslationCosts, build_rtt
from .workloads import (emit_events, load_graph, map_layers, microbench_broadcast, weight_trace,
                        workload_from_name, default_tensor_vaddrs)

log = logging.getLogger("npuvsim")

MODES = ("vnpu", "mig", "uvm", "bare")
SWEEP_PARAMETERS = ("cores", "tlb_entries", "packets", "strategy")


def schema() -> dict:
    return json.loads(resources.files("npuvsim").joinpath("schema/scenario.schema.json").read_text())


def bundled_scenarios() -> dict:
    """Name -> path of every scenario shipped with the package."""
    root = resources.files("npuvsim").joinpath("scenarios")
    return {p.name[:-5]: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".json")}


@dataclass
class Scenario:
    name: str
    seed: int
    kind: str = "pipeline"
    chip: dict = field(default_factory=dict)
    vnpus: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)
    mig_scheme: list | None = None
    iterations: int = 4
    params: dict = field(default_factory=dict)
    source: str | None = None
    text: str | None = None

    @classmethod
    def from_dict(cls, d: dict, source: str | None = None, text: str | None = None) -> "Scenario":
        try:
            jsonschema.validate(d, schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{source or 'scenario'}: {where}: {exc.message}") from None
        d = copy.deepcopy(d)
        d.pop("$schema", None)
        return cls(source=source, text=text, **d)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = str(path)
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
        return cls.from_dict(d, source=path, text=text)

    def to_dict(self) -> dict:
        d = {"name": self.name, "seed": self.seed, "kind": self.kind, "chip": self.chip,
             "vnpus": self.vnpus, "obstacles": self.obstacles, "mig_scheme": self.mig_scheme,
             "iterations": self.iterations, "params": self.params}
        if d["mig_scheme"] is None:
            del d["mig_scheme"]
        return d

    def replace(self, **changes) -> "Scenario":
        d = copy.deepcopy(self.to_dict())
        d.update(changes)
        if d.get("mig_scheme", 0) is None:
            d.pop("mig_scheme")
        return Scenario.from_dict(d, self.source, self.text)

    def config(self) -> ChipConfig:
        try:
            return ChipConfig.from_dict(self.chip)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.source or self.name}: chip: {exc}") from None

    def line_of_vm(self, vmid: int) -> int | None:
        if not self.text:
            return None
        m = re.search(r'"vmid"\s*:\s*%d\b' % vmid, self.text)
        return self.text.count("\n", 0, m.start()) + 1 if m else None

    def context(self, vmid: int) -> str:
        line = self.line_of_vm(vmid)
        loc = f"{self.source}:{line}" if self.source and line else (self.source or self.name)
        return f"{loc}: vnpu {vmid}"


# ---------------------------------------------------------------------------
# runners

def run(scenario: Scenario, *, mode: str | None = None, trace_path: str | None = None) -> Metrics:
    """Run one scenario and return its metrics."""
    kind = scenario.kind
    if kind == "pipeline":
        return _run_pipeline(scenario, mode, trace_path)
    if kind == "allocation":
        return _run_allocation(scenario)
    if kind == "vrouter":
        return _run_vrouter(scenario)
    if kind == "broadcast":
        return _run_broadcast(scenario)
    if kind == "translation":
        return _run_translation(scenario)
    raise ConfigError(f"unknown scenario kind {kind!r}")


def _requests(scenario: Scenario, mode: str | None):
    for spec in scenario.vnpus:
        spec = dict(spec)
        if mode is not None:
            spec["mode"] = mode
        yield spec


def _graph(spec: dict):
    w = spec.get("workload", "gpt-small")
    return load_graph(w) if isinstance(w, dict) else workload_from_name(w)


def _topology(spec: dict, k: int, width: int) -> Topology:
    t = spec.get("topology")
    if t is None or t.get("kind") == "snake":
        return Topology.snake(k, (t or {}).get("width", width))
    if t.get("kind") == "mesh":
        return Topology.mesh(t["width"], t["height"])
    if t.get("kind") == "path":
        return Topology.path(k)
    raise ConfigError(f"unknown topology kind {t.get('kind')!r}")


def build_system(scenario: Scenario, mode: str | None = None, trace: bool = False):
    """Create chip, hypervisor and vNPUs; returns ``(chip, hv, tasks, notes)``.

    Requests that cannot be admitted are recorded in ``notes["failed"]``.
    """
    cfg = scenario.config()
    chip = Chip(cfg, trace=trace)
    scheme = scenario.mig_scheme
    hv = Hypervisor(chip, mig_scheme=scheme)
    hv.reserve(scenario.obstacles)
    tasks = []
    notes = {"admitted": [], "failed": {}, "seed": scenario.seed, "mapping": {}}
    for spec in _requests(scenario, mode):
        vmid = spec["vmid"]
        vm_mode = spec.get("mode", "vnpu")
        if vm_mode == "mig" and not hv.partitions:
            raise ConfigError(f"{scenario.context(vmid)}: mode 'mig' needs a mig_scheme")
        graph = _graph(spec)
        k = spec.get("cores", len(graph.layers))
        if spec.get("shrink_to_fit") and vm_mode != "mig":
            k = min(k, len(hv.free_cores))
        iters = spec.get("iterations", scenario.iterations)
        uvm = vm_mode == "uvm"
        try:
            if k < 1:
                raise ConfigError("no free cores left to shrink the request onto")
            req = VnpuRequest(vmid, _topology(spec, k, cfg.width),
                              tensors=[l.weight_bytes for l in graph.layers],
                              scratch_bytes=max(l.activation_bytes for l in graph.layers) if uvm else 0,
                              bandwidth_cap=spec.get("bandwidth_cap", "proportional"),
                              strategy=Strategy(spec.get("strategy", "similar")),
                              noninterference=spec.get("noninterference", False),
                              translation=spec.get("translation", "range"), mode=vm_mode)
            vnpu = hv.create_vnpu(req)
            cm = map_layers(graph, vnpu, cfg)
        except ConfigError as exc:
            raise ConfigError(f"{scenario.context(vmid)}: {exc}") from None
        except NpuVsimError as exc:
            notes["failed"][str(vmid)] = f"{type(exc).__name__}: {exc}"
            log.info("%s: not admitted: %s", scenario.context(vmid), exc)
            continue
        vnpu.context.context_bytes = dict(cm.footprint)
        notes["admitted"].append(vmid)
        notes["mapping"][str(vmid)] = {"cores": list(vnpu.cores), "distance": vnpu.distance,
                                       "method": vnpu.method, "virtual_cores": k,
                                       "stages": len(cm.stages)}
        tasks += emit_events(graph, cm, iters, vmid=vmid, tensor_vaddrs=vnpu.tensor_vaddrs,
                             chunk_bytes=spec.get("chunk_bytes"), start_tid=len(tasks))
    return chip, hv, tasks, notes


def _run_pipeline(scenario: Scenario, mode, trace_path) -> Metrics:
    chip, _hv, tasks, notes = build_system(scenario, mode, trace=trace_path is not None)
    m = sim.run(chip, tasks)
    m.notes.update(notes)
    if trace_path:
        write_trace(chip, trace_path)
    return m


def write_trace(chip: Chip, path: str):
    with open(path, "w") as f:
        for link, a, b, tag in sorted(chip.occupancy, key=lambda r: (r[1], str(r[0]), r[3])):
            f.write(f"{a} {b} {link[0]}->{link[1]} task={tag}\n")


def _run_allocation(scenario: Scenario) -> Metrics:
    """Admit the request list under each listed strategy; report admissions."""
    cfg = scenario.config()
    strategies = scenario.params.get("strategies") or [None]
    m = Metrics(cores=cfg.cores)
    for strat in strategies:
        chip = Chip(cfg)
        hv = Hypervisor(chip)
        hv.reserve(scenario.obstacles)
        admitted, failed = [], {}
        for spec in scenario.vnpus:
            spec = dict(spec)
            if strat is not None:
                spec["strategy"] = strat
            vmid = spec["vmid"]
            k = spec.get("cores", 1)
            req = VnpuRequest(vmid, _topology(spec, k, cfg.width), memory_bytes=spec.get("memory_bytes", 1 << 20),
                              strategy=Strategy(spec.get("strategy", "similar")),
                              noninterference=spec.get("noninterference", False))
            try:
                v = hv.create_vnpu(req)
                admitted.append({"vmid": vmid, "cores": list(v.cores), "distance": v.distance})
            except NpuVsimError as exc:
                failed[str(vmid)] = type(exc).__name__
        key = strat or "as_requested"
        m.notes[key] = {"admitted": admitted, "failed": failed,
                        "allocated_cores": sum(len(a["cores"]) for a in admitted),
                        "idle_cores": len(hv.free_cores)}
    return m


def _run_vrouter(scenario: Scenario) -> Metrics:
    cfg = scenario.config()
    p = scenario.params
    src, dst = p.get("src", 0), p.get("dst", 1)
    rows = []
    for n in p.get("packets", [2, 10, 20, 30]):
        nbytes = n * cfg.packet_bytes
        base = Chip(cfg).noc_transfer(src, dst, nbytes, now=0).arrival
        virt = Chip(cfg).noc_transfer(src, dst, nbytes, now=0, virtualized=True).arrival
        rows.append({"packets": n, "send": base, "vsend": virt, "overhead": round((virt - base) / base, 9)})
    m = Metrics(cores=cfg.cores, total_cycles=max((r["vsend"] for r in rows), default=0))
    m.notes["vrouter"] = rows
    return m


def broadcast_cycles(cfg: ChipConfig, n: int, mode: str, kernel: KernelOp | None = None) -> dict:
    """Run the 1:n kernel+broadcast microbenchmark; returns kernel and broadcast cycles."""
    chip = Chip(cfg)
    hv = Hypervisor(chip)
    tasks, k = microbench_broadcast(n, kernel, mode)
    payload = max(t.nbytes for t in tasks if t.kind == "bcast")
    hv.create_vnpu(VnpuRequest(0, Topology.snake(k, cfg.width), scratch_bytes=max(payload, 1),
                               bandwidth_cap=None))
    m = sim.run(chip, tasks)
    st = chip.stats[0]
    return {"total": m.total_cycles, "kernel": st.last_kernel_end,
            "broadcast": m.total_cycles - st.last_kernel_end}


def _run_broadcast(scenario: Scenario) -> Metrics:
    cfg = scenario.config()
    kspec = scenario.params.get("kernel")
    kernel = None
    if kspec:
        kernel = KernelOp(kspec["kind"], tuple(kspec.get("dims", ())), kspec.get("bytes_in", 0),
                          kspec.get("bytes_out", 0))
    rows = []
    for n in scenario.params.get("receivers", [1, 2, 4]):
        noc = broadcast_cycles(cfg, n, "noc", kernel)
        mem = broadcast_cycles(cfg, n, "memsync", kernel)
        rows.append({"receivers": n, "kernel": noc["kernel"], "noc": noc["broadcast"],
                     "memsync": mem["broadcast"], "ratio": round(mem["broadcast"] / noc["broadcast"], 9)})
    m = Metrics(cores=cfg.cores, total_cycles=max((r["memsync"] + r["kernel"] for r in rows), default=0))
    m.notes["broadcast"] = rows
    return m


def translation_study(cfg: ChipConfig, workload: str, cores: int, iterations: int = 3,
                      chunk_bytes: int | None = 64 * 1024) -> dict:
    """Replay a workload's per-core weight trace through range and page translation.

    Weights are re-streamed every iteration (no residency), as for a model
    that does not fit on chip.  The last_v check covers iterations 2 and up.
    """
    if iterations < 3:
        raise ConfigError("translation study needs at least 3 iterations")
    graph = workload_from_name(workload)
    cm = map_layers(graph, Topology.snake(cores, cfg.width), cfg)
    vaddrs = default_tensor_vaddrs(graph)
    blocks = [(va, va + (1 << 40), _block(l.weight_bytes)) for va, l in zip(vaddrs, graph.layers)]
    trace = weight_trace(graph, cm, iterations, vaddrs, chunk_bytes)
    costs = cfg.translation_costs()
    out = {"workload": workload, "cores": cores, "range_stall": 0, "page_stall": 0, "range_misses": 0,
           "page_misses": 0, "bytes": 0, "last_v_ok": True, "steady_scan_steps": 0,
           "steady_entries": 0}
    for core in sorted(trace):
        rt = RangeTranslator(build_rtt(blocks), cfg.range_tlb_entries, costs)
        pt = PageTranslator(PageTable(blocks, cfg.page_size), cfg.page_tlb_entries, costs)
        for it, loads in enumerate(trace[core]):
            steps_before = rt.scan_steps
            entries = set()
            for va, n in loads:
                r = rt.translate(va, n)
                p = pt.translate(va, n)
                out["range_stall"] += r.stall_cycles
                out["page_stall"] += p.stall_cycles
                out["range_misses"] += r.misses
                out["page_misses"] += p.misses
                out["bytes"] += n
                entries.add(rt.table.find(va))
            steps = rt.scan_steps - steps_before
            # iteration 0 is cold and iteration 1 makes the first wrap, which
            # is when the last entry's hint gets learned
            if it > 1:
                out["steady_scan_steps"] += steps
                out["steady_entries"] += len(entries)
                if steps > len(entries):
                    out["last_v_ok"] = False
    stream = out["bytes"] / cfg.dma_bytes_per_cycle
    out["range_overhead"] = round(out["range_stall"] / stream, 9)
    out["page_overhead"] = round(out["page_stall"] / stream, 9)
    return out


def _block(nbytes: int) -> int:
    from .hypervisor import BuddyAllocator
    return BuddyAllocator.block_size(nbytes)


def _run_translation(scenario: Scenario) -> Metrics:
    cfg = scenario.config()
    p = scenario.params
    rows = [translation_study(cfg, w["workload"], w["cores"], p.get("iterations", 3),
                              p.get("chunk_bytes", 64 * 1024))
            for w in p.get("workloads", [{"workload": "resnet18", "cores": 6}])]
    m = Metrics(cores=cfg.cores)
    m.notes["translation"] = rows
    return m


# ---------------------------------------------------------------------------
# compare / sweep

def compare(modes: list, scenario: Scenario) -> dict:
    """Run ``scenario`` under each mode; ratios are relative to the first mode.

    ``normalized`` is iterations/cycle over the first mode's; ``speedup_of_first``
    is its inverse.
    """
    if len(modes) < 2:
        raise ConfigError("compare needs at least two modes")
    for md in modes:
        if md not in MODES:
            raise ConfigError(f"unknown mode {md!r}; choose from {MODES}")
    runs = {md: run(scenario, mode=md) for md in modes}
    first = runs[modes[0]]
    table = []
    for md in modes:
        m = runs[md]
        for vmid, vm in sorted(m.vms.items()):
            ref = first.vms.get(vmid)
            ratio = vm.iterations_per_cycle / ref.iterations_per_cycle if ref and ref.iterations_per_cycle else None
            table.append({"mode": md, "vm": vmid, "iterations_per_cycle": vm.iterations_per_cycle,
                          "total_cycles": vm.total_cycles, "warmup_cycles": vm.warmup_cycles,
                          "normalized": None if ratio is None else round(ratio, 9),
                          "speedup_of_first": None if not ratio else round(1 / ratio, 9)})
        table.append({"mode": md, "vm": "chip", "utilization": round(m.utilization, 9),
                      "total_cycles": m.total_cycles})
    return {"metrics_version": METRICS_VERSION, "scenario": scenario.name, "modes": list(modes),
            "rows": table, "runs": {md: runs[md].to_dict() for md in modes}}


def apply_parameter(scenario: Scenario, parameter: str, value) -> Scenario:
    if parameter not in SWEEP_PARAMETERS:
        raise UnknownParameter(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")
    if parameter == "tlb_entries":
        chip = dict(scenario.chip, range_tlb_entries=int(value), page_tlb_entries=int(value))
        return scenario.replace(chip=chip)
    if parameter == "packets":
        return scenario.replace(params=dict(scenario.params, packets=[int(value)]))
    if parameter == "cores":
        if scenario.kind == "translation":
            ws = [dict(w, cores=int(value)) for w in scenario.params.get("workloads", [])]
            return scenario.replace(params=dict(scenario.params, workloads=ws))
        vnpus = [dict(v, cores=int(value)) for v in scenario.vnpus]
        return scenario.replace(vnpus=vnpus)
    vnpus = [dict(v, strategy=str(value)) for v in scenario.vnpus]
    return scenario.replace(vnpus=vnpus)


def sweep(parameter: str, values: list, scenario: Scenario) -> list:
    """One run per value; returns long-form rows ``(scenario, vm, metric, value)``."""
    if parameter not in SWEEP_PARAMETERS:
        raise UnknownParameter(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")
    rows = []
    for v in values:
        m = run(apply_parameter(scenario, parameter, v))
        label = f"{scenario.name}[{parameter}={v}]"
        rows += m.rows(label)
        rows += _note_rows(label, m.notes)
    return rows


def _note_rows(label: str, notes: dict) -> list:
    """Flatten the micro-benchmark tables in ``notes`` into long-form rows."""
    out = []
    for key in ("vrouter", "broadcast", "translation"):
        for r in notes.get(key, []):
            ident = {"vrouter": "packets", "broadcast": "receivers", "translation": "workload"}[key]
            for k, v in sorted(r.items()):
                if k != ident:
                    out.append((label, f"{key}:{r[ident]}", k, v))
    return out


# ---------------------------------------------------------------------------
# output

def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "vm", "metric", "value"])
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_metrics(m: Metrics, out_dir, scenario_name: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "metrics.json", out / "metrics.csv"
    jpath.write_text(m.to_json())
    cpath.write_text(rows_to_csv(m.rows(scenario_name) + _note_rows(scenario_name, m.notes)))
    return jpath, cpath


def run_scenario(path, out_dir=None, *, seed: int | None = None, mode: str | None = None) -> Metrics:
    """Load, run and (optionally) write outputs for one scenario file."""
    sc = Scenario.load(path)
    if seed is not None:
        sc = sc.replace(seed=seed)
    trace = None
    if out_dir is not None and os.environ.get("NPUVSIM_LOG", "").lower() == "trace":
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        trace = str(Path(out_dir) / "trace.txt")
    m = run(sc, mode=mode, trace_path=trace) if sc.kind == "pipeline" else run(sc, mode=mode)
    if out_dir is not None:
        write_metrics(m, out_dir, sc.name)
    return m
