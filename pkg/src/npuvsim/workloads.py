"""Synthetic ML pipeline workloads and their lowering to simulator tasks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import networkx as nx

from .chip import ChipConfig, KernelOp
from .errors import CapacityExceeded, ConfigError
from .hypervisor import pipeline_order
from .sim import Task
from .topology import Topology

GPT_PRESETS = {
    # name: (layers, d_model)
    "small": (12, 768),
    "middle": (24, 896),
    "large": (36, 1024),
}
GPT_SEQ = 128

RESNET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
RESNET_CHANNELS = (64, 128, 256, 512)
RESNET_SPATIAL = (56, 28, 14, 7)


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    weight_bytes: int
    op: KernelOp
    activation_bytes: int


@dataclass
class LayerGraph:
    name: str
    layers: list
    edges: list = field(default_factory=list)   # (producer, consumer) layer indices

    def __post_init__(self):
        n = len(self.layers)
        if n == 0:
            raise ValueError("a layer graph needs at least one layer")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a missing layer")
        g = self.to_networkx()
        if not nx.is_directed_acyclic_graph(g):
            raise ValueError("layer graph must be acyclic")
        reach = nx.descendants(g, 0) | {0}
        if len(reach) != n:
            raise ValueError("every layer must be reachable from the input layer")

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.layers)))
        g.add_edges_from(self.edges)
        return g

    def predecessors(self, i: int) -> list:
        return sorted(a for a, b in self.edges if b == i)

    @property
    def total_weight_bytes(self) -> int:
        return sum(l.weight_bytes for l in self.layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "edges": [list(e) for e in self.edges],
                "layers": [{"name": l.name, "kind": l.kind, "weight_bytes": l.weight_bytes,
                            "activation_bytes": l.activation_bytes, "op": l.op.to_dict()}
                           for l in self.layers]}


def _conv(name, h, c_in, c_out, k) -> Layer:
    op = KernelOp("conv", (h, h, c_in, c_out, k, k), bytes_in=h * h * c_in, bytes_out=h * h * c_out)
    return Layer(name, "conv", c_in * c_out * k * k, op, h * h * c_out)


def build_resnet_like(depth: int = 18) -> LayerGraph:
    """Stem conv, two-conv residual blocks in four stages, classifier.

    Each block ``(a, a+1)`` gets a skip edge from its input producer
    ``a-1`` to the layer consuming its output, ``a+2``.
    """
    if depth not in RESNET_BLOCKS:
        raise ConfigError(f"resnet depth must be one of {sorted(RESNET_BLOCKS)}")
    layers = [_conv("stem", 56, 3, 64, 7)]
    blocks = []
    c_prev = 64
    for stage, n_blocks in enumerate(RESNET_BLOCKS[depth]):
        c, h = RESNET_CHANNELS[stage], RESNET_SPATIAL[stage]
        for b in range(n_blocks):
            a = len(layers)
            layers.append(_conv(f"s{stage}b{b}c0", h, c_prev, c, 3))
            layers.append(_conv(f"s{stage}b{b}c1", h, c, c, 3))
            blocks.append(a)
            c_prev = c
    fc = KernelOp("matmul", (1, 512, 1000), bytes_in=512, bytes_out=1000)
    layers.append(Layer("fc", "fc", 512 * 1000, fc, 1000))
    edges = [(i, i + 1) for i in range(len(layers) - 1)]
    edges += [(a - 1, a + 2) for a in blocks]
    return LayerGraph(f"resnet{depth}", layers, sorted(edges))


def build_gpt_like(preset: str = "small", n_layers: int | None = None) -> LayerGraph:
    """Linear chain of identical transformer blocks (int8 weights)."""
    if preset not in GPT_PRESETS:
        raise ConfigError(f"gpt preset must be one of {sorted(GPT_PRESETS)}")
    default_layers, d = GPT_PRESETS[preset]
    n = default_layers if n_layers is None else n_layers
    if n < 1:
        raise ValueError("n_layers must be >= 1")
    s = GPT_SEQ
    op = KernelOp("matmul", (s, d, 12 * d + 2 * s), bytes_in=s * d, bytes_out=s * d)
    layers = [Layer(f"block{i}", "transformer", 12 * d * d, op, s * d) for i in range(n)]
    return LayerGraph(f"gpt-{preset}", layers, [(i, i + 1) for i in range(n - 1)])


def load_graph(spec) -> LayerGraph:
    """Custom graph from a dict or JSON path with ``layers`` and ``edges``."""
    if isinstance(spec, str):
        with open(spec) as f:
            spec = json.load(f)
    try:
        layers = []
        for i, l in enumerate(spec["layers"]):
            op = KernelOp(l["op"]["kind"], tuple(l["op"].get("dims", ())), l["op"].get("bytes_in", 0),
                          l["op"].get("bytes_out", 0))
            layers.append(Layer(l.get("name", f"l{i}"), l.get("kind", op.kind), int(l["weight_bytes"]), op,
                                int(l["activation_bytes"])))
        edges = [tuple(e) for e in spec.get("edges", [(i, i + 1) for i in range(len(layers) - 1)])]
        return LayerGraph(spec.get("name", "custom"), layers, edges)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed layer graph: {exc}") from exc


def workload_from_name(name: str) -> LayerGraph:
    """``resnet18``, ``resnet34``, ``gpt-small`` ... ``gpt-large``."""
    if name.startswith("resnet"):
        return build_resnet_like(int(name[6:]))
    if name.startswith("gpt-"):
        return build_gpt_like(name[4:])
    raise ConfigError(f"unknown workload {name!r}")


# ---------------------------------------------------------------------------
# mapping

@dataclass
class CoreMapping:
    stages: list               # list of layer-index lists, in pipeline order
    layer_core: dict           # layer -> virtual core
    footprint: dict            # virtual core -> weight bytes

    @property
    def cores_used(self) -> int:
        return len(self.stages)


def _partition(costs: list, weights: list, k: int, cap: int) -> list:
    """Contiguous split into exactly ``k`` parts minimising the largest cost.

    Among optimal splits the stages are filled greedily from the front.
    """
    n = len(costs)
    prefix = [0]
    for c in costs:
        prefix.append(prefix[-1] + c)
    wpre = [0]
    for w in weights:
        wpre.append(wpre[-1] + w)
    inf = float("inf")
    # best[j][i]: min bottleneck for the first i layers in j stages
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    best[0][0] = 0
    for j in range(1, k + 1):
        for i in range(j, n + 1):
            for s in range(j - 1, i):
                if wpre[i] - wpre[s] > cap or best[j - 1][s] == inf:
                    continue
                v = max(best[j - 1][s], prefix[i] - prefix[s])
                if v < best[j][i]:
                    best[j][i] = v
    bottleneck = best[k][n]
    if bottleneck == inf:
        raise CapacityExceeded("layers do not fit the cores' weight zones")
    # greedy fill that still leaves a feasible tail
    stages = []
    start = 0
    for j in range(k, 0, -1):
        # longest stage that stays within the bottleneck and leaves a feasible tail
        end = None
        for e in range(start + 1, n - (j - 1) + 1):
            if prefix[e] - prefix[start] > bottleneck or wpre[e] - wpre[start] > cap:
                break
            if _tail_ok(j - 1, e, n, cap, bottleneck, prefix, wpre):
                end = e
        assert end is not None
        stages.append(list(range(start, end)))
        start = end
    return stages


def _tail_ok(j, start, n, cap, bottleneck, prefix, wpre) -> bool:
    """Can layers ``[start, n)`` be split into ``j`` stages within the bottleneck?"""
    if j == 0:
        return start == n
    if n - start < j:
        return False
    # greedy check: pack as much as possible per stage
    s = start
    for r in range(j, 0, -1):
        e = s + 1
        if prefix[e] - prefix[s] > bottleneck or wpre[e] - wpre[s] > cap:
            return False
        while e < n - (r - 1) and prefix[e + 1] - prefix[s] <= bottleneck and wpre[e + 1] - wpre[s] <= cap:
            e += 1
        s = e
    return s == n


def map_layers(graph: LayerGraph, vnpu_or_cores, config: ChipConfig | None = None) -> CoreMapping:
    """Contiguous pipeline partitioning balancing per-core compute.

    ``vnpu_or_cores`` is a :class:`VirtualNpu`, a :class:`Topology` or a core
    count.  Stage ``s`` goes to the ``s``-th virtual core in boustrophedon
    order of the requested topology.
    """
    from .chip import compute_cycles
    from .hypervisor import VirtualNpu

    config = config or ChipConfig()
    if isinstance(vnpu_or_cores, VirtualNpu):
        order = pipeline_order(vnpu_or_cores.requested_topology)
    elif isinstance(vnpu_or_cores, Topology):
        order = pipeline_order(vnpu_or_cores)
    else:
        order = list(range(int(vnpu_or_cores)))
    if not order:
        raise ValueError("no cores to map onto")
    cap = config.weight_zone_bytes
    costs = [compute_cycles(l.op, config) for l in graph.layers]
    weights = [l.weight_bytes for l in graph.layers]
    if max(weights) > cap or graph.total_weight_bytes > cap * len(order):
        raise CapacityExceeded(
            f"{graph.name}: {graph.total_weight_bytes} B of weights exceed {len(order)} weight zones")
    k = min(len(order), len(graph.layers))
    stages = _partition(costs, weights, k, cap)
    layer_core = {}
    footprint = {}
    for s, layers in enumerate(stages):
        v = order[s]
        for l in layers:
            layer_core[l] = v
        footprint[v] = sum(weights[l] for l in layers)
    return CoreMapping(stages, layer_core, footprint)


# ---------------------------------------------------------------------------
# lowering to tasks

def _chunks(vaddr: int, nbytes: int, chunk: int | None):
    if not chunk:
        yield vaddr, nbytes
        return
    off = 0
    while off < nbytes:
        n = min(chunk, nbytes - off)
        yield vaddr + off, n
        off += n


def emit_events(graph: LayerGraph, mapping: CoreMapping, iterations: int, *, vmid: int = 0,
                tensor_vaddrs: list | None = None, chunk_bytes: int | None = None,
                start_tid: int = 0) -> list:
    """Tasks for ``iterations`` passes of ``graph``.

    Per iteration each core loads its layers' weights in ascending virtual
    address order, runs its kernels, and forwards activations to consumers on
    other cores.  Every iteration emits the same address sequence.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if tensor_vaddrs is None:
        tensor_vaddrs = default_tensor_vaddrs(graph)
    order = sorted(range(len(graph.layers)), key=lambda l: (tensor_vaddrs[l], l))
    consumers = {}
    for a, b in graph.edges:
        consumers.setdefault(a, []).append(b)
    tasks = []
    tid = start_tid
    prev_kernel = {}

    def add(**kw):
        nonlocal tid
        t = Task(tid=tid, vm=vmid, **kw)
        tasks.append(t)
        tid += 1
        return t.tid

    for it in range(iterations):
        loads = {}
        for l in order:
            layer = graph.layers[l]
            core = mapping.layer_core[l]
            ids = [add(kind="load", core=core, vaddr=va, nbytes=n, key=(l, va), iteration=it, weight=True)
                   for va, n in _chunks(tensor_vaddrs[l], layer.weight_bytes, chunk_bytes)]
            loads[l] = ids
        kernel = {}
        xfer = {}
        for l in range(len(graph.layers)):
            core = mapping.layer_core[l]
            deps = list(loads[l])
            for u in graph.predecessors(l):
                if mapping.layer_core[u] == core:
                    deps.append(kernel[u])
                else:
                    deps.append(xfer[(u, core)])
            if l in prev_kernel:
                deps.append(prev_kernel[l])
            kernel[l] = add(kind="kernel", core=core, op=graph.layers[l].op, deps=tuple(deps), iteration=it)
            prev_kernel[l] = kernel[l]
            for dst in sorted({mapping.layer_core[c] for c in consumers.get(l, ())} - {core}):
                xfer[(l, dst)] = add(kind="xfer", core=core, dst=dst, nbytes=graph.layers[l].activation_bytes,
                                     deps=(kernel[l],), iteration=it)
    return tasks


def default_tensor_vaddrs(graph: LayerGraph, min_block: int = 1 << 20) -> list:
    """Virtual base per layer as laid out by the hypervisor: one aligned
    power-of-two block per tensor, in layer order."""
    from .hypervisor import BuddyAllocator
    out = []
    va = 0
    for l in graph.layers:
        size = BuddyAllocator.block_size(l.weight_bytes, min_block)
        va = -(-va // size) * size
        out.append(va)
        va += size
    return out


def weight_trace(graph: LayerGraph, mapping: CoreMapping, iterations: int,
                 tensor_vaddrs: list | None = None, chunk_bytes: int | None = None) -> dict:
    """Per virtual core, per iteration, the ordered (vaddr, len) weight loads."""
    tasks = emit_events(graph, mapping, iterations, tensor_vaddrs=tensor_vaddrs, chunk_bytes=chunk_bytes)
    trace = {}
    for t in tasks:
        if t.kind == "load":
            trace.setdefault(t.core, [[] for _ in range(iterations)])[t.iteration].append((t.vaddr, t.nbytes))
    return trace


def microbench_broadcast(n: int, kernel: KernelOp | None = None, mode: str = "noc", *, vmid: int = 0,
                         iterations: int = 1) -> tuple[list, int]:
    """Kernel on virtual core 0 whose result is broadcast to cores 1..n.

    Returns ``(tasks, cores_needed)``.
    """
    if n < 1:
        raise ValueError("broadcast needs at least one receiver")
    kernel = kernel or KernelOp("matmul", (64, 64, 64), bytes_in=8192, bytes_out=4096)
    payload = kernel.bytes_out or 1
    tasks = []
    prev = None
    for it in range(iterations):
        k = Task(tid=len(tasks), vm=vmid, kind="kernel", core=0, op=kernel, iteration=it,
                 deps=() if prev is None else (prev,))
        tasks.append(k)
        b = Task(tid=len(tasks), vm=vmid, kind="bcast", core=0, dsts=tuple(range(1, n + 1)),
                 nbytes=payload, mode=mode, deps=(k.tid,), iteration=it)
        tasks.append(b)
        prev = b.tid
    return tasks, n + 1
