"""Virtual-to-physical core routing: routing tables, DOR and confined routes.

Core IDs are row-major on a ``width x height`` mesh.  Ports follow screen
orientation: ``N`` decreases y, ``S`` increases y, ``E`` increases x.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import networkx as nx

from .errors import (DirectionLoop, DuplicatePhysicalCore, MissingDirection, OutOfBounds,
                     UnmappedVirtualCore)

ROUTING_PACKET_BYTES = 2048


class Port(str, enum.Enum):
    N = "N"
    S = "S"
    E = "E"
    W = "W"
    LOCAL = "L"


_STEP = {Port.N: (0, -1), Port.S: (0, 1), Port.E: (1, 0), Port.W: (-1, 0), Port.LOCAL: (0, 0)}


def xy(core: int, width: int) -> tuple[int, int]:
    return core % width, core // width


def core_id(x: int, y: int, width: int) -> int:
    return y * width + x


def neighbor(core: int, port: Port, width: int, height: int) -> int:
    x, y = xy(core, width)
    dx, dy = _STEP[Port(port)]
    nx_, ny = x + dx, y + dy
    if not (0 <= nx_ < width and 0 <= ny < height):
        raise OutOfBounds(f"port {Port(port).value} of core {core} leaves the mesh")
    return core_id(nx_, ny, width)


def port_towards(a: int, b: int, width: int) -> Port:
    ax, ay = xy(a, width)
    bx, by = xy(b, width)
    if abs(ax - bx) + abs(ay - by) != 1:
        raise ValueError(f"cores {a} and {b} are not mesh neighbours")
    if bx > ax:
        return Port.E
    if bx < ax:
        return Port.W
    return Port.S if by > ay else Port.N


@dataclass(frozen=True)
class RoutingTable:
    """Per-VM virtual->physical core map, standard or compact form.

    Compact tables store only the first virtual and physical IDs plus the
    rectangle shape; lookups are offset arithmetic on the physical mesh.
    ``directions`` optionally pins the output port per (relay, destination)
    physical core pair.
    """

    vmid: int
    form: str                      # "standard" | "compact"
    mesh_shape: tuple              # physical (width, height)
    entries: dict = field(default_factory=dict)
    v_base: int = 0
    p_base: int = 0
    shape: tuple = (0, 0)          # compact block (width, height)
    directions: dict | None = None

    @property
    def size(self) -> int:
        if self.form == "compact":
            return self.shape[0] * self.shape[1]
        return len(self.entries)

    def physical_cores(self) -> frozenset:
        if self.form == "compact":
            return frozenset(translate_core(self, v) for v in range(self.v_base, self.v_base + self.size))
        return frozenset(self.entries.values())

    def as_mapping(self) -> dict:
        if self.form == "compact":
            return {v: translate_core(self, v) for v in range(self.v_base, self.v_base + self.size)}
        return dict(self.entries)

    def meta_bytes(self, core: int | None = None) -> int:
        """SRAM footprint of the table (plus the direction rows of ``core``)."""
        base = 16 if self.form == "compact" else 8 + 4 * len(self.entries)
        if self.directions and core is not None:
            base += 4 * sum(1 for (relay, _dst) in self.directions if relay == core)
        return base

    def with_directions(self, directions: dict) -> "RoutingTable":
        return RoutingTable(self.vmid, self.form, self.mesh_shape, self.entries, self.v_base,
                            self.p_base, self.shape, dict(directions))

    def to_dict(self) -> dict:
        d = {"vmid": self.vmid, "form": self.form, "mesh_shape": list(self.mesh_shape)}
        if self.form == "compact":
            d["base"] = {"v_base": self.v_base, "p_base": self.p_base}
            d["shape"] = list(self.shape)
        else:
            d["entries"] = [[v, p] for v, p in sorted(self.entries.items())]
        if self.directions is not None:
            d["directions"] = [[r, t, Port(p).value] for (r, t), p in sorted(self.directions.items())]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingTable":
        dirs = None
        if "directions" in d:
            dirs = {(r, t): Port(p) for r, t, p in d["directions"]}
        mesh = tuple(d["mesh_shape"])
        if d["form"] == "compact":
            return build_routing_table(d["vmid"], compact=(d["base"]["v_base"], d["base"]["p_base"],
                                                           tuple(d["shape"])),
                                       mesh_shape=mesh, directions=dirs)
        return build_routing_table(d["vmid"], {v: p for v, p in d["entries"]}, mesh_shape=mesh,
                                   directions=dirs)


def build_routing_table(vmid: int, mapping: dict | None = None, *, compact: tuple | None = None,
                        mesh_shape: tuple, directions: dict | None = None) -> RoutingTable:
    """Build a standard table from ``mapping`` or a compact one from
    ``compact=(v_base, p_base, (w, h))``."""
    width, height = mesh_shape
    dirs = None if directions is None else {k: Port(v) for k, v in directions.items()}
    if compact is not None:
        v_base, p_base, (w, h) = compact
        px, py = xy(p_base, width)
        if w < 1 or h < 1 or p_base < 0 or px + w > width or py + h > height:
            raise OutOfBounds(f"compact block {w}x{h} at core {p_base} leaves the {width}x{height} mesh")
        return RoutingTable(vmid, "compact", (width, height), {}, v_base, p_base, (w, h), dirs)
    if mapping is None:
        raise ValueError("either mapping or compact is required")
    seen = {}
    for v, p in sorted(mapping.items()):
        if not 0 <= p < width * height:
            raise OutOfBounds(f"physical core {p} outside the mesh")
        if p in seen:
            raise DuplicatePhysicalCore(f"virtual cores {seen[p]} and {v} both map to physical core {p}")
        seen[p] = v
    return RoutingTable(vmid, "standard", (width, height), dict(sorted(mapping.items())), directions=dirs)


def translate_core(table: RoutingTable, v_core: int) -> int:
    if table.form == "compact":
        off = v_core - table.v_base
        if not 0 <= off < table.size:
            raise UnmappedVirtualCore(f"vm {table.vmid}: virtual core {v_core} not mapped")
        w = table.shape[0]
        dy, dx = divmod(off, w)
        return table.p_base + dy * table.mesh_shape[0] + dx
    try:
        return table.entries[v_core]
    except KeyError:
        raise UnmappedVirtualCore(f"vm {table.vmid}: virtual core {v_core} not mapped") from None


def dor_route(src: int, dst: int, width: int, height: int) -> list:
    """Dimension-order (X then Y) path from ``src`` to ``dst`` inclusive."""
    for c in (src, dst):
        if not 0 <= c < width * height:
            raise OutOfBounds(f"core {c} outside the {width}x{height} mesh")
    x, y = xy(src, width)
    tx, ty = xy(dst, width)
    path = [src]
    while x != tx:
        x += 1 if tx > x else -1
        path.append(core_id(x, y, width))
    while y != ty:
        y += 1 if ty > y else -1
        path.append(core_id(x, y, width))
    return path


def constrained_route(src: int, dst: int, table: RoutingTable) -> list:
    """Follow the table's per-relay output ports from ``src`` to ``dst``."""
    if table.directions is None:
        raise MissingDirection(f"vm {table.vmid}: routing table has no directions")
    width, height = table.mesh_shape
    limit = width * height
    path = [src]
    cur = src
    while cur != dst:
        port = table.directions.get((cur, dst))
        if port is None or port is Port.LOCAL:
            raise MissingDirection(f"vm {table.vmid}: no direction at core {cur} towards {dst}")
        cur = neighbor(cur, port, width, height)
        path.append(cur)
        if len(path) > limit:
            raise DirectionLoop(f"vm {table.vmid}: route {src}->{dst} revisits cores: {path[:8]}...")
    return path


def detect_interference(path: list, vm_cores) -> bool:
    """True iff an intermediate hop of ``path`` is a core outside ``vm_cores``."""
    vm_cores = set(vm_cores)
    return any(c not in vm_cores for c in path[1:-1])


def xy_directions(cores, width: int, height: int) -> dict:
    """DOR directions for every ordered pair of ``cores`` (relays anywhere on the path)."""
    dirs = {}
    cores = sorted(cores)
    for s in cores:
        for d in cores:
            if s == d:
                continue
            path = dor_route(s, d, width, height)
            for a, b in zip(path, path[1:]):
                dirs[(a, d)] = port_towards(a, b, width)
    return dirs


def confined_directions(cores, width: int, height: int) -> dict:
    """Deadlock-free directions that keep every route inside ``cores``.

    Links of the VM's induced subgraph are oriented up/down against a BFS
    spanning tree rooted at the smallest core; a route may climb and then
    descend but never climb after descending.  For each destination the
    shortest such route is fixed per relay, so the table is destination
    based.  Raises ``ValueError`` if ``cores`` is not connected.
    """
    cores = sorted(set(cores))
    if not cores:
        return {}
    members = set(cores)
    adj = {c: sorted(n for n in _mesh_neighbors(c, width, height) if n in members) for c in cores}
    root = cores[0]
    level = {root: 0}
    q = deque([root])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in level:
                level[v] = level[u] + 1
                q.append(v)
    if len(level) != len(cores):
        raise ValueError("confined directions need a connected core set")
    rank = {c: (level[c], c) for c in cores}

    def is_up(a, b):
        return rank[b] < rank[a]

    dirs = {}
    for dst in cores:
        # down_dist[u]: hops of an all-down route u -> dst (reverse BFS over up links)
        down = {dst: 0}
        q = deque([dst])
        while q:
            v = q.popleft()
            for u in adj[v]:
                # u -> v must be a down link
                if u not in down and not is_up(u, v):
                    down[u] = down[v] + 1
                    q.append(u)
        # legal[u]: hops of the shortest up*down* route u -> dst
        legal = dict(down)
        changed = True
        while changed:
            changed = False
            for u in cores:
                for v in adj[u]:
                    if is_up(u, v) and v in legal and legal.get(u, 1 << 30) > legal[v] + 1:
                        legal[u] = legal[v] + 1
                        changed = True
        for u in cores:
            if u == dst:
                continue
            if u in down:
                nxt = min((v for v in adj[u] if not is_up(u, v) and down.get(v) == down[u] - 1))
            else:
                nxt = min(v for v in adj[u] if is_up(u, v) and legal.get(v) == legal[u] - 1)
            dirs[(u, dst)] = port_towards(u, nxt, width)
    return dirs


def _mesh_neighbors(c: int, width: int, height: int):
    x, y = xy(c, width)
    if x > 0:
        yield c - 1
    if x + 1 < width:
        yield c + 1
    if y > 0:
        yield c - width
    if y + 1 < height:
        yield c + width


@dataclass
class DeadlockReport:
    ok: bool
    cycle: list = field(default_factory=list)  # channels (a, b) forming one dependency cycle


def channel_dependency_graph(directions: dict, width: int, height: int) -> nx.DiGraph:
    """Channels are directed links; an edge joins two channels a packet holds back to back."""
    cdg = nx.DiGraph()
    nxt = {}
    for (relay, dst), port in directions.items():
        port = Port(port)
        if port is Port.LOCAL:
            continue
        b = neighbor(relay, port, width, height)
        nxt[(relay, dst)] = b
        cdg.add_node((relay, b))
    for (relay, dst), b in sorted(nxt.items()):
        if b == dst:
            continue
        c = nxt.get((b, dst))
        if c is not None:
            cdg.add_edge((relay, b), (b, c))
    return cdg


def validate_directions(table, mesh_shape: tuple | None = None) -> DeadlockReport:
    """Deadlock check: the channel dependency graph must be acyclic."""
    if isinstance(table, RoutingTable):
        directions = table.directions or {}
        mesh_shape = mesh_shape or table.mesh_shape
    else:
        directions = table
    width, height = mesh_shape
    cdg = channel_dependency_graph(directions, width, height)
    try:
        cycle = nx.find_cycle(cdg)
    except nx.NetworkXNoCycle:
        return DeadlockReport(True)
    return DeadlockReport(False, [u for u, _v in cycle])
