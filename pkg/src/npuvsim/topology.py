"""Core topology graphs and the topology-mapping core allocator.

A :class:`Topology` is an undirected labelled graph of NPU cores.  Physical
chips are 2D meshes; requested (virtual) topologies may be arbitrary.  The
allocator picks free physical cores whose induced subgraph is closest to a
requested topology under a topology edit distance.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator

import networkx as nx
from networkx.algorithms import isomorphism

from .errors import InsufficientCores, NoCandidate, SizeMismatch, TopologyLockIn

DEFAULT_CANDIDATE_CAP = 100_000
# zero-cost embeddings examined before settling on the best seen so far
EXACT_MATCH_CAP = 1_000
COMPLEMENT_LIMIT = 500_000


@dataclass(frozen=True)
class NodeAttr:
    """Per-core attributes used by node matching.

    ``abbr`` tags heterogeneous core kinds (e.g. ``"SA"`` vs ``"VU"``).
    ``mem_distance`` is the hop distance to the nearest memory interface, or
    ``None`` when the requester does not care.
    """

    abbr: str = "core"
    mem_distance: int | None = None


def _norm_edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True, eq=False)
class Topology:
    nodes: frozenset
    edges: frozenset
    coords: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    shape: tuple | None = None  # ("mesh", width, height) for full meshes

    def __post_init__(self):
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a}, {b}) has an endpoint outside nodes")
            if a >= b:
                raise ValueError(f"edge ({a}, {b}) is not normalised (a < b)")
        missing = [n for n in self.nodes if n not in self.attrs]
        if missing:
            attrs = dict(self.attrs)
            for n in missing:
                attrs[n] = NodeAttr()
            object.__setattr__(self, "attrs", attrs)

    # -- constructors -------------------------------------------------

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Iterable[tuple[int, int]],
                   attrs: dict | None = None, coords: dict | None = None) -> "Topology":
        nodes = frozenset(nodes)
        edges = frozenset(_norm_edge(a, b) for a, b in edges if a != b)
        return cls(nodes, edges, dict(coords or {}), dict(attrs or {}))

    @classmethod
    def mesh(cls, width: int, height: int, mem_interfaces: Iterable[int] | None = None,
             abbr: dict | None = None) -> "Topology":
        """A ``width x height`` 2D mesh with row-major core IDs.

        ``mem_interfaces`` lists the cores wired to a memory interface; every
        node then records its hop distance to the nearest one.
        """
        if width < 1 or height < 1:
            raise ValueError("mesh dimensions must be positive")
        coords = {y * width + x: (x, y) for y in range(height) for x in range(width)}
        edges = set()
        for n, (x, y) in coords.items():
            if x + 1 < width:
                edges.add((n, n + 1))
            if y + 1 < height:
                edges.add((n, n + width))
        dist = {}
        if mem_interfaces is not None:
            ifaces = [coords[i] for i in mem_interfaces]
            for n, (x, y) in coords.items():
                dist[n] = min(abs(x - ix) + abs(y - iy) for ix, iy in ifaces)
        abbr = abbr or {}
        attrs = {n: NodeAttr(abbr.get(n, "core"), dist.get(n)) for n in coords}
        return cls(frozenset(coords), frozenset(edges), coords, attrs, ("mesh", width, height))

    @classmethod
    def path(cls, n: int) -> "Topology":
        return cls.from_edges(range(n), [(i, i + 1) for i in range(n - 1)],
                              coords={i: (i, 0) for i in range(n)})

    @classmethod
    def snake(cls, k: int, width: int) -> "Topology":
        """``k`` cores filled into rows of ``width`` in boustrophedon order.

        Full rows form a mesh; a partial last row sits on the side the snake
        arrives from.  Virtual IDs are row-major over the occupied cells, so a
        ``k`` that fills whole rows gives exactly :meth:`mesh`.
        """
        if k < 1 or width < 1:
            raise ValueError("snake needs k >= 1 and width >= 1")
        cells = []
        for i in range(k):
            y, off = divmod(i, width)
            x = off if y % 2 == 0 else width - 1 - off
            cells.append((x, y))
        cells.sort(key=lambda c: (c[1], c[0]))
        coords = {i: c for i, c in enumerate(cells)}
        index = {c: i for i, c in coords.items()}
        edges = []
        for i, (x, y) in coords.items():
            for nb in ((x + 1, y), (x, y + 1)):
                if nb in index:
                    edges.append((i, index[nb]))
        return cls.from_edges(range(k), edges, coords=coords)

    # -- queries ------------------------------------------------------

    @cached_property
    def adjacency(self) -> dict:
        adj = {n: set() for n in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return {n: frozenset(v) for n, v in adj.items()}

    @cached_property
    def sorted_nodes(self) -> tuple:
        return tuple(sorted(self.nodes))

    def __len__(self):
        return len(self.nodes)

    def has_edge(self, a: int, b: int) -> bool:
        return _norm_edge(a, b) in self.edges

    def degree(self, n: int) -> int:
        return len(self.adjacency[n])

    @property
    def width(self) -> int:
        if self.shape is None:
            raise ValueError("topology is not a full mesh")
        return self.shape[1]

    @property
    def height(self) -> int:
        if self.shape is None:
            raise ValueError("topology is not a full mesh")
        return self.shape[2]

    def subgraph(self, nodes: Iterable[int]) -> "Topology":
        """Induced subgraph; keeps coordinates and attributes."""
        keep = frozenset(nodes)
        unknown = keep - self.nodes
        if unknown:
            raise ValueError(f"nodes {sorted(unknown)} not in topology")
        edges = frozenset(e for e in self.edges if e[0] in keep and e[1] in keep)
        return Topology(keep, edges,
                        {n: self.coords[n] for n in keep if n in self.coords},
                        {n: self.attrs[n] for n in keep})

    def row_major(self) -> list:
        """Node IDs sorted by mesh coordinate (y, x); falls back to ID order."""
        if all(n in self.coords for n in self.nodes):
            return sorted(self.nodes, key=lambda n: (self.coords[n][1], self.coords[n][0], n))
        return list(self.sorted_nodes)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        for n in self.sorted_nodes:
            a = self.attrs[n]
            g.add_node(n, abbr=a.abbr, mem_distance=a.mem_distance)
        g.add_edges_from(sorted(self.edges))
        return g

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.sorted_nodes),
            "edges": [list(e) for e in sorted(self.edges)],
            "coords": {str(n): list(self.coords[n]) for n in self.sorted_nodes if n in self.coords},
            "attrs": {str(n): {"abbr": self.attrs[n].abbr, "mem_distance": self.attrs[n].mem_distance}
                      for n in self.sorted_nodes},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        attrs = {int(k): NodeAttr(v.get("abbr", "core"), v.get("mem_distance"))
                 for k, v in d.get("attrs", {}).items()}
        coords = {int(k): tuple(v) for k, v in d.get("coords", {}).items()}
        return cls.from_edges(d["nodes"], [tuple(e) for e in d["edges"]], attrs, coords)


def is_connected(t: Topology) -> bool:
    """True iff ``t`` has at most one connected component."""
    if len(t.nodes) <= 1:
        return True
    start = t.sorted_nodes[0]
    seen = {start}
    stack = [start]
    adj = t.adjacency
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(t.nodes)


def _is_connected_set(adj: dict, nodes: frozenset) -> bool:
    if len(nodes) <= 1:
        return True
    start = min(nodes)
    seen = {start}
    stack = [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb in nodes and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(nodes)


# ---------------------------------------------------------------------------
# edit costs

@dataclass(frozen=True)
class EditCostModel:
    """Costs for node substitution and edge insertion/deletion.

    ``edge_costs`` overrides the deletion cost of individual requested edges;
    ``critical_edges`` adds an extra penalty when a requested edge is missing
    from the mapped topology.  Memory-distance penalties only apply when both
    compared nodes carry a distance.
    """

    node_cost: float = 1
    edge_insert_cost: float = 1
    edge_delete_cost: float = 1
    edge_costs: dict = field(default_factory=dict)
    critical_edges: dict = field(default_factory=dict)
    memory_penalty_per_hop: float = 1

    def __post_init__(self):
        vals = [self.node_cost, self.edge_insert_cost, self.edge_delete_cost,
                self.memory_penalty_per_hop, *self.edge_costs.values(),
                *self.critical_edges.values()]
        if any(v < 0 for v in vals):
            raise ValueError("edit costs must be nonnegative")
        object.__setattr__(self, "edge_costs", {_norm_edge(*e): c for e, c in self.edge_costs.items()})
        object.__setattr__(self, "critical_edges",
                           {_norm_edge(*e): c for e, c in self.critical_edges.items()})

    def deletion_cost(self, edge: tuple[int, int]) -> float:
        e = _norm_edge(*edge)
        return self.edge_costs.get(e, self.edge_delete_cost) + self.critical_edges.get(e, 0)

    def memory_penalty(self, d1: int | None, d2: int | None) -> float:
        if d1 is None or d2 is None:
            return 0
        return self.memory_penalty_per_hop * abs(d1 - d2)


UNIT_COSTS = EditCostModel()


def node_match(n1: NodeAttr, n2: NodeAttr, cost_model: EditCostModel = UNIT_COSTS) -> float:
    cost = 0
    if n1.abbr != n2.abbr:
        cost += cost_model.node_cost
    return cost + cost_model.memory_penalty(n1.mem_distance, n2.mem_distance)


def edge_match(e1: tuple | None, e2: tuple | None, cost_model: EditCostModel = UNIT_COSTS) -> float:
    """Cost of aligning requested edge ``e1`` with candidate edge ``e2``."""
    if e1 is None and e2 is None:
        raise ValueError("edge_match needs at least one edge")
    if e1 is not None and e2 is not None:
        return 0
    if e2 is None:
        return cost_model.deletion_cost(e1)
    return cost_model.edge_insert_cost


# ---------------------------------------------------------------------------
# candidate enumeration

def canonical_key(t: Topology, rounds: int = 3) -> tuple:
    """Isomorphism-invariant hash of a labelled graph.

    Iterative neighbourhood refinement seeded with (attributes, degree).
    Equal keys are necessary but not sufficient for isomorphism.
    """
    adj = t.adjacency
    label = {n: hash((t.attrs[n].abbr, t.attrs[n].mem_distance, len(adj[n]))) for n in t.nodes}
    for _ in range(rounds):
        label = {n: hash((label[n], tuple(sorted(label[m] for m in adj[n])))) for n in t.nodes}
    return (len(t.nodes), len(t.edges), tuple(sorted(label.values())))


def _attr_eq(a: dict, b: dict) -> bool:
    return a["abbr"] == b["abbr"] and a["mem_distance"] == b["mem_distance"]


def labelled_isomorphic(a: Topology, b: Topology) -> bool:
    return nx.is_isomorphic(a.to_networkx(), b.to_networkx(), node_match=_attr_eq)


def _esu(adj: dict, free: frozenset, k: int) -> Iterator[frozenset]:
    """Enumerate each connected ``k``-subset of ``free`` exactly once.

    Seeded expansion: every subgraph is grown from its smallest vertex and only
    extended through exclusive neighbours, so no set is produced twice.
    """
    order = sorted(free)

    def extend(sub: list, sub_set: set, ext: list, v: int):
        if len(sub) == k:
            yield frozenset(sub)
            return
        ext = list(ext)
        while ext:
            w = ext.pop(0)
            neigh_sub = set()
            for s in sub_set:
                neigh_sub |= adj[s]
            new_ext = set(ext)
            for u in adj[w]:
                if u in free and u > v and u not in sub_set and u not in neigh_sub:
                    new_ext.add(u)
            sub_set.add(w)
            sub.append(w)
            yield from extend(sub, sub_set, sorted(new_ext), v)
            sub.pop()
            sub_set.discard(w)

    for v in order:
        ext = sorted(u for u in adj[v] if u in free and u > v)
        yield from extend([v], {v}, ext, v)


def _connected_by_complement(adj: dict, free: frozenset, k: int) -> Iterator[frozenset]:
    for drop in itertools.combinations(sorted(free), len(free) - k):
        keep = free.difference(drop)
        if _is_connected_set(adj, keep):
            yield keep


@dataclass
class CandidateSet:
    candidates: list
    truncated: bool
    enumerated: int


def enumerate_candidates(t: Topology, allocated: Iterable[int], k: int,
                         require_connected: bool = True, dedup: bool = True,
                         cap: int = DEFAULT_CANDIDATE_CAP) -> CandidateSet:
    """Free-core sets of size ``k`` that could host a requested topology.

    With ``require_connected`` only connected induced subgraphs are produced.
    With ``dedup`` each labelled-isomorphism class keeps a single
    representative, the one whose sorted core list is smallest.  At most
    ``cap`` raw sets are examined; ``truncated`` reports whether that limit
    cut the enumeration short.
    """
    allocated = frozenset(allocated)
    free = frozenset(t.nodes - allocated)
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(free):
        raise InsufficientCores(f"requested {k} cores, only {len(free)} free")
    adj = t.adjacency
    if require_connected and k > len(free) // 2 and math.comb(len(free), k) <= COMPLEMENT_LIMIT:
        # near-full requests: ESU wanders through many dead branches, while
        # the removed cores are few enough to enumerate directly
        source = _connected_by_complement(adj, free, k)
    elif require_connected:
        source = _esu(adj, free, k)
    else:
        source = (frozenset(c) for c in itertools.combinations(sorted(free), k))

    truncated = False
    enumerated = 0
    raw = []
    for cand in source:
        if enumerated >= cap:
            truncated = True
            break
        enumerated += 1
        raw.append(tuple(sorted(cand)))

    if not dedup:
        return CandidateSet(raw, truncated, enumerated)

    classes: dict = {}
    for cand in raw:
        sub = t.subgraph(cand)
        bucket = classes.setdefault(canonical_key(sub), [])
        for i, (rep, rep_sub) in enumerate(bucket):
            if labelled_isomorphic(sub, rep_sub):
                if cand < rep:
                    bucket[i] = (cand, sub)
                break
        else:
            bucket.append((cand, sub))
    reps = sorted(rep for bucket in classes.values() for rep, _ in bucket)
    return CandidateSet(reps, truncated, enumerated)


# ---------------------------------------------------------------------------
# allocation

class Strategy(str, enum.Enum):
    EXACT = "exact"
    ZIGZAG = "zigzag"
    SIMILAR = "similar"
    FRAGMENTED = "fragmented"


@dataclass(frozen=True)
class AllocationRequest:
    vmid: int
    requested_topology: Topology
    strategy: Strategy = Strategy.SIMILAR
    require_connected: bool = True
    require_noninterference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if len(self.requested_topology.nodes) < 1:
            raise ValueError("requested topology must have at least one node")
        if self.strategy is Strategy.FRAGMENTED and self.require_connected:
            object.__setattr__(self, "require_connected", False)


@dataclass
class MappingResult:
    cores: tuple            # sorted physical core IDs
    mapping: dict           # virtual core -> physical core
    distance: float
    method: str             # "exact-match", "ged-exact", "ged-approx", "zigzag"
    candidates_evaluated: int = 0
    truncated: bool = False


def _zero_cost_matcher(cost_model: EditCostModel):
    def match(phys: dict, req: dict) -> bool:
        return node_match(NodeAttr(req["abbr"], req["mem_distance"]),
                          NodeAttr(phys["abbr"], phys["mem_distance"]), cost_model) == 0
    return match


def find_exact_placements(t: Topology, free: frozenset, t_req: Topology,
                          cost_model: EditCostModel = UNIT_COSTS, cap: int = EXACT_MATCH_CAP):
    """Zero-cost placements of ``t_req`` on free cores.

    Returns ``(cores, mapping, truncated)`` for the placement whose sorted core
    list is smallest (the first one a lexicographic walk over core
    combinations would reach), with the smallest virtual->physical mapping on
    that core set, or ``None`` when no zero-cost placement exists.  Only the
    first ``cap`` embeddings in VF2 order are compared; ``truncated`` says so.
    """
    host = t.subgraph(free).to_networkx()
    pattern = t_req.to_networkx()
    gm = isomorphism.GraphMatcher(host, pattern, node_match=_zero_cost_matcher(cost_model))
    best = None
    truncated = False
    for i, iso in enumerate(gm.subgraph_isomorphisms_iter()):
        if i >= cap:
            truncated = True
            break
        mapping = {v: p for p, v in iso.items()}
        key = (tuple(sorted(iso)), tuple(mapping[v] for v in t_req.sorted_nodes))
        if best is None or key < best[0]:
            best = (key, mapping)
    if best is None:
        return None
    (cores, _), mapping = best
    return cores, dict(sorted(mapping.items())), truncated


def _eval_candidate(args):
    from .ged import topo_edit_distance
    t_req, sub, cost_model, exact_limit, bound = args
    return topo_edit_distance(t_req, sub, cost_model, exact_limit=exact_limit, bound=bound)


def min_topology_edit_distance(t: Topology, allocated: Iterable[int], t_req: Topology,
                               cost_model: EditCostModel = UNIT_COSTS, *,
                               require_connected: bool = True, dedup: bool = True,
                               cap: int = DEFAULT_CANDIDATE_CAP, exact_limit: int = 12,
                               workers: int = 1) -> MappingResult:
    """Pick free cores whose induced topology is closest to ``t_req``.

    A zero-cost placement is returned immediately.  Otherwise every candidate
    is scored by topology edit distance and the minimum wins; ties go to the
    candidate with the smallest sorted core list, so the answer does not
    depend on ``workers``.
    """
    from .ged import topo_edit_distance, edit_lower_bound

    allocated = frozenset(allocated)
    free = frozenset(t.nodes - allocated)
    k = len(t_req.nodes)
    if k > len(free):
        raise InsufficientCores(f"requested {k} cores, only {len(free)} free")

    exact = find_exact_placements(t, free, t_req, cost_model, min(cap, EXACT_MATCH_CAP))
    if exact is not None:
        cores, mapping, trunc = exact
        return MappingResult(cores, mapping, 0, "exact-match", 0, trunc)

    cands = enumerate_candidates(t, allocated, k, require_connected, dedup, cap)
    if not cands.candidates:
        raise NoCandidate("no candidate core set satisfies the connectivity requirement")

    subs = [t.subgraph(c) for c in cands.candidates]
    best = None  # (distance, cores, result)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_candidate,
                                    [(t_req, s, cost_model, exact_limit, None) for s in subs],
                                    chunksize=16))
        for cores, res in zip(cands.candidates, results):
            if best is None or (res.distance, cores) < (best[0], best[1]):
                best = (res.distance, cores, res)
    else:
        for cores, sub in zip(cands.candidates, subs):
            bound = None if best is None else best[0]
            if bound is not None and edit_lower_bound(t_req, sub, cost_model) > bound:
                continue
            res = topo_edit_distance(t_req, sub, cost_model, exact_limit=exact_limit, bound=bound)
            if res is None:
                continue
            if best is None or (res.distance, cores) < (best[0], best[1]):
                best = (res.distance, cores, res)
    dist, cores, res = best
    return MappingResult(cores, dict(res.mapping), dist, f"ged-{res.method}",
                         len(cands.candidates), cands.truncated)


def allocate_cores(t: Topology, allocated: Iterable[int], request: AllocationRequest,
                   cost_model: EditCostModel = UNIT_COSTS, **opts) -> MappingResult:
    """Dispatch a core allocation request to its mapping strategy."""
    from .ged import mapping_cost

    allocated = frozenset(allocated)
    free = frozenset(t.nodes - allocated)
    t_req = request.requested_topology
    k = len(t_req.nodes)
    if k > len(free):
        raise InsufficientCores(f"vm {request.vmid}: requested {k} cores, only {len(free)} free")

    strategy = request.strategy
    if strategy is Strategy.EXACT:
        cap = min(opts.get("cap", EXACT_MATCH_CAP), EXACT_MATCH_CAP)
        exact = find_exact_placements(t, free, t_req, cost_model, cap)
        if exact is None:
            raise TopologyLockIn(
                f"vm {request.vmid}: {len(free)} free cores but no placement matches the requested topology")
        cores, mapping, trunc = exact
        return MappingResult(cores, mapping, 0, "exact-match", 0, trunc)

    if strategy is Strategy.ZIGZAG:
        chosen = [n for n in t.row_major() if n in free][:k]
        mapping = dict(zip(t_req.row_major(), chosen))
        mapping = dict(sorted(mapping.items()))
        dist = mapping_cost(t_req, t.subgraph(chosen), mapping, cost_model)
        return MappingResult(tuple(sorted(chosen)), mapping, dist, "zigzag")

    require_connected = request.require_connected and strategy is not Strategy.FRAGMENTED
    return min_topology_edit_distance(t, allocated, t_req, cost_model,
                                      require_connected=require_connected, **opts)


def check_request_size(t_req: Topology, candidate: Topology):
    if len(t_req.nodes) != len(candidate.nodes):
        raise SizeMismatch(f"requested {len(t_req.nodes)} nodes, candidate has {len(candidate.nodes)}")
