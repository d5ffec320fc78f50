"""Topology edit distance between equally sized labelled graphs.

Both graphs have the same node count, so an edit path is fully described by
a node bijection: matched nodes pay :func:`node_match`, and every node pair
pays :func:`edge_match` for the edge (or non-edge) on each side.

Small graphs are solved exactly with a depth-first A*-style search over
partial assignments.  Larger graphs use pairwise-swap descent from a bipartite
assignment on local node costs and from ID-order starts.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .topology import UNIT_COSTS, EditCostModel, Topology, check_request_size, node_match


@dataclass
class GedResult:
    distance: float
    mapping: dict  # requested node -> candidate node
    method: str    # "exact" or "approx"


class _Problem:
    """Dense matrices for one (requested, candidate) pair."""

    def __init__(self, t_req: Topology, cand: Topology, cm: EditCostModel):
        self.req = t_req.sorted_nodes
        self.cand = cand.sorted_nodes
        n = self.n = len(self.req)
        self.node = np.zeros((n, n))
        for i, r in enumerate(self.req):
            for j, c in enumerate(self.cand):
                self.node[i, j] = node_match(t_req.attrs[r], cand.attrs[c], cm)
        ri = {r: i for i, r in enumerate(self.req)}
        ci = {c: j for j, c in enumerate(self.cand)}
        # deletion cost of each requested edge; 0 where there is no edge
        self.req_del = np.zeros((n, n))
        self.req_adj = np.zeros((n, n), dtype=bool)
        for a, b in t_req.edges:
            i, k = ri[a], ri[b]
            self.req_adj[i, k] = self.req_adj[k, i] = True
            self.req_del[i, k] = self.req_del[k, i] = cm.deletion_cost((a, b))
        self.cand_adj = np.zeros((n, n), dtype=bool)
        for a, b in cand.edges:
            j, m = ci[a], ci[b]
            self.cand_adj[j, m] = self.cand_adj[m, j] = True
        self.ins = cm.edge_insert_cost
        self.min_del = min([cm.edge_delete_cost, *cm.edge_costs.values()]) if t_req.edges else 0
        self.req_deg = self.req_adj.sum(axis=1)
        self.cand_deg = self.cand_adj.sum(axis=1)
        self.req_labels = [t_req.attrs[r].abbr for r in self.req]
        self.cand_labels = [cand.attrs[c].abbr for c in self.cand]
        self.node_cost = cm.node_cost
        # python-native views for the inner search loop
        self.node_l = self.node.tolist()
        self.req_adj_l = self.req_adj.tolist()
        self.cand_adj_l = self.cand_adj.tolist()
        self.req_del_l = self.req_del.tolist()

    def cost(self, perm) -> float:
        """Exact edit cost of the bijection ``req[i] -> cand[perm[i]]``."""
        perm = np.asarray(perm)
        total = self.node[np.arange(self.n), perm].sum()
        mapped = self.cand_adj[np.ix_(perm, perm)]
        iu = np.triu_indices(self.n, 1)
        r = self.req_adj[iu]
        c = mapped[iu]
        total += self.req_del[iu][r & ~c].sum()
        total += self.ins * np.count_nonzero(c & ~r)
        return float(total)

    def local_costs(self) -> np.ndarray:
        """Node cost plus half the degree mismatch, the usual star estimate."""
        dr = self.req_deg[:, None].astype(float)
        dc = self.cand_deg[None, :].astype(float)
        star = np.where(dr > dc, (dr - dc) * self.min_del, (dc - dr) * self.ins) / 2.0
        return self.node + star


def _label_lower_bound(req_labels, cand_labels, node_cost) -> float:
    common = Counter(req_labels) & Counter(cand_labels)
    return (len(req_labels) - sum(common.values())) * node_cost


def edit_lower_bound(t_req: Topology, cand: Topology, cm: EditCostModel = UNIT_COSTS) -> float:
    """Cheap admissible bound: label multiset mismatch plus edge count gap."""
    labels = _label_lower_bound([t_req.attrs[n].abbr for n in t_req.nodes],
                                [cand.attrs[n].abbr for n in cand.nodes], cm.node_cost)
    de = len(t_req.edges) - len(cand.edges)
    if de > 0:
        min_del = min([cm.edge_delete_cost, *cm.edge_costs.values()])
        return labels + de * min_del
    return labels + (-de) * cm.edge_insert_cost


def mapping_cost(t_req: Topology, cand: Topology, mapping: dict,
                 cm: EditCostModel = UNIT_COSTS) -> float:
    """Edit cost induced by a given requested->candidate bijection."""
    check_request_size(t_req, cand)
    p = _Problem(t_req, cand, cm)
    ci = {c: j for j, c in enumerate(p.cand)}
    return p.cost([ci[mapping[r]] for r in p.req])


def _swap_descent(p: _Problem, perm: list) -> tuple[float, list]:
    best = p.cost(perm)
    # first-improvement pairwise swaps, scanned in index order
    improved = True
    while improved:
        improved = False
        for i in range(p.n):
            for k in range(i + 1, p.n):
                perm[i], perm[k] = perm[k], perm[i]
                c = p.cost(perm)
                if c < best - 1e-12:
                    best = c
                    improved = True
                else:
                    perm[i], perm[k] = perm[k], perm[i]
    return best, perm


def _approximate(p: _Problem) -> tuple[float, list]:
    """Swap descent from several starts; the first start wins ties.

    Starts: the bipartite assignment on local costs, then ID order and its
    reverse.  ID order matters on meshes, where the assignment alone often
    lands in a poor local minimum.
    """
    rows, cols = linear_sum_assignment(p.local_costs())
    lsa = [0] * p.n
    for i, j in zip(rows, cols):
        lsa[i] = int(j)
    best = None
    for seed in (lsa, list(range(p.n)), list(range(p.n))[::-1]):
        cost, perm = _swap_descent(p, list(seed))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, perm)
    return best


def _exact(p: _Problem, upper: float, strict_upper: bool):
    """Depth-first search over assignments in (requested, candidate) ID order.

    Only strictly better solutions replace the incumbent, so the first optimum
    found is the lexicographically smallest optimal bijection.  Returns
    ``(cost, perm)`` or ``None`` if nothing beats ``upper``.
    """
    n = p.n
    node = p.node_l
    radj = p.req_adj_l
    cadj = p.cand_adj_l
    rdel = p.req_del_l
    ins = p.ins
    min_del = p.min_del
    node_cost = p.node_cost
    total_req_edges = int(p.req_adj.sum()) // 2
    total_cand_edges = int(p.cand_adj.sum()) // 2
    req_labels = p.req_labels
    cand_labels = p.cand_labels

    label_left_req = Counter(req_labels)
    label_left_cand = Counter(cand_labels)
    perm = [-1] * n
    used = [False] * n
    best = {"cost": upper, "perm": None, "strict": strict_upper}
    eps = 1e-9

    def bound_ok(lb):
        if best["perm"] is None and not best["strict"]:
            return lb <= best["cost"] + eps
        return lb < best["cost"] - eps

    def search(i, g, req_inner, cand_inner):
        # req_inner / cand_inner: edges with both endpoints already assigned
        if i == n:
            if bound_ok(g):
                best["cost"] = g
                best["perm"] = list(perm)
            return
        for j in range(n):
            if used[j]:
                continue
            step = node[i][j]
            new_req_inner = req_inner
            new_cand_inner = cand_inner
            ri = radj[i]
            cj = cadj[j]
            rd = rdel[i]
            for k in range(i):
                r = ri[k]
                c = cj[perm[k]]
                if r:
                    new_req_inner += 1
                    if not c:
                        step += rd[k]
                if c:
                    new_cand_inner += 1
                    if not r:
                        step += ins
            g2 = g + step
            label_left_req[req_labels[i]] -= 1
            label_left_cand[cand_labels[j]] -= 1
            common = sum((label_left_req & label_left_cand).values())
            h = (n - i - 1 - common) * node_cost
            a = total_req_edges - new_req_inner
            b = total_cand_edges - new_cand_inner
            h += (a - b) * min_del if a > b else (b - a) * ins
            if bound_ok(g2 + h):
                perm[i] = j
                used[j] = True
                search(i + 1, g2, new_req_inner, new_cand_inner)
                used[j] = False
                perm[i] = -1
            label_left_req[req_labels[i]] += 1
            label_left_cand[cand_labels[j]] += 1

    search(0, 0.0, 0, 0)
    if best["perm"] is None:
        return None
    return best["cost"], best["perm"]


def topo_edit_distance(t_req: Topology, cand: Topology, cost_model: EditCostModel = UNIT_COSTS,
                       *, exact_limit: int = 12, bound: float | None = None) -> GedResult | None:
    """Minimum edit cost over node bijections and one optimal bijection.

    Graphs with at most ``exact_limit`` nodes are solved exactly; ties between
    optimal bijections resolve to the smallest requested->candidate pairs.
    Above the limit the result is an upper bound from bipartite assignment
    (``method == "approx"``).

    With ``bound`` set, returns ``None`` when the distance exceeds it.
    """
    check_request_size(t_req, cand)
    if not t_req.nodes:
        raise ValueError("topologies must be non-empty")
    p = _Problem(t_req, cand, cost_model)
    approx_cost, approx_perm = _approximate(p)
    if p.n <= exact_limit:
        upper = approx_cost if bound is None else min(approx_cost, bound)
        found = _exact(p, upper, strict_upper=False)
        if found is None:
            return None
        cost, perm = found
        method = "exact"
    else:
        if bound is not None and approx_cost > bound + 1e-9:
            return None
        cost, perm = approx_cost, approx_perm
        method = "approx"
    mapping = {p.req[i]: p.cand[j] for i, j in enumerate(perm)}
    if float(cost).is_integer():
        cost = int(cost)
    return GedResult(cost, mapping, method)
