"""Topology edit distance against an exhaustive oracle."""

import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from npuvsim.ged import _approximate, _Problem, edit_lower_bound, mapping_cost, topo_edit_distance
from npuvsim.topology import EditCostModel, NodeAttr, Topology


def brute_force_ged(a: Topology, b: Topology) -> int:
    """Unit-cost minimum over all bijections, counted from scratch."""
    an, bn = sorted(a.nodes), sorted(b.nodes)
    best = None
    for perm in itertools.permutations(bn):
        f = dict(zip(an, perm))
        cost = sum(a.attrs[n].abbr != b.attrs[f[n]].abbr for n in an)
        for x, y in itertools.combinations(an, 2):
            cost += a.has_edge(x, y) != b.has_edge(f[x], f[y])
        best = cost if best is None else min(best, cost)
    return best


def random_graph(rng: random.Random, n: int) -> Topology:
    edges = [e for e in itertools.combinations(range(n), 2) if rng.random() < 0.5]
    attrs = {i: NodeAttr(rng.choice(["SA", "VU"])) for i in range(n)}
    return Topology.from_edges(range(n), edges, attrs)


def test_identity_is_zero():
    t = Topology.mesh(3, 3)
    r = topo_edit_distance(t, t)
    assert r.distance == 0 and r.method == "exact"


@pytest.mark.parametrize("seed", range(40))
def test_matches_oracle(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 5)
    a, b = random_graph(rng, n), random_graph(rng, n)
    r = topo_edit_distance(a, b)
    assert r.distance == brute_force_ged(a, b)
    # the returned bijection realises the distance
    assert mapping_cost(a, b, r.mapping) == r.distance


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
def test_symmetric_under_unit_costs(n, seed):
    rng = random.Random(seed)
    a, b = random_graph(rng, n), random_graph(rng, n)
    assert topo_edit_distance(a, b).distance == topo_edit_distance(b, a).distance


def test_lower_bound_is_admissible():
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(2, 5)
        a, b = random_graph(rng, n), random_graph(rng, n)
        assert edit_lower_bound(a, b) <= topo_edit_distance(a, b).distance


def test_bound_prunes():
    a = Topology.path(4)
    b = Topology.from_edges(range(4), [])
    assert topo_edit_distance(a, b, bound=1) is None
    assert topo_edit_distance(a, b, bound=3).distance == 3


def test_critical_edge_penalty():
    a = Topology.path(3)
    b = Topology.from_edges(range(3), [(0, 1)])
    plain = topo_edit_distance(a, b).distance
    crit = topo_edit_distance(a, b, EditCostModel(critical_edges={(0, 1): 5, (1, 2): 5})).distance
    assert plain == 1 and crit == 6


def test_memory_penalty():
    a = Topology.from_edges([0], [], {0: NodeAttr("SA", 3)})
    b = Topology.from_edges([0], [], {0: NodeAttr("SA", 1)})
    assert topo_edit_distance(a, b).distance == 2


def test_approx_above_exact_limit():
    a = Topology.mesh(4, 4)
    b = Topology.mesh(4, 4)
    r = topo_edit_distance(a, b, exact_limit=8)
    assert r.method == "approx" and r.distance == 0


def test_approx_not_worse_than_id_order():
    # 2x2 stub on a 6x4 block against a 6-wide snake: id order is a decent start
    t = Topology.mesh(6, 6)
    cores = [4, 5, 10, 11] + list(range(12, 36))
    cand = t.subgraph(cores)
    req = Topology.snake(28, 6)
    p = _Problem(req, cand, EditCostModel())
    cost, _perm = _approximate(p)
    assert cost <= p.cost(list(range(28)))


@pytest.mark.parametrize("seed", range(10))
def test_approx_upper_bounds_exact(seed):
    rng = random.Random(100 + seed)
    n = rng.randint(3, 7)
    a, b = random_graph(rng, n), random_graph(rng, n)
    approx = topo_edit_distance(a, b, exact_limit=0).distance
    exact = topo_edit_distance(a, b).distance
    assert approx >= exact
