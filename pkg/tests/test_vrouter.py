import random

import pytest
from hypothesis import given, settings, strategies as st

from npuvsim.errors import (DirectionLoop, DuplicatePhysicalCore, MissingDirection, OutOfBounds,
                            UnmappedVirtualCore)
from npuvsim.vrouter import (Port, RoutingTable, build_routing_table, channel_dependency_graph,
                             confined_directions, constrained_route, detect_interference, dor_route,
                             translate_core, validate_directions, xy_directions)


def grow_connected(rng, width, height, k):
    """Random connected core set grown from a random seed core."""
    start = rng.randrange(width * height)
    cores = {start}
    while len(cores) < k:
        c = rng.choice(sorted(cores))
        x, y = c % width, c // width
        nbrs = [(x + dx, y + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        nbrs = [ny * width + nx for nx, ny in nbrs if 0 <= nx < width and 0 <= ny < height]
        cores.add(rng.choice(nbrs))
    return sorted(cores)


def test_identity_table():
    t = build_routing_table(1, {i: i for i in range(4)}, mesh_shape=(2, 2))
    assert [translate_core(t, v) for v in range(4)] == [0, 1, 2, 3]
    assert translate_core(t, 3) == 3


def test_compact_table():
    t = build_routing_table(1, compact=(0, 6, (2, 2)), mesh_shape=(5, 5))
    assert [translate_core(t, v) for v in range(4)] == [6, 7, 11, 12]
    assert t.size == 4
    with pytest.raises(UnmappedVirtualCore):
        translate_core(t, 4)


def test_compact_out_of_bounds():
    with pytest.raises(OutOfBounds):
        build_routing_table(1, compact=(0, 4, (2, 2)), mesh_shape=(5, 5))


def test_duplicate_physical_core():
    with pytest.raises(DuplicatePhysicalCore):
        build_routing_table(1, {0: 3, 1: 3}, mesh_shape=(4, 4))


def test_unmapped_virtual_core():
    t = build_routing_table(1, {0: 0, 1: 1}, mesh_shape=(4, 4))
    with pytest.raises(UnmappedVirtualCore):
        translate_core(t, 2)


def test_table_roundtrip():
    t = build_routing_table(3, {0: 5, 1: 6}, mesh_shape=(4, 4), directions={(5, 6): "E", (6, 5): "W"})
    again = RoutingTable.from_dict(t.to_dict())
    assert again == t
    c = build_routing_table(3, compact=(0, 5, (2, 1)), mesh_shape=(4, 4))
    assert RoutingTable.from_dict(c.to_dict()).as_mapping() == c.as_mapping()


def test_meta_bytes_compact_is_constant():
    small = build_routing_table(1, compact=(0, 0, (1, 1)), mesh_shape=(6, 6))
    big = build_routing_table(1, compact=(0, 0, (6, 6)), mesh_shape=(6, 6))
    assert small.meta_bytes() == big.meta_bytes()
    std = build_routing_table(1, {i: i for i in range(36)}, mesh_shape=(6, 6))
    assert std.meta_bytes() > big.meta_bytes()


def test_dor_examples():
    assert dor_route(7, 7, 5, 5) == [7]
    # (0,0) -> (2,1) on a 5-wide mesh
    assert dor_route(0, 7, 5, 5) == [0, 1, 2, 7]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.data())
def test_dor_is_manhattan(w, h, data):
    s = data.draw(st.integers(0, w * h - 1))
    d = data.draw(st.integers(0, w * h - 1))
    p = dor_route(s, d, w, h)
    assert len(p) - 1 == abs(s % w - d % w) + abs(s // w - d // w)
    assert len(set(p)) == len(p)


def test_dor_out_of_bounds():
    with pytest.raises(OutOfBounds):
        dor_route(0, 16, 4, 4)


def test_interference_and_yx_detour():
    # VM owns 6, 7, 10 on a 4x4 mesh; XY from 10 to 7 relays through 11
    mapping = {3: 7, 5: 10, 0: 6}
    owned = set(mapping.values())
    xy_path = dor_route(10, 7, 4, 4)
    assert xy_path == [10, 11, 7]
    assert detect_interference(xy_path, owned)
    dirs = {(10, 7): Port.N, (6, 7): Port.E}
    t = build_routing_table(2, mapping, mesh_shape=(4, 4), directions=dirs)
    path = constrained_route(10, 7, t)
    assert path == [10, 6, 7]
    assert not detect_interference(path, owned)


def test_interference_trivial_cases():
    assert not detect_interference([6, 7], {6, 7})
    assert not detect_interference([0, 1, 2], {0, 1, 2})


def test_constrained_single_hop():
    t = build_routing_table(1, {0: 0, 1: 1}, mesh_shape=(2, 2), directions=xy_directions([0, 1], 2, 2))
    assert constrained_route(0, 1, t) == [0, 1]


def test_constrained_loop_detected():
    dirs = {(0, 3): Port.E, (1, 3): Port.W}
    t = build_routing_table(1, {0: 0, 1: 1, 2: 3}, mesh_shape=(2, 2), directions=dirs)
    with pytest.raises(DirectionLoop):
        constrained_route(0, 3, t)


def test_constrained_missing_direction():
    t = build_routing_table(1, {0: 0, 1: 1}, mesh_shape=(2, 2))
    with pytest.raises(MissingDirection):
        constrained_route(0, 1, t)
    t = t.with_directions({})
    with pytest.raises(MissingDirection):
        constrained_route(0, 1, t)


def ring_directions():
    # clockwise 0 -> 1 -> 3 -> 2 -> 0 on a 2x2 mesh, two hops per route
    return {(0, 3): Port.E, (1, 3): Port.S,
            (1, 2): Port.S, (3, 2): Port.W,
            (3, 0): Port.W, (2, 0): Port.N,
            (2, 1): Port.N, (0, 1): Port.E}


def test_ring_of_turns_is_rejected():
    rep = validate_directions(ring_directions(), (2, 2))
    assert not rep.ok
    assert len(rep.cycle) == 4


def test_xy_and_empty_are_ok():
    assert validate_directions(xy_directions(range(16), 4, 4), (4, 4)).ok
    assert validate_directions({}, (3, 3)).ok


def test_cdg_nodes_are_links():
    g = channel_dependency_graph(ring_directions(), 2, 2)
    assert set(g.nodes) == {(0, 1), (1, 3), (3, 2), (2, 0)}


@pytest.mark.parametrize("seed", range(25))
def test_confined_directions_stay_inside_and_are_acyclic(seed):
    rng = random.Random(seed)
    w, h = rng.randint(2, 6), rng.randint(2, 6)
    cores = grow_connected(rng, w, h, rng.randint(2, w * h))
    dirs = confined_directions(cores, w, h)
    assert validate_directions(dirs, (w, h)).ok
    t = build_routing_table(1, {i: c for i, c in enumerate(cores)}, mesh_shape=(w, h), directions=dirs)
    for s in cores:
        for d in cores:
            p = constrained_route(s, d, t)
            assert p[0] == s and p[-1] == d
            assert not detect_interference(p, cores)


def test_confined_rejects_disconnected():
    with pytest.raises(ValueError):
        confined_directions([0, 2], 3, 1)
