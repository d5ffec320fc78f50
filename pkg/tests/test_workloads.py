import json

import networkx as nx
import pytest

from npuvsim.chip import ChipConfig, KernelOp
from npuvsim.errors import CapacityExceeded, ConfigError
from npuvsim.topology import Topology
from npuvsim.workloads import (GPT_PRESETS, LayerGraph, build_gpt_like, build_resnet_like, emit_events,
                               load_graph, map_layers, microbench_broadcast, weight_trace,
                               workload_from_name)


def tiny_graph(n=1, weight=4096):
    return load_graph({"name": "tiny", "layers": [
        {"op": {"kind": "matmul", "dims": [8, 8, 8]}, "weight_bytes": weight, "activation_bytes": 64}
        for _ in range(n)]})


def test_resnet18_shape():
    g = build_resnet_like(18)
    assert len(g.layers) == 18
    assert nx.is_directed_acyclic_graph(g.to_networkx())
    skips = [(a, b) for a, b in g.edges if b - a == 3]
    assert len(skips) == 8
    assert (0, 3) in skips


def test_resnet34_is_deeper():
    assert len(build_resnet_like(34).layers) == 34


def test_unknown_depth():
    with pytest.raises(ConfigError):
        build_resnet_like(50)


@pytest.mark.parametrize("preset", sorted(GPT_PRESETS))
def test_gpt_presets(preset):
    g = build_gpt_like(preset)
    n, d = GPT_PRESETS[preset]
    assert len(g.layers) == n
    assert g.layers[0].weight_bytes == 12 * d * d
    assert g.edges == [(i, i + 1) for i in range(n - 1)]


def test_gpt_layer_counts_grow():
    assert [len(build_gpt_like(p).layers) for p in ("small", "middle", "large")] == [12, 24, 36]


@pytest.mark.parametrize("name", ["resnet18", "resnet34", "gpt-small", "gpt-large"])
def test_workload_from_name(name):
    assert workload_from_name(name).layers


def test_workload_from_name_unknown():
    with pytest.raises(ConfigError):
        workload_from_name("vgg16")


def test_graph_validation():
    with pytest.raises(ConfigError):
        tiny_graph(0)
    g = tiny_graph(2)
    with pytest.raises(ValueError):
        LayerGraph("cyc", g.layers, [(0, 1), (1, 0)])
    with pytest.raises(ValueError):
        LayerGraph("bad", g.layers, [(0, 5)])
    with pytest.raises(ValueError):
        LayerGraph("island", g.layers, [])


def test_load_graph_roundtrip(tmp_path):
    g = build_resnet_like(18)
    p = tmp_path / "g.json"
    p.write_text(json.dumps(g.to_dict()))
    again = load_graph(str(p))
    assert again.edges == g.edges
    assert again.total_weight_bytes == g.total_weight_bytes


def test_load_graph_malformed():
    with pytest.raises(ConfigError):
        load_graph({"layers": [{"op": {"kind": "matmul"}}]})


def test_map_one_layer_per_core():
    m = map_layers(build_gpt_like("small"), 12)
    assert m.stages == [[i] for i in range(12)]
    assert m.cores_used == 12


def test_map_two_layers_per_core():
    m = map_layers(build_gpt_like("middle"), 12)
    assert all(len(s) == 2 for s in m.stages)
    assert sorted(m.layer_core) == list(range(24))


def test_map_is_contiguous_and_balanced():
    g = build_resnet_like(18)
    m = map_layers(g, 6)
    flat = [l for s in m.stages for l in s]
    assert flat == list(range(18))
    assert sum(m.footprint.values()) == g.total_weight_bytes


def test_map_follows_snake_order():
    m = map_layers(build_gpt_like("small"), Topology.mesh(3, 4))
    # the pipeline turns around at the end of each row
    assert [m.layer_core[l] for l in range(6)] == [0, 1, 2, 5, 4, 3]


def test_map_capacity():
    with pytest.raises(CapacityExceeded):
        map_layers(build_gpt_like("large"), 1)
    cap = ChipConfig().weight_zone_bytes
    with pytest.raises(CapacityExceeded):
        map_layers(tiny_graph(1, cap + 1), 4)


def test_map_deterministic():
    g = build_resnet_like(34)
    assert map_layers(g, 9) == map_layers(g, 9)


def test_map_more_cores_than_layers():
    m = map_layers(tiny_graph(2), 5)
    assert m.cores_used == 2


def test_events_single_layer():
    g = tiny_graph(1)
    tasks = emit_events(g, map_layers(g, 1), 1)
    assert [t.kind for t in tasks] == ["load", "kernel"]
    assert tasks[1].deps == (0,)


def test_events_rejects_zero_iterations():
    g = tiny_graph(1)
    with pytest.raises(ValueError):
        emit_events(g, map_layers(g, 1), 0)


@pytest.mark.parametrize("chunk", [None, 1 << 20])
def test_weight_addresses_repeat_and_ascend(chunk):
    g = build_resnet_like(18)
    trace = weight_trace(g, map_layers(g, 4), 3, chunk_bytes=chunk)
    for per_iter in trace.values():
        assert per_iter[0] == per_iter[1] == per_iter[2]
        addrs = [va for va, _ in per_iter[0]]
        assert addrs == sorted(addrs)


def test_events_cross_core_transfers():
    g = build_gpt_like("small", n_layers=4)
    tasks = emit_events(g, map_layers(g, 2), 1)
    xfers = [t for t in tasks if t.kind == "xfer"]
    assert len(xfers) == 1
    assert (xfers[0].core, xfers[0].dst) == (0, 1)


def test_events_tids_are_unique_and_ordered():
    g = build_resnet_like(18)
    tasks = emit_events(g, map_layers(g, 6), 2, start_tid=100)
    tids = [t.tid for t in tasks]
    assert tids == list(range(100, 100 + len(tasks)))
    for t in tasks:
        assert all(d < t.tid for d in t.deps)


def test_microbench():
    tasks, need = microbench_broadcast(4)
    assert need == 5
    assert tasks[1].dsts == (1, 2, 3, 4)
    with pytest.raises(ValueError):
        microbench_broadcast(0)


def test_microbench_iterations_chain():
    tasks, _ = microbench_broadcast(2, KernelOp("matmul", (8, 8, 8), bytes_out=64), iterations=3)
    assert len(tasks) == 6
    assert tasks[2].deps == (1,)
