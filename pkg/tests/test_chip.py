import logging
import math

import pytest

from npuvsim.chip import Chip, ChipConfig, EventQueue, KernelOp, VmContext, compute_cycles
from npuvsim.errors import (MetaZoneOverflow, MetaZoneViolation, SramOverflow,
                            UnmappedVirtualCore)
from npuvsim.vchunk import RangeTranslator, build_rtt

MiB = 1 << 20


def make_ctx(chip, placement, vmid=1, blocks=None, **kw):
    blocks = blocks or [(0, 64 * MiB, 4 * MiB)]
    translators = {p: RangeTranslator(build_rtt(blocks), chip.config.range_tlb_entries,
                                      chip.config.translation_costs())
                   for p in set(placement.values())}
    ctx = VmContext(vmid, dict(placement), translators=translators, **kw)
    chip.attach(ctx)
    return ctx


class TestConfig:
    def test_defaults(self):
        c = ChipConfig()
        assert c.cores == 36
        assert c.weight_zone_bytes == 30 * MiB - 64 * 1024
        assert c.flit_bytes == 16

    def test_fpga_preset(self):
        c = ChipConfig.preset("fpga")
        assert (c.width, c.height, c.sram_per_core) == (4, 2, 512 * 1024)

    @pytest.mark.parametrize("bad", [{"flit_bytes": 0}, {"meta_zone_bytes": 31 * MiB},
                                     {"controller_core": 99}, {"width": 0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ChipConfig(**bad)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError):
            ChipConfig.from_dict({"preset": "sim", "warp_drive": 1})
        assert ChipConfig.from_dict({"preset": "fpga", "hop_latency": 3}).hop_latency == 3

    def test_memory_interfaces(self):
        assert ChipConfig(width=3, height=2).memory_interface_cores() == [0, 2, 3, 5]
        assert ChipConfig(width=3, height=2, mem_interfaces="west").memory_interface_cores() == [0, 3]


@pytest.mark.parametrize("op, macs, expected", [
    (KernelOp("matmul", (1, 1, 1)), 1, 1),
    (KernelOp("matmul", (16, 16, 16)), 256, 16),
    (KernelOp("copy", (), bytes_in=0), 1, 0),
    (KernelOp("conv", (2, 2, 3, 4, 3, 3)), 100, math.ceil(2 * 2 * 3 * 4 * 9 / 100)),
])
def test_compute_cycles(op, macs, expected):
    assert compute_cycles(op, ChipConfig(macs_per_cycle=macs)) == expected


@pytest.mark.parametrize("kind, dims", [("matmul", (1, 2)), ("conv", (1, 1, 1, 1, 1, 0)), ("fft", ())])
def test_kernel_validation(kind, dims):
    with pytest.raises(ValueError):
        KernelOp(kind, dims)


def test_event_queue_fifo_on_ties():
    q = EventQueue()
    q.push(5, "a")
    q.push(1, "b")
    q.push(5, "c")
    assert [q.pop()[1] for _ in range(3)] == ["b", "a", "c"]
    assert not q


class TestDispatch:
    def test_controller_adjacent_core_is_one_hop(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0, 1: 7})
        _p, issue, travel = chip.dispatch_instruction(ctx, 0)
        assert travel == chip.config.hop_latency
        _p, _i, far = chip.dispatch_instruction(ctx, 1)
        assert far == 3 * chip.config.hop_latency

    def test_repeat_core_skips_lookup(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 3})
        _p, first, _t = chip.dispatch_instruction(ctx, 0, None)
        _p, second, _t = chip.dispatch_instruction(ctx, 0, 0)
        assert first == 1 + chip.config.rt_lookup_cycles
        assert second == 1

    def test_unmapped_core(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 3})
        with pytest.raises(UnmappedVirtualCore):
            chip.dispatch_instruction(ctx, 4)


class TestNoc:
    def test_local_copy_is_serialization_only(self):
        chip = Chip()
        r = chip.noc_transfer(4, 4, 100)
        assert r.hops == 0
        assert r.arrival == math.ceil(100 / 16)

    def test_one_packet_latency(self):
        chip = Chip()
        r = chip.noc_transfer(0, 2, 2048)
        # 128 flits serialised, head two hops behind the tail
        assert r.arrival == 128 + 2

    def test_shared_link_delays_second(self):
        chip = Chip()
        a = chip.noc_transfer(0, 2, 2048)
        b = chip.noc_transfer(1, 2, 2048)
        # link 1->2 is busy until 1 + 128; b then needs 128 cycles plus one hop to eject
        assert a.arrival == 130
        assert b.arrival == 129 + 128 + 1

    def test_vsend_overhead_shrinks(self):
        cfg = ChipConfig.fpga()
        ratios = []
        for n in (2, 10, 20, 30):
            nbytes = n * cfg.packet_bytes
            base = Chip(cfg).noc_transfer(0, 1, nbytes).arrival
            virt = Chip(cfg).noc_transfer(0, 1, nbytes, virtualized=True).arrival
            # lookup and first packet's translation are exposed, the rest overlap
            assert virt - base == cfg.rt_lookup_cycles + cfg.packet_translation_cycles
            ratios.append((virt - base) / base)
        assert ratios == sorted(ratios, reverse=True)

    def test_path_endpoints_checked(self):
        with pytest.raises(ValueError):
            Chip().noc_transfer(0, 2, 10, path=[0, 1])

    def test_trace_records_occupancy(self):
        chip = Chip(trace=True)
        chip.noc_transfer(0, 1, 4096, tag="x")
        assert {row[3] for row in chip.occupancy} == {"x"}
        assert len(chip.occupancy) == 2 * 2  # two packets, link plus ejection port


class TestBroadcast:
    def test_unicast_is_handshake_plus_transfer(self):
        cfg = ChipConfig.fpga()
        chip = Chip(cfg)
        ctx = make_ctx(chip, {0: 0, 1: 1})
        done = chip.broadcast(ctx, 0, [1], 4096, "noc")
        ref = Chip(cfg)
        hs = ref.handshake(0, 1, [0, 1], 0)
        expect = ref.noc_transfer(0, 1, 4096, [0, 1], hs, virtualized=True).arrival
        assert done == expect

    def test_empty_payload_is_handshake_only(self):
        cfg = ChipConfig.fpga()
        chip = Chip(cfg)
        ctx = make_ctx(chip, {0: 0, 1: 1})
        done = chip.broadcast(ctx, 0, [1], 0, "noc")
        assert done == Chip(cfg).handshake(0, 1, [0, 1], 0)

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_noc_beats_memsync(self, n):
        cfg = ChipConfig.fpga()
        res = {}
        for mode in ("noc", "memsync"):
            chip = Chip(cfg)
            ctx = make_ctx(chip, {i: i for i in range(n + 1)})
            res[mode] = chip.broadcast(ctx, 0, list(range(1, n + 1)), 4096, mode)
        assert res["noc"] <= res["memsync"]

    def test_bad_mode(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0, 1: 1})
        with pytest.raises(ValueError):
            chip.broadcast(ctx, 0, [1], 16, "smoke-signal")
        with pytest.raises(ValueError):
            chip.broadcast(ctx, 0, [], 16, "noc")


class TestDma:
    def test_resident_range_has_no_stall(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0})
        first = chip.dma_load(0, ctx, 0, 4096, 0, vcore=0, key="a")
        second = chip.dma_load(0, ctx, 8192, 4096, 0, vcore=0, key="b")
        assert first.stall_cycles == chip.config.range_miss_cycles
        assert second.stall_cycles == 0
        stream = 4096 // chip.config.dma_bytes_per_cycle
        assert second.start == first.engine_free
        assert second.finish - second.start == stream + chip.config.hbm_latency

    def test_stalls_only_at_range_boundaries(self):
        chip = Chip()
        blocks = [(i * MiB, (10 + i) * MiB, MiB) for i in range(3)]
        ctx = make_ctx(chip, {0: 0}, blocks=blocks)
        chunk = 64 * 1024
        stalled = []
        t = 0
        for off in range(0, 3 * MiB, chunk):
            r = chip.dma_load(0, ctx, off, chunk, t, vcore=0, key=off)
            if r.stall_cycles:
                stalled.append(off)
            t = r.start + 4
        assert stalled == [0, MiB, 2 * MiB]

    def test_residency_hit(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0})
        a = chip.dma_load(0, ctx, 0, 4096, 0, vcore=0, key="w")
        b = chip.dma_load(0, ctx, 0, 4096, 10, vcore=0, key="w")
        assert b.resident_hit and b.finish == a.finish and b.hbm_bytes == 0

    def test_overflow(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0}, blocks=[(0, 0, 64 * MiB)])
        with pytest.raises(SramOverflow):
            chip.dma_load(0, ctx, 0, 31 * MiB, 0, vcore=0, key="big")

    def test_bandwidth_cap_slows_stream(self):
        fast, slow = Chip(), Chip()
        a = make_ctx(fast, {0: 0})
        b = make_ctx(slow, {0: 0})
        b.counter.cap_bytes_per_window = 4096
        ra = fast.dma_load(0, a, 0, 64 * 1024, 0)
        rb = slow.dma_load(0, b, 0, 64 * 1024, 0)
        assert rb.finish > ra.finish
        # 16 windows' worth of allowance
        assert rb.engine_free >= 15 * slow.config.window_cycles

    def test_counter_matches_dma_bytes(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 0, 1: 1})
        for i in range(5):
            chip.dma_load(i % 2, ctx, i * 8192, 8192, 0, vcore=i % 2, key=i)
        chip.dma_load(0, ctx, 0, 8192, 0, vcore=0, key=0)  # resident, no traffic
        assert ctx.counter.total_bytes == chip.stats[1].dma_bytes == 5 * 8192


class TestMetaZone:
    def test_guest_write_rejected_and_logged(self, caplog):
        chip = Chip()
        with caplog.at_level(logging.WARNING):
            with pytest.raises(MetaZoneViolation):
                chip.write_sram(3, 100, 8)
        assert chip.violations == [{"core": 3, "offset": 100, "bytes": 8}]
        assert "meta-zone" in caplog.text

    def test_hyper_and_weight_zone_writes_allowed(self):
        chip = Chip()
        chip.write_sram(3, 100, 8, hyper=True)
        chip.write_sram(3, chip.config.meta_zone_bytes, 8)
        assert chip.violations == []

    def test_outside_sram(self):
        with pytest.raises(SramOverflow):
            Chip().write_sram(0, 30 * MiB - 4, 8)

    def test_deploy_overflow(self):
        chip = Chip()
        chip.deploy_meta(0, 1, 60 * 1024)
        with pytest.raises(MetaZoneOverflow):
            chip.deploy_meta(0, 2, 8 * 1024)
        chip.clear_meta(0, 1)
        chip.deploy_meta(0, 2, 8 * 1024)


class TestKernels:
    def test_tdm_switch_fixed_cost(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 5, 1: 5})
        op = KernelOp("matmul", (128, 128, 128))
        _s, f0 = chip.run_kernel(ctx, 0, op, 0)
        s1, _f1 = chip.run_kernel(ctx, 1, op, 0)
        assert s1 == f0 + chip.config.tdm_switch_cycles
        assert chip.stats[1].tdm_switches == 1

    def test_tdm_switch_reload_when_contexts_overflow(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 5, 1: 5}, context_bytes={0: 20 * MiB, 1: 20 * MiB})
        op = KernelOp("matmul", (128, 128, 128))
        _s, f0 = chip.run_kernel(ctx, 0, op, 0)
        s1, _f1 = chip.run_kernel(ctx, 1, op, 0)
        assert s1 - f0 >= 20 * MiB // chip.config.dma_bytes_per_cycle
        assert chip.stats[1].hbm_bytes == 20 * MiB

    def test_same_context_no_switch(self):
        chip = Chip()
        ctx = make_ctx(chip, {0: 5})
        op = KernelOp("matmul", (16, 16, 16))
        _s, f0 = chip.run_kernel(ctx, 0, op, 0)
        s1, _ = chip.run_kernel(ctx, 0, op, 0)
        assert s1 == f0 and chip.stats[1].tdm_switches == 0
