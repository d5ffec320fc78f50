"""Two 3x3 requests on a 5x5 chip: exact matching strands the second one,
nearest-topology matching places both."""

from npuvsim.chip import Chip, ChipConfig
from npuvsim.errors import TopologyLockIn
from npuvsim.hypervisor import Hypervisor, VnpuRequest
from npuvsim.topology import Strategy, Topology


def show(hv):
    owner = {c: str(vm) for vm, v in hv.vnpus.items() for c in v.cores}
    w = hv.config.width
    for y in range(hv.config.height):
        print("  " + " ".join(owner.get(y * w + x, ".") for x in range(w)))


for strategy in (Strategy.EXACT, Strategy.SIMILAR):
    hv = Hypervisor(Chip(ChipConfig(width=5, height=5)))
    print(f"{strategy.value}:")
    for vmid in (1, 2):
        try:
            v = hv.create_vnpu(VnpuRequest(vmid, Topology.mesh(3, 3), strategy=strategy))
            print(f"  vm {vmid}: cores {list(v.cores)} (edit distance {v.distance})")
        except TopologyLockIn as exc:
            print(f"  vm {vmid}: rejected, {exc}")
    show(hv)
    print(f"  idle cores: {len(hv.free_cores)}/25\n")
