"""Cycle-level simulator of a virtualized inter-core connected NPU."""

from .chip import Chip, ChipConfig, KernelOp, compute_cycles
from .errors import NpuVsimError
from .hypervisor import BuddyAllocator, Hypervisor, VirtualNpu, VnpuRequest
from .sim import Metrics, Task, run
from .topology import AllocationRequest, EditCostModel, Strategy, Topology, allocate_cores

__version__ = "0.1.0"

__all__ = [
    "AllocationRequest", "BuddyAllocator", "Chip", "ChipConfig", "EditCostModel", "Hypervisor",
    "KernelOp", "Metrics", "NpuVsimError", "Strategy", "Task", "Topology", "VirtualNpu",
    "VnpuRequest", "allocate_cores", "compute_cycles", "run",
]
