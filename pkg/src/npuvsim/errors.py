"""Exception types raised across the simulator."""


class NpuVsimError(Exception):
    """Base class for every error raised by npuvsim."""


# topology / allocation
class SizeMismatch(NpuVsimError):
    pass


class InsufficientCores(NpuVsimError):
    pass


class NoCandidate(NpuVsimError):
    pass


class TopologyLockIn(NpuVsimError):
    """Enough free cores exist, but none form the requested topology."""


# vrouter
class DuplicatePhysicalCore(NpuVsimError):
    pass


class OutOfBounds(NpuVsimError):
    pass


class UnmappedVirtualCore(NpuVsimError):
    pass


class MissingDirection(NpuVsimError):
    pass


class DirectionLoop(NpuVsimError):
    pass


# vchunk
class OverlappingRanges(NpuVsimError):
    pass


class TranslationFault(NpuVsimError):
    pass


class PermissionDenied(NpuVsimError):
    pass


# chip
class SramOverflow(NpuVsimError):
    pass


class MetaZoneViolation(NpuVsimError):
    """A guest tried to write into the hypervisor-owned meta-zone."""


class DeadlockDetected(NpuVsimError):
    pass


# hypervisor
class OutOfMemory(NpuVsimError):
    pass


class MetaZoneOverflow(NpuVsimError):
    pass


class UnknownVm(NpuVsimError):
    pass


# workloads / experiments
class CapacityExceeded(NpuVsimError):
    pass


class ConfigError(NpuVsimError):
    pass


class UnknownParameter(NpuVsimError):
    pass
