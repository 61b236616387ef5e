"""Exception types shared across the scheduler.

Every error that callers are expected to branch on gets its own class; the
structured fields (gpu id, layer, link pair) are attributes so CLI handlers
and tests never have to parse messages.
"""

from __future__ import annotations


class SchedulerError(Exception):
    """Base class for all scheduling errors."""


class DuplicateGpuId(SchedulerError):
    def __init__(self, gpu_id: str):
        super().__init__(f"duplicate gpu id: {gpu_id!r}")
        self.gpu_id = gpu_id


class NegativeRtt(SchedulerError):
    def __init__(self, link: tuple[str, str], rtt_s: float):
        super().__init__(f"negative rtt {rtt_s!r} on link {link[0]!r} -> {link[1]!r}")
        self.link = link
        self.rtt_s = rtt_s


class UnknownRegion(SchedulerError):
    def __init__(self, gpu_id: str, region: str):
        super().__init__(f"gpu {gpu_id!r} references undeclared region {region!r}")
        self.gpu_id = gpu_id
        self.region = region


class InvalidCluster(SchedulerError):
    """Raised by validate_snapshot; carries every violation found, not just the first."""

    def __init__(self, violations: list[SchedulerError]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


class NoFeasiblePipeline(SchedulerError):
    """No region can host even one full copy of the model."""


class DegenerateObjective(SchedulerError):
    """Objective denominator is zero (no compute time and no RTT)."""


class InfeasibleCapacity(SchedulerError):
    """Pipeline capacity sum is below the model's layer count."""

    def __init__(self, capacity_total: int, layer_count: int):
        super().__init__(
            f"capacity total {capacity_total} cannot cover {layer_count} layers"
        )
        self.capacity_total = capacity_total
        self.layer_count = layer_count


class RoundingOverflow(SchedulerError):
    """Leftover layers could not be placed without breaching a capacity bound."""


class UnknownGpu(SchedulerError):
    def __init__(self, gpu_id: str):
        super().__init__(f"gpu {gpu_id!r} is not registered")
        self.gpu_id = gpu_id


class ZeroCapacityGpu(SchedulerError):
    def __init__(self, gpu_id: str):
        super().__init__(f"gpu {gpu_id!r} registered but cannot hold a single layer")
        self.gpu_id = gpu_id


class UncoveredLayer(SchedulerError):
    def __init__(self, layer: int):
        super().__init__(f"layer {layer} has no live replica")
        self.layer = layer


class NoPath(SchedulerError):
    """The routing DAG has nodes at every layer but no connected chain."""


class OccupancyUnderflow(SchedulerError):
    def __init__(self, gpu_id: str):
        super().__init__(f"release without matching select on gpu {gpu_id!r}")
        self.gpu_id = gpu_id


class EmptySample(SchedulerError):
    """Percentile of an empty sample."""
