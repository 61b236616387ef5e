"""Cluster and model descriptions shared by both scheduling phases.

Everything here is an immutable value object: the planner, router and
simulator all read the same snapshot types and never mutate them. Runtime
mutability (membership churn, KV usage) lives in the membership manager,
which builds fresh snapshots on demand.

Layers are 1-based and slices are inclusive on both ends, so a GPU holding
``LayerSlice(gpu_id, 1, 16)`` serves layers 1 through 16 of the model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import (
    DuplicateGpuId,
    InvalidCluster,
    NegativeRtt,
    SchedulerError,
    UnknownRegion,
)

# Guards against float dust when vram * (1 - reserve) / bytes_per_layer lands
# a hair under an exact integer; one part in 1e9 of a layer is never a real
# capacity difference.
_CAPACITY_EPS = 1e-9

DEFAULT_RESERVE_FRACTION = 0.2
DEFAULT_CROSS_REGION_RTT_S = 0.010


@dataclass(frozen=True)
class ModelSpec:
    """Static description of the model being served."""

    name: str
    layer_count: int
    bytes_per_layer: float
    flops_per_layer_per_token: float

    def __post_init__(self) -> None:
        if self.layer_count < 1:
            raise ValueError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.bytes_per_layer <= 0:
            raise ValueError("bytes_per_layer must be positive")
        if self.flops_per_layer_per_token <= 0:
            raise ValueError("flops_per_layer_per_token must be positive")


@dataclass(frozen=True)
class GpuNode:
    """One GPU in the pool.

    ``ram_token_capacity`` is the number of KV-cache tokens the node can hold
    per hosted layer; it gates admission, not placement.
    """

    id: str
    region: str
    vram_bytes: float
    flops: float
    reserve_fraction: float = DEFAULT_RESERVE_FRACTION
    ram_token_capacity: int = 100_000

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("gpu id must be non-empty")
        if self.vram_bytes < 0:
            raise ValueError(f"vram_bytes must be >= 0, got {self.vram_bytes}")
        if self.flops <= 0:
            raise ValueError(f"flops must be positive, got {self.flops}")
        if not 0.0 <= self.reserve_fraction < 1.0:
            raise ValueError(
                f"reserve_fraction must be in [0, 1), got {self.reserve_fraction}"
            )
        if self.ram_token_capacity < 0:
            raise ValueError("ram_token_capacity must be >= 0")


@dataclass(frozen=True)
class LayerSlice:
    """Contiguous block of layers assigned to one GPU, inclusive bounds."""

    gpu_id: str
    start_layer: int
    end_layer: int

    def __post_init__(self) -> None:
        if self.start_layer < 1 or self.end_layer < self.start_layer:
            raise ValueError(
                f"bad slice [{self.start_layer}, {self.end_layer}] for {self.gpu_id!r}"
            )

    @property
    def length(self) -> int:
        return self.end_layer - self.start_layer + 1

    def covers(self, layer: int) -> bool:
        return self.start_layer <= layer <= self.end_layer


@dataclass(frozen=True)
class ClusterSnapshot:
    """Point-in-time view of the pool.

    ``links`` holds declared one-way RTTs in seconds. Missing pairs fall back
    to ``default_cross_region_rtt_s``; same-GPU RTT is zero. Reads try the
    exact direction first, then the reverse (links are symmetric unless both
    directions are declared).
    """

    gpus: tuple[GpuNode, ...]
    links: Mapping[tuple[str, str], float] = field(default_factory=dict)
    regions: frozenset[str] = frozenset()
    default_cross_region_rtt_s: float = DEFAULT_CROSS_REGION_RTT_S

    def __post_init__(self) -> None:
        if not self.regions:
            object.__setattr__(
                self, "regions", frozenset(g.region for g in self.gpus)
            )

    def gpu(self, gpu_id: str) -> GpuNode:
        for g in self.gpus:
            if g.id == gpu_id:
                return g
        raise KeyError(gpu_id)

    def rtt_s(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        direct = self.links.get((a, b))
        if direct is not None:
            return direct
        reverse = self.links.get((b, a))
        if reverse is not None:
            return reverse
        return self.default_cross_region_rtt_s

    def gpus_in_region(self, region: str) -> tuple[GpuNode, ...]:
        return tuple(g for g in self.gpus if g.region == region)


def layer_capacity(gpu: GpuNode, model: ModelSpec) -> int:
    """Whole layers the GPU can hold after its VRAM reserve is set aside."""
    usable = gpu.vram_bytes * (1.0 - gpu.reserve_fraction)
    return max(0, math.floor(usable / model.bytes_per_layer + _CAPACITY_EPS))


def snapshot_violations(snapshot: ClusterSnapshot) -> list[SchedulerError]:
    """Collect every invariant violation in the snapshot (empty means valid)."""
    violations: list[SchedulerError] = []
    seen: set[str] = set()
    for g in snapshot.gpus:
        if g.id in seen:
            violations.append(DuplicateGpuId(g.id))
        seen.add(g.id)
        if g.region not in snapshot.regions:
            violations.append(UnknownRegion(g.id, g.region))
    for link, rtt in snapshot.links.items():
        if rtt < 0:
            violations.append(NegativeRtt(link, rtt))
    if snapshot.default_cross_region_rtt_s < 0:
        violations.append(
            NegativeRtt(("<default>", "<default>"), snapshot.default_cross_region_rtt_s)
        )
    return violations


def validate_snapshot(snapshot: ClusterSnapshot) -> ClusterSnapshot:
    """Return the snapshot unchanged, or raise InvalidCluster listing every problem."""
    violations = snapshot_violations(snapshot)
    if violations:
        raise InvalidCluster(violations)
    return snapshot


# ---------------------------------------------------------------------------
# File formats. RTTs are milliseconds on disk, seconds in memory.
# ---------------------------------------------------------------------------


def model_from_dict(raw: Mapping) -> ModelSpec:
    return ModelSpec(
        name=str(raw["name"]),
        layer_count=int(raw["layer_count"]),
        bytes_per_layer=float(raw["bytes_per_layer"]),
        flops_per_layer_per_token=float(raw["flops_per_layer_per_token"]),
    )


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "name": model.name,
        "layer_count": model.layer_count,
        "bytes_per_layer": model.bytes_per_layer,
        "flops_per_layer_per_token": model.flops_per_layer_per_token,
    }


def gpu_from_dict(entry: Mapping) -> GpuNode:
    return GpuNode(
        id=str(entry["id"]),
        region=str(entry["region"]),
        vram_bytes=float(entry["vram_bytes"]),
        flops=float(entry["flops"]),
        reserve_fraction=float(
            entry.get("reserve_fraction", DEFAULT_RESERVE_FRACTION)
        ),
        ram_token_capacity=int(entry.get("ram_token_capacity", 100_000)),
    )


def gpu_to_dict(g: GpuNode) -> dict:
    return {
        "id": g.id,
        "region": g.region,
        "vram_bytes": g.vram_bytes,
        "flops": g.flops,
        "reserve_fraction": g.reserve_fraction,
        "ram_token_capacity": g.ram_token_capacity,
    }


def cluster_from_dict(raw: Mapping) -> ClusterSnapshot:
    gpus = [gpu_from_dict(entry) for entry in raw.get("gpus", [])]
    links: dict[tuple[str, str], float] = {}
    for entry in raw.get("links", []):
        links[(str(entry["from"]), str(entry["to"]))] = float(entry["rtt_ms"]) / 1000.0
    regions = frozenset(str(r) for r in raw.get("regions", []))
    default_ms = float(
        raw.get("default_cross_region_rtt_ms", DEFAULT_CROSS_REGION_RTT_S * 1000.0)
    )
    snapshot = ClusterSnapshot(
        gpus=tuple(gpus),
        links=links,
        regions=regions,
        default_cross_region_rtt_s=default_ms / 1000.0,
    )
    return validate_snapshot(snapshot)


def cluster_to_dict(snapshot: ClusterSnapshot) -> dict:
    return {
        "gpus": [gpu_to_dict(g) for g in snapshot.gpus],
        "links": [
            {"from": a, "to": b, "rtt_ms": rtt * 1000.0}
            for (a, b), rtt in sorted(snapshot.links.items())
        ],
        "regions": sorted(snapshot.regions),
        "default_cross_region_rtt_ms": snapshot.default_cross_region_rtt_s * 1000.0,
    }


def load_model(path: str) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    # shape problems in user files must surface as invalid input, not tracebacks
    try:
        return model_from_dict(raw)
    except (TypeError, KeyError, AttributeError) as exc:
        raise ValueError(f"{path}: not a valid model file ({exc})") from exc


def load_cluster(path: str) -> ClusterSnapshot:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return cluster_from_dict(raw)
    except (TypeError, KeyError, AttributeError) as exc:
        raise ValueError(f"{path}: not a valid cluster file ({exc})") from exc


def save_model(model: ModelSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_cluster(snapshot: ClusterSnapshot, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cluster_to_dict(snapshot), fh, indent=2, sort_keys=True)
        fh.write("\n")


def total_capacity(gpus: Iterable[GpuNode], model: ModelSpec) -> int:
    return sum(layer_capacity(g, model) for g in gpus)
