"""Placement plan types produced by the layer allocator.

A plan is a set of pipelines; each pipeline is an ordered run of layer
slices that together cover layers 1..L exactly once. Pipelines built by the
two-phase planner stay inside one region; the uniform baseline planner may
stitch pipelines across regions and marks those with ``region=None``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .errors import SchedulerError
from .topology import ClusterSnapshot, LayerSlice, ModelSpec, layer_capacity


@dataclass(frozen=True)
class Pipeline:
    """One replica of the model, split into consecutive stages."""

    stages: tuple[LayerSlice, ...]
    region: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("pipeline must have at least one stage")
        cursor = self.stages[0].start_layer
        if cursor != 1:
            raise ValueError("pipeline must start at layer 1")
        for s in self.stages:
            if s.start_layer != cursor:
                raise ValueError(
                    f"stage {s.gpu_id!r} starts at {s.start_layer}, expected {cursor}"
                )
            cursor = s.end_layer + 1

    @property
    def gpu_ids(self) -> tuple[str, ...]:
        return tuple(s.gpu_id for s in self.stages)

    @property
    def layer_count(self) -> int:
        return self.stages[-1].end_layer

    @property
    def stage_count(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class PerKEntry:
    """Diagnostic row: stage minimum and score for one replication count."""

    region: str
    k: int
    s_star: int
    z: float


@dataclass(frozen=True)
class AllocationPlan:
    replication_count: int
    pipelines: tuple[Pipeline, ...]
    stage_total: int
    objective_score: float
    per_k_table: tuple[PerKEntry, ...] = field(default_factory=tuple)

    @property
    def layer_count(self) -> int:
        return self.pipelines[0].layer_count

    def gpu_slices(self) -> dict[str, LayerSlice]:
        out: dict[str, LayerSlice] = {}
        for p in self.pipelines:
            for s in p.stages:
                out[s.gpu_id] = s
        return out


class PlanViolation(SchedulerError):
    pass


def validate_plan(
    plan: AllocationPlan,
    cluster: ClusterSnapshot,
    model: ModelSpec,
    *,
    require_single_region: bool = True,
) -> AllocationPlan:
    """Check structural invariants of a plan against its cluster and model.

    Coverage per pipeline is already enforced by the Pipeline constructor;
    this adds the cross-pipeline and capacity checks.
    """
    by_id = {g.id: g for g in cluster.gpus}
    seen: set[str] = set()
    for p in plan.pipelines:
        if p.layer_count != model.layer_count:
            raise PlanViolation(
                f"pipeline covers {p.layer_count} layers, model has {model.layer_count}"
            )
        for s in p.stages:
            gpu = by_id.get(s.gpu_id)
            if gpu is None:
                raise PlanViolation(f"plan references unknown gpu {s.gpu_id!r}")
            if s.length > layer_capacity(gpu, model):
                raise PlanViolation(
                    f"gpu {s.gpu_id!r} holds {s.length} layers, capacity is "
                    f"{layer_capacity(gpu, model)}"
                )
            if s.gpu_id in seen:
                raise PlanViolation(f"gpu {s.gpu_id!r} appears in two pipelines")
            seen.add(s.gpu_id)
        if require_single_region:
            regions = {by_id[s.gpu_id].region for s in p.stages}
            if len(regions) != 1:
                raise PlanViolation(f"pipeline spans regions {sorted(regions)}")
            if p.region not in regions:
                raise PlanViolation(
                    f"pipeline tagged {p.region!r} but lies in {sorted(regions)}"
                )
    if plan.replication_count != len(plan.pipelines):
        raise PlanViolation("replication_count disagrees with pipeline list")
    if plan.stage_total != sum(p.stage_count for p in plan.pipelines):
        raise PlanViolation("stage_total disagrees with pipeline stages")
    return plan


def plan_to_dict(plan: AllocationPlan) -> dict:
    return {
        "k": plan.replication_count,
        "objective": plan.objective_score,
        "pipelines": [
            {
                "region": p.region,
                "stages": [
                    {
                        "gpu_id": s.gpu_id,
                        "start_layer": s.start_layer,
                        "end_layer": s.end_layer,
                    }
                    for s in p.stages
                ],
            }
            for p in plan.pipelines
        ],
        "per_k": [
            {"region": e.region, "k": e.k, "s_star": e.s_star, "z": e.z}
            for e in plan.per_k_table
        ],
    }


def plan_from_dict(raw: Mapping) -> AllocationPlan:
    pipelines = tuple(
        Pipeline(
            stages=tuple(
                LayerSlice(
                    gpu_id=str(s["gpu_id"]),
                    start_layer=int(s["start_layer"]),
                    end_layer=int(s["end_layer"]),
                )
                for s in entry["stages"]
            ),
            region=entry.get("region"),
        )
        for entry in raw["pipelines"]
    )
    per_k = tuple(
        PerKEntry(
            region=str(e.get("region", "")),
            k=int(e["k"]),
            s_star=int(e["s_star"]),
            z=float(e["z"]),
        )
        for e in raw.get("per_k", [])
    )
    return AllocationPlan(
        replication_count=int(raw["k"]),
        pipelines=pipelines,
        stage_total=sum(p.stage_count for p in pipelines),
        objective_score=float(raw["objective"]),
        per_k_table=per_k,
    )


def save_plan(plan: AllocationPlan, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan_to_dict(plan), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_plan(path: str) -> AllocationPlan:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return plan_from_dict(raw)
    except (TypeError, KeyError, AttributeError) as exc:
        raise ValueError(f"{path}: not a valid plan file ({exc})") from exc
