"""Scaling benchmark on synthetic pools.

Builds pools of a few sizes with uniformly drawn per-GPU layer capacities,
regions assigned round-robin, fast links inside a region and the default
RTT across. For each pool it times a full placement run, then times a batch
of route/release round-trips against a fully published perf map, and
records the routing DAG's size. The DAG has one edge per host pair on each
layer boundary, so with R hosts per layer on average the edge count tracks
layer_count * R^2 — the report keeps that predictor next to the measured
count.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .allocator import allocate
from .membership import MembershipManager
from .perfmap import PerfMap
from .router import ChainRouter, build_dag, count_dag_edges
from .topology import ClusterSnapshot, GpuNode, ModelSpec

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (4, 8, 16, 32, 64, 128, 256)
_CAPACITY_RANGE = (4, 32)
_FLOPS_RANGE = (6e13, 2.4e14)
_INTRA_REGION_RTT_S = 0.001


@dataclass(frozen=True)
class BenchRow:
    gpu_count: int
    region_count: int
    layer_count: int
    replication_count: int
    allocate_ms: float
    route_ms: float  # mean per route/release round-trip
    routings: int
    dag_nodes: int
    dag_edges: int

    @property
    def mean_hosts_per_layer(self) -> float:
        return self.dag_nodes / self.layer_count

    @property
    def predicted_edges(self) -> float:
        return self.layer_count * self.mean_hosts_per_layer**2

    def to_dict(self) -> dict:
        return {
            "gpu_count": self.gpu_count,
            "region_count": self.region_count,
            "layer_count": self.layer_count,
            "replication_count": self.replication_count,
            "allocate_ms": self.allocate_ms,
            "route_ms": self.route_ms,
            "routings": self.routings,
            "dag_nodes": self.dag_nodes,
            "dag_edges": self.dag_edges,
            "mean_hosts_per_layer": self.mean_hosts_per_layer,
            "predicted_edges": self.predicted_edges,
        }


@dataclass(frozen=True)
class BenchReport:
    rows: Tuple[BenchRow, ...]

    def to_dict(self) -> dict:
        return {"rows": [row.to_dict() for row in self.rows]}


def save_report(report: BenchReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_region_count(gpu_count: int) -> int:
    """Regions grow with the pool: 1 for tiny pools, capped at 4."""
    return max(1, min(4, gpu_count // 8))


def synthetic_cluster(
    gpu_count: int,
    *,
    seed: int = 0,
    region_count: Optional[int] = None,
    model: Optional[ModelSpec] = None,
) -> Tuple[ClusterSnapshot, ModelSpec]:
    """Pool with uniform(4..32) layer capacities and round-robin regions."""
    if model is None:
        model = ModelSpec(
            name="bench-48l",
            layer_count=48,
            bytes_per_layer=1.2e9,
            flops_per_layer_per_token=2.8e10,
        )
    if region_count is None:
        region_count = default_region_count(gpu_count)
    rng = random.Random(seed)
    regions = [f"region-{chr(ord('a') + i)}" for i in range(region_count)]
    gpus = []
    for i in range(gpu_count):
        capacity = rng.randint(*_CAPACITY_RANGE)
        # vram chosen so the usable fraction holds exactly `capacity` layers
        vram = capacity * model.bytes_per_layer / 0.8
        gpus.append(
            GpuNode(
                id=f"gpu-{i:04d}",
                region=regions[i % region_count],
                vram_bytes=vram,
                flops=rng.uniform(*_FLOPS_RANGE),
                reserve_fraction=0.2,
            )
        )
    links = {}
    for i, a in enumerate(gpus):
        for b in gpus[i + 1 :]:
            if a.region == b.region:
                links[(a.id, b.id)] = _INTRA_REGION_RTT_S
    cluster = ClusterSnapshot(gpus=tuple(gpus), links=links)
    return cluster, model


def bench_pool(
    gpu_count: int,
    *,
    seed: int = 0,
    routings: int = 1000,
    region_count: Optional[int] = None,
    model: Optional[ModelSpec] = None,
) -> BenchRow:
    cluster, model = synthetic_cluster(
        gpu_count, seed=seed, region_count=region_count, model=model
    )
    started = time.perf_counter()
    plan = allocate(cluster, model)
    allocate_ms = (time.perf_counter() - started) * 1000.0

    perf_map = PerfMap(ttl_s=4.5)
    manager = MembershipManager(cluster, model, perf_map)
    base = {g.id: model.flops_per_layer_per_token / g.flops for g in cluster.gpus}
    perf_map.latency_fn = lambda gpu_id, layer, occ: base[gpu_id] * (1 + occ)
    manager.initialize(plan, 0.0)

    now = 0.5  # inside the TTL window of the t=0 publishes
    snapshot = perf_map.snapshot(now)
    dag = build_dag(snapshot, model.layer_count)
    edges = count_dag_edges(dag, snapshot)

    router = ChainRouter(perf_map, model.layer_count)
    started = time.perf_counter()
    for _ in range(routings):
        chain = router.route(now)
        router.release(chain, now)
    route_ms = (time.perf_counter() - started) * 1000.0 / routings

    row = BenchRow(
        gpu_count=gpu_count,
        region_count=len(cluster.regions),
        layer_count=model.layer_count,
        replication_count=plan.replication_count,
        allocate_ms=allocate_ms,
        route_ms=route_ms,
        routings=routings,
        dag_nodes=dag.node_count,
        dag_edges=edges,
    )
    logger.info(
        "bench %4d gpus: allocate %.1f ms, route %.3f ms, %d edges",
        gpu_count,
        allocate_ms,
        route_ms,
        edges,
    )
    return row


def run_bench(
    sizes: Sequence[int] = DEFAULT_SIZES,
    *,
    seed: int = 0,
    routings: int = 1000,
) -> BenchReport:
    rows: List[BenchRow] = []
    for size in sizes:
        rows.append(bench_pool(size, seed=seed + size, routings=routings))
    return BenchReport(rows=tuple(rows))
