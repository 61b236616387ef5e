"""Dynamic membership: joins, departures, and rebalance triggers.

The manager owns the serving state — which GPU holds which contiguous layer
slice — and keeps the perf map in sync with it. A joining GPU is pointed at
the most starved layer (smallest aggregate KV token capacity across current
hosts, so coverage holes always win) and takes as many consecutive layers
from there as its VRAM allows. A departing GPU's keys are dropped from the
perf map immediately; routing stops using it on the next snapshot rather
than after a TTL.

Whether the cheap local fix is enough is decided by two triggers: any
uncovered layer forces a global rebalance, as does the per-layer load
spread (population CoV of the mixed KV/compute load) exceeding its
threshold. A global rebalance re-runs placement from scratch on the current
pool and rewrites every GPU's slice; if no feasible pipeline exists the old
placement is kept and the result is flagged degraded.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .allocator import allocate
from .errors import (
    DuplicateGpuId,
    NoFeasiblePipeline,
    UnknownGpu,
    ZeroCapacityGpu,
)
from .perfmap import PerfMap, layer_load, layer_load_cov
from .plan import AllocationPlan
from .topology import (
    ClusterSnapshot,
    GpuNode,
    LayerSlice,
    ModelSpec,
    gpu_from_dict,
    gpu_to_dict,
    layer_capacity,
)

logger = logging.getLogger(__name__)

DEFAULT_COV_THRESHOLD = 0.5
DEFAULT_MIX_ALPHA = 0.5

JOIN = "join"
LEAVE = "leave"


@dataclass(frozen=True)
class MembershipEvent:
    at_s: float
    kind: str  # JOIN | LEAVE
    gpu: Optional[GpuNode] = None  # join only
    gpu_id: str = ""

    def __post_init__(self) -> None:
        if self.kind == JOIN:
            if self.gpu is None:
                raise ValueError("join event needs a gpu record")
            object.__setattr__(self, "gpu_id", self.gpu.id)
        elif self.kind == LEAVE:
            if not self.gpu_id:
                raise ValueError("leave event needs a gpu_id")
        else:
            raise ValueError(f"event kind must be join or leave, got {self.kind!r}")


def event_from_dict(raw: Mapping) -> MembershipEvent:
    kind = str(raw["event"])
    at_s = float(raw["t"])
    if kind == JOIN:
        return MembershipEvent(at_s=at_s, kind=JOIN, gpu=gpu_from_dict(raw["gpu"]))
    return MembershipEvent(at_s=at_s, kind=LEAVE, gpu_id=str(raw["gpu_id"]))


def event_to_dict(event: MembershipEvent) -> dict:
    if event.kind == JOIN:
        assert event.gpu is not None
        return {"t": event.at_s, "event": JOIN, "gpu": gpu_to_dict(event.gpu)}
    return {"t": event.at_s, "event": LEAVE, "gpu_id": event.gpu_id}


def load_events(path: str) -> List[MembershipEvent]:
    """Membership events from a JSONL file, sorted by time."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(event_from_dict(json.loads(line)))
            except (TypeError, KeyError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event line ({exc})") from exc
    events.sort(key=lambda e: e.at_s)
    return events


def save_events(events: Iterable[MembershipEvent], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event_to_dict(event), sort_keys=True) + "\n")


@dataclass(frozen=True)
class RebalanceDecision:
    scope: str  # "global" | "local"
    reason: str  # "uncovered_layers" | "load_cov_exceeded" | "balanced"
    load_cov: float
    uncovered: Tuple[int, ...] = ()

    @property
    def is_global(self) -> bool:
        return self.scope == "global"


@dataclass(frozen=True)
class RebalanceResult:
    plan: Optional[AllocationPlan]
    changed_gpus: Tuple[str, ...]
    degraded: bool  # True: no feasible placement, old slices kept


class MembershipManager:
    """Serving-state owner; applies joins/leaves and keeps the map in sync."""

    def __init__(
        self,
        cluster: ClusterSnapshot,
        model: ModelSpec,
        perf_map: PerfMap,
        *,
        mix_alpha: float = DEFAULT_MIX_ALPHA,
        cov_threshold: float = DEFAULT_COV_THRESHOLD,
        alpha: float = 1.0,
        mean_tokens_per_request: float = 128.0,
    ):
        self.model = model
        self.perf_map = perf_map
        self.mix_alpha = mix_alpha
        self.cov_threshold = cov_threshold
        self.alpha = alpha
        self.mean_tokens_per_request = mean_tokens_per_request
        self._gpus: Dict[str, GpuNode] = {}
        for g in cluster.gpus:
            if g.id in self._gpus:
                raise DuplicateGpuId(g.id)
            self._gpus[g.id] = g
        self._links: Dict[Tuple[str, str], float] = dict(cluster.links)
        self._default_rtt = cluster.default_cross_region_rtt_s
        self.slices: Dict[str, LayerSlice] = {}
        self._kv_reserved: Dict[str, int] = {}

    # -- views ----------------------------------------------------------------

    def cluster_snapshot(self) -> ClusterSnapshot:
        gpus = tuple(self._gpus[g] for g in sorted(self._gpus))
        links = {
            pair: rtt
            for pair, rtt in self._links.items()
            if pair[0] in self._gpus and pair[1] in self._gpus
        }
        return ClusterSnapshot(
            gpus=gpus, links=links, default_cross_region_rtt_s=self._default_rtt
        )

    def gpu(self, gpu_id: str) -> GpuNode:
        try:
            return self._gpus[gpu_id]
        except KeyError:
            raise UnknownGpu(gpu_id) from None

    def gpu_ids(self) -> Tuple[str, ...]:
        return tuple(sorted(self._gpus))

    def rtt_s(self, a: str, b: str) -> float:
        """Ground-truth one-way RTT with the same fallbacks as a snapshot."""
        if a == b:
            return 0.0
        direct = self._links.get((a, b))
        if direct is not None:
            return direct
        reverse = self._links.get((b, a))
        if reverse is not None:
            return reverse
        return self._default_rtt

    def hosts_of_layer(self, layer: int) -> List[str]:
        return sorted(
            gpu_id for gpu_id, sl in self.slices.items() if sl.covers(layer)
        )

    def uncovered_layers(self) -> Tuple[int, ...]:
        covered = set()
        for sl in self.slices.values():
            covered.update(range(sl.start_layer, sl.end_layer + 1))
        return tuple(
            layer
            for layer in range(1, self.model.layer_count + 1)
            if layer not in covered
        )

    # -- KV accounting ----------------------------------------------------------

    def kv_reserved(self, gpu_id: str) -> int:
        return self._kv_reserved.get(gpu_id, 0)

    def kv_headroom(self, gpu_id: str) -> int:
        return self.gpu(gpu_id).ram_token_capacity - self.kv_reserved(gpu_id)

    def reserve_kv(self, gpu_id: str, tokens: int) -> None:
        self._kv_reserved[gpu_id] = self.kv_reserved(gpu_id) + tokens

    def release_kv(self, gpu_id: str, tokens: int) -> None:
        remaining = self.kv_reserved(gpu_id) - tokens
        if remaining < 0:
            raise ValueError(f"kv release below zero on {gpu_id!r}")
        self._kv_reserved[gpu_id] = remaining

    # -- sync helpers -----------------------------------------------------------

    def _publish_gpu(self, gpu: GpuNode, now: float) -> None:
        self.perf_map.publish_node_attrs(
            gpu.id,
            {
                "region": gpu.region,
                "flops": gpu.flops,
                "vram_bytes": gpu.vram_bytes,
                "ram_token_capacity": gpu.ram_token_capacity,
            },
            now,
        )

    def _publish_links_for(self, gpu_id: str, now: float) -> None:
        rtts: Dict[Tuple[str, str], float] = {}
        for other in self._gpus:
            if other == gpu_id or not self.perf_map.is_registered(other):
                continue
            forward = self.rtt_s(gpu_id, other)
            backward = self.rtt_s(other, gpu_id)
            rtts[(gpu_id, other)] = forward
            if backward != forward:
                rtts[(other, gpu_id)] = backward
        if rtts:
            self.perf_map.publish_link_rtts(rtts, now)

    def _sync_slice(self, gpu_id: str, now: float) -> None:
        sl = self.slices.get(gpu_id)
        layers = range(sl.start_layer, sl.end_layer + 1) if sl else ()
        self.perf_map.sync_gpu_layers(gpu_id, layers, now)

    def _all_link_rtts(self) -> Dict[Tuple[str, str], float]:
        """One batch covering every pair; a batch rebuilds the whole RTT table."""
        ids = sorted(self._gpus)
        rtts: Dict[Tuple[str, str], float] = {}
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                forward = self.rtt_s(a, b)
                backward = self.rtt_s(b, a)
                rtts[(a, b)] = forward
                if backward != forward:
                    rtts[(b, a)] = backward
        return rtts

    def initialize(self, plan: AllocationPlan, now: float) -> None:
        """Register the whole pool and install the initial placement."""
        for gpu_id in sorted(self._gpus):
            self.perf_map.register_gpu(gpu_id)
            self._publish_gpu(self._gpus[gpu_id], now)
        rtts = self._all_link_rtts()
        if rtts:
            self.perf_map.publish_link_rtts(rtts, now)
        self.apply_plan(plan, now)

    def republish_all(self, now: float) -> None:
        """Periodic tick: refresh every attr, latency, and RTT entry's TTL."""
        for gpu_id in sorted(self._gpus):
            if self.perf_map.is_registered(gpu_id):
                self._publish_gpu(self._gpus[gpu_id], now)
                self._sync_slice(gpu_id, now)
        rtts = self._all_link_rtts()
        if rtts:
            self.perf_map.publish_link_rtts(rtts, now)

    def apply_plan(self, plan: AllocationPlan, now: float) -> Tuple[str, ...]:
        """Replace all serving slices with the plan's; returns changed GPU ids."""
        fresh: Dict[str, LayerSlice] = dict(plan.gpu_slices())
        changed = sorted(
            gpu_id
            for gpu_id in set(fresh) | set(self.slices)
            if fresh.get(gpu_id) != self.slices.get(gpu_id)
        )
        self.slices = fresh
        for gpu_id in sorted(self._gpus):
            if self.perf_map.is_registered(gpu_id):
                self._sync_slice(gpu_id, now)
        return tuple(changed)

    # -- membership events --------------------------------------------------------

    def bottleneck_layer(self) -> int:
        """Layer with the least aggregate KV token capacity; holes count as 0."""
        best_layer = 1
        best_capacity: Optional[int] = None
        for layer in range(1, self.model.layer_count + 1):
            total = sum(
                self._gpus[gpu_id].ram_token_capacity
                for gpu_id in self.slices
                if self.slices[gpu_id].covers(layer) and gpu_id in self._gpus
            )
            if best_capacity is None or total < best_capacity:
                best_capacity = total
                best_layer = layer
        return best_layer

    def on_join(self, gpu: GpuNode, now: float) -> LayerSlice:
        """Admit the GPU and point it at the most starved layers.

        A GPU too small to hold even one layer stays registered (it can still
        publish attrs) but serves nothing; ZeroCapacityGpu says so.
        """
        if gpu.id in self._gpus:
            raise DuplicateGpuId(gpu.id)
        self._gpus[gpu.id] = gpu
        self.perf_map.register_gpu(gpu.id)
        self._publish_gpu(gpu, now)
        self._publish_links_for(gpu.id, now)
        capacity = layer_capacity(gpu, self.model)
        if capacity < 1:
            raise ZeroCapacityGpu(gpu.id)
        start = self.bottleneck_layer()
        end = min(start + capacity - 1, self.model.layer_count)
        sl = LayerSlice(gpu.id, start, end)
        self.slices[gpu.id] = sl
        self._sync_slice(gpu.id, now)
        logger.info("join %s -> layers [%d, %d]", gpu.id, start, end)
        return sl

    def on_leave(self, gpu_id: str, now: float) -> None:
        """Remove the GPU; its perf keys vanish now, not at TTL expiry."""
        if gpu_id not in self._gpus:
            raise UnknownGpu(gpu_id)
        del self._gpus[gpu_id]
        self.slices.pop(gpu_id, None)
        self._kv_reserved.pop(gpu_id, None)
        self._links = {
            pair: rtt for pair, rtt in self._links.items() if gpu_id not in pair
        }
        self.perf_map.unregister_gpu(gpu_id)
        logger.info("leave %s", gpu_id)

    # -- rebalance ---------------------------------------------------------------

    def layer_loads(self) -> List[float]:
        """Mixed KV/compute pressure per layer, against pool-wide totals.

        A GPU's whole KV usage and busy flag count toward every layer it
        hosts: the signal asks "how contended are this layer's hosts", not
        "which layer caused it".
        """
        total_memory = sum(
            g.vram_bytes * g.reserve_fraction for g in self._gpus.values()
        )
        total_flops = sum(g.flops for g in self._gpus.values())
        loads = []
        for layer in range(1, self.model.layer_count + 1):
            kv_bytes = 0.0
            compute = 0.0
            for gpu_id, sl in self.slices.items():
                if not sl.covers(layer) or gpu_id not in self._gpus:
                    continue
                g = self._gpus[gpu_id]
                if g.ram_token_capacity > 0:
                    used_fraction = self.kv_reserved(gpu_id) / g.ram_token_capacity
                    kv_bytes += used_fraction * g.vram_bytes * g.reserve_fraction
                compute += g.flops * min(1, self.perf_map.occupancy(gpu_id))
            loads.append(
                layer_load(
                    kv_bytes, compute, total_memory, total_flops, self.mix_alpha
                )
            )
        return loads

    def evaluate_triggers(self) -> RebalanceDecision:
        uncovered = self.uncovered_layers()
        cov = layer_load_cov(self.layer_loads())
        if uncovered:
            return RebalanceDecision("global", "uncovered_layers", cov, uncovered)
        if cov > self.cov_threshold:
            return RebalanceDecision("global", "load_cov_exceeded", cov)
        return RebalanceDecision("local", "balanced", cov)

    def global_rebalance(self, now: float) -> RebalanceResult:
        """Re-place the whole pool; keep the old slices if nothing feasible."""
        try:
            plan = allocate(
                self.cluster_snapshot(),
                self.model,
                alpha=self.alpha,
                mean_tokens_per_request=self.mean_tokens_per_request,
            )
        except NoFeasiblePipeline:
            logger.warning("global rebalance found no feasible pipeline; keeping slices")
            return RebalanceResult(plan=None, changed_gpus=(), degraded=True)
        changed = self.apply_plan(plan, now)
        return RebalanceResult(plan=plan, changed_gpus=changed, degraded=False)
