"""Deterministic discrete-event simulator for a serving pool.

Requests arrive from a trace, get routed to a chain, reserve KV headroom on
every GPU in the chain, then run one prefill followed by one event per
decode step. Step durations are computed when the step starts, from the
occupancy at that instant: a GPU serving ``n`` live chains multiplies its
base per-layer time by ``n ** contention_exponent``. Prefill is charged at
base speed (a fresh chain has its pipeline to itself while the bubble
fills) plus one RTT per cross-GPU edge; decode pays the RTT sum again on
every step unless ``amortize_rtt`` hides it in stream overlap.

Admission excludes GPUs whose remaining KV token headroom cannot hold the
request (prompt plus full output); a request that cannot be routed waits in
a FIFO queue and is retried whenever capacity frees. Membership events
(join/leave) apply mid-run: chains crossing a departed or re-assigned GPU
abort, losing their KV state, and restart from prefill — their latency
keeps accruing from the original arrival. After every membership event the
rebalance triggers run, and a global decision re-places the whole pool.

Everything is driven by a single event heap keyed (time, sequence), so runs
are reproducible to the bit for a given trace and event list.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .errors import (
    EmptySample,
    NoFeasiblePipeline,
    NoPath,
    UncoveredLayer,
    ZeroCapacityGpu,
)
from .membership import MembershipEvent, MembershipManager
from .perfmap import (
    DEFAULT_PUBLISH_INTERVAL_S,
    DEFAULT_TTL_MULTIPLIER,
    PerfMap,
)
from .plan import AllocationPlan, Pipeline
from .router import ChainRouter, PipelineChain
from .topology import ClusterSnapshot, LayerSlice, ModelSpec, layer_capacity
from .waterfill import hamilton_round, solve_lambda

logger = logging.getLogger(__name__)

_ARRIVAL = "arrival"
_PREFILL = "prefill"
_STEP = "step"
_MEMBERSHIP = "membership"
_PUBLISH = "publish"


@dataclass(frozen=True)
class Request:
    id: str
    arrival_s: float
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1:
            raise ValueError(f"prompt_tokens must be >= 1, got {self.prompt_tokens}")
        if self.output_tokens < 0:
            raise ValueError(f"output_tokens must be >= 0, got {self.output_tokens}")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens


def request_from_dict(raw: dict) -> Request:
    return Request(
        id=str(raw["id"]),
        arrival_s=float(raw["t"]),
        prompt_tokens=int(raw["prompt_tokens"]),
        output_tokens=int(raw["output_tokens"]),
    )


def request_to_dict(request: Request) -> dict:
    return {
        "id": request.id,
        "t": request.arrival_s,
        "prompt_tokens": request.prompt_tokens,
        "output_tokens": request.output_tokens,
    }


def load_trace(path: str) -> List[Request]:
    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                requests.append(request_from_dict(json.loads(line)))
            except (TypeError, KeyError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace line ({exc})") from exc
    requests.sort(key=lambda r: r.arrival_s)
    return requests


def save_trace(requests: Iterable[Request], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for request in requests:
            fh.write(json.dumps(request_to_dict(request), sort_keys=True) + "\n")


def generate_trace(
    rate_rps: float,
    duration_s: float,
    *,
    seed: int = 0,
    prompt_tokens: Tuple[int, int] = (32, 256),
    output_tokens: Tuple[int, int] = (16, 128),
) -> List[Request]:
    """Poisson arrivals at ``rate_rps`` with uniform token counts."""
    if rate_rps <= 0:
        raise ValueError(f"rate_rps must be positive, got {rate_rps}")
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    rng = random.Random(seed)
    requests = []
    t = 0.0
    index = 0
    while True:
        t += rng.expovariate(rate_rps)
        if t >= duration_s:
            break
        requests.append(
            Request(
                id=f"r{index:05d}",
                arrival_s=t,
                prompt_tokens=rng.randint(*prompt_tokens),
                output_tokens=rng.randint(*output_tokens),
            )
        )
        index += 1
    return requests


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile, p in (0, 100]."""
    if not values:
        raise EmptySample("percentile of an empty sample")
    if not 0.0 < p <= 100.0:
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(p * len(ordered) / 100.0))
    return ordered[rank - 1]


class LatencyModel:
    """Per-layer step time from GPU speed plus a contention multiplier.

    ``published(gpu, layer, occupancy)`` is what the GPU advertises: the
    step time a *new* chain would see, i.e. occupancy + itself.
    """

    def __init__(
        self,
        model: ModelSpec,
        manager: MembershipManager,
        contention_exponent: float = 1.0,
    ):
        self.model = model
        self.manager = manager
        self.contention_exponent = contention_exponent

    def base_s(self, gpu_id: str) -> float:
        return self.model.flops_per_layer_per_token / self.manager.gpu(gpu_id).flops

    def published(self, gpu_id: str, layer: int, occupancy: int) -> float:
        return self.base_s(gpu_id) * (1 + occupancy) ** self.contention_exponent

    def executing(self, gpu_id: str, live_chains: int) -> float:
        return self.base_s(gpu_id) * max(1, live_chains) ** self.contention_exponent


@dataclass(frozen=True)
class MetricsReport:
    submitted: int
    completed: int
    unserved: int
    aborted: int
    duration_s: float
    throughput_rps: float
    latency_mean_s: float
    latency_p50_s: float
    latency_p95_s: float
    latency_p99_s: float
    queue_peak: int

    def to_dict(self) -> dict:
        return {
            "submitted": self.submitted,
            "completed": self.completed,
            "unserved": self.unserved,
            "aborted": self.aborted,
            "duration_s": self.duration_s,
            "throughput_rps": self.throughput_rps,
            "latency_mean_s": self.latency_mean_s,
            "latency_p50_s": self.latency_p50_s,
            "latency_p95_s": self.latency_p95_s,
            "latency_p99_s": self.latency_p99_s,
            "queue_peak": self.queue_peak,
        }


@dataclass
class _Live:
    request: Request
    chain: PipelineChain
    remaining: int
    generation: int


class _Simulation:
    def __init__(
        self,
        cluster: ClusterSnapshot,
        model: ModelSpec,
        plan: AllocationPlan,
        trace: Sequence[Request],
        *,
        membership_events: Sequence[MembershipEvent] = (),
        publish_interval_s: float = DEFAULT_PUBLISH_INTERVAL_S,
        ttl_multiplier: float = DEFAULT_TTL_MULTIPLIER,
        contention_exponent: float = 1.0,
        amortize_rtt: bool = False,
        mix_alpha: float = 0.5,
        cov_threshold: float = 0.5,
        alpha: float = 1.0,
        mean_tokens_per_request: float = 128.0,
    ):
        self.model = model
        self.publish_interval_s = publish_interval_s
        self.amortize_rtt = amortize_rtt
        self.perf_map = PerfMap(ttl_s=publish_interval_s * ttl_multiplier)
        self.manager = MembershipManager(
            cluster,
            model,
            self.perf_map,
            mix_alpha=mix_alpha,
            cov_threshold=cov_threshold,
            alpha=alpha,
            mean_tokens_per_request=mean_tokens_per_request,
        )
        self.latency = LatencyModel(model, self.manager, contention_exponent)
        self.perf_map.latency_fn = self.latency.published
        self.manager.initialize(plan, 0.0)
        self.router = ChainRouter(self.perf_map, model.layer_count)

        self._heap: List[Tuple[float, int, str, object]] = []
        self._seq = 0
        self._live: Dict[str, _Live] = {}
        self._generation: Dict[str, int] = {}
        self._queue: List[Tuple[float, int, Request]] = []
        self._queue_seq = 0
        self._queue_peak = 0
        self._latencies: List[float] = []
        self._submitted = len(trace)
        self._completed = 0
        self._aborted = 0
        self._arrivals_left = len(trace)
        self._membership_left = len(membership_events)
        self._now = 0.0

        for request in sorted(trace, key=lambda r: r.arrival_s):
            self._push(request.arrival_s, _ARRIVAL, request)
        for event in sorted(membership_events, key=lambda e: e.at_s):
            self._push(event.at_s, _MEMBERSHIP, event)
        if self._work_remains():
            self._push(publish_interval_s, _PUBLISH, None)

    # -- plumbing -------------------------------------------------------------

    def _push(self, at_s: float, kind: str, payload: object) -> None:
        heapq.heappush(self._heap, (at_s, self._seq, kind, payload))
        self._seq += 1

    def _work_remains(self) -> bool:
        # A non-empty queue alone is dead weight: nothing left can unblock it.
        return bool(self._live) or self._arrivals_left > 0 or self._membership_left > 0

    def _chain_rtt_s(self, chain: PipelineChain) -> float:
        total = 0.0
        for a, b in zip(chain.hops, chain.hops[1:]):
            if a.gpu_id != b.gpu_id:
                total += self.manager.rtt_s(a.gpu_id, b.gpu_id)
        return total

    def _prefill_s(self, chain: PipelineChain, request: Request) -> float:
        compute = sum(
            self.latency.base_s(hop.gpu_id) * hop.length for hop in chain.hops
        )
        return compute * request.prompt_tokens + self._chain_rtt_s(chain)

    def _step_s(self, chain: PipelineChain) -> float:
        total = 0.0
        for hop in chain.hops:
            live = self.perf_map.occupancy(hop.gpu_id)
            total += self.latency.executing(hop.gpu_id, live) * hop.length
        if not self.amortize_rtt:
            total += self._chain_rtt_s(chain)
        return total

    # -- admission --------------------------------------------------------------

    def _try_admit(self, request: Request, now: float) -> bool:
        tokens = request.total_tokens
        blocked = {
            gpu_id
            for gpu_id in self.manager.gpu_ids()
            if self.manager.kv_headroom(gpu_id) < tokens
        }
        try:
            chain = self.router.route(now, exclude=blocked)
        except (UncoveredLayer, NoPath):
            return False
        for gpu_id in set(chain.gpu_ids):
            self.manager.reserve_kv(gpu_id, tokens)
        generation = self._generation.get(request.id, 0) + 1
        self._generation[request.id] = generation
        self._live[request.id] = _Live(request, chain, request.output_tokens, generation)
        self._push(
            now + self._prefill_s(chain, request), _PREFILL, (request.id, generation)
        )
        return True

    def _enqueue(self, request: Request) -> None:
        heapq.heappush(self._queue, (request.arrival_s, self._queue_seq, request))
        self._queue_seq += 1
        self._queue_peak = max(self._queue_peak, len(self._queue))

    def _drain_queue(self, now: float) -> None:
        # Strict FIFO: stop at the first request that still cannot be placed.
        while self._queue:
            _, _, request = self._queue[0]
            if not self._try_admit(request, now):
                break
            heapq.heappop(self._queue)

    def _release(self, live: _Live, now: float) -> None:
        self.router.release(live.chain, now)
        tokens = live.request.total_tokens
        for gpu_id in set(live.chain.gpu_ids):
            self.manager.release_kv(gpu_id, tokens)

    # -- event handlers -----------------------------------------------------------

    def _on_arrival(self, request: Request, now: float) -> None:
        self._arrivals_left -= 1
        # anyone already waiting goes first; jumping the queue would starve
        # blocked heads whenever small requests keep fitting around them
        if self._queue or not self._try_admit(request, now):
            self._enqueue(request)

    def _fresh(self, payload: object) -> Optional[_Live]:
        request_id, generation = payload  # type: ignore[misc]
        live = self._live.get(request_id)
        if live is None or live.generation != generation:
            return None  # chain was aborted since this event was scheduled
        return live

    def _on_prefill(self, payload: object, now: float) -> None:
        live = self._fresh(payload)
        if live is None:
            return
        if live.remaining == 0:
            self._complete(live, now)
        else:
            self._push(now + self._step_s(live.chain), _STEP, payload)

    def _on_step(self, payload: object, now: float) -> None:
        live = self._fresh(payload)
        if live is None:
            return
        live.remaining -= 1
        if live.remaining == 0:
            self._complete(live, now)
        else:
            self._push(now + self._step_s(live.chain), _STEP, payload)

    def _complete(self, live: _Live, now: float) -> None:
        self._release(live, now)
        del self._live[live.request.id]
        self._latencies.append(now - live.request.arrival_s)
        self._completed += 1
        self._drain_queue(now)

    def _abort_chains_on(self, gpu_ids: Set[str], now: float) -> None:
        victims = [
            live
            for live in self._live.values()
            if gpu_ids.intersection(live.chain.gpu_ids)
        ]
        for live in sorted(victims, key=lambda v: v.request.id):
            self._release(live, now)
            del self._live[live.request.id]
            self._aborted += 1
            self._enqueue(live.request)  # restarts from prefill, arrival kept

    def _on_membership(self, event: MembershipEvent, now: float) -> None:
        self._membership_left -= 1
        if event.kind == "leave":
            # Abort first: occupancy release needs the GPU still registered.
            self._abort_chains_on({event.gpu_id}, now)
            self.manager.on_leave(event.gpu_id, now)
        else:
            assert event.gpu is not None
            try:
                self.manager.on_join(event.gpu, now)
            except ZeroCapacityGpu:
                logger.info("join %s: too small to host a layer", event.gpu.id)
        decision = self.manager.evaluate_triggers()
        if decision.is_global:
            result = self.manager.global_rebalance(now)
            if not result.degraded:
                self._abort_chains_on(set(result.changed_gpus), now)
        self._drain_queue(now)

    def _on_publish(self, now: float) -> None:
        if not self._work_remains():
            return  # nothing left to serve; let the clock stop
        self.manager.republish_all(now)
        self._push(now + self.publish_interval_s, _PUBLISH, None)

    # -- main loop -------------------------------------------------------------

    def run(self) -> MetricsReport:
        while self._heap:
            at_s, _, kind, payload = heapq.heappop(self._heap)
            self._now = at_s
            if kind == _ARRIVAL:
                self._on_arrival(payload, at_s)  # type: ignore[arg-type]
            elif kind == _PREFILL:
                self._on_prefill(payload, at_s)
            elif kind == _STEP:
                self._on_step(payload, at_s)
            elif kind == _MEMBERSHIP:
                self._on_membership(payload, at_s)  # type: ignore[arg-type]
            elif kind == _PUBLISH:
                self._on_publish(at_s)
        duration = self._now
        throughput = self._completed / duration if duration > 0 else 0.0
        if self._latencies:
            mean = sum(self._latencies) / len(self._latencies)
            p50 = percentile(self._latencies, 50)
            p95 = percentile(self._latencies, 95)
            p99 = percentile(self._latencies, 99)
        else:
            mean = p50 = p95 = p99 = 0.0
        return MetricsReport(
            submitted=self._submitted,
            completed=self._completed,
            unserved=self._submitted - self._completed,
            aborted=self._aborted,
            duration_s=duration,
            throughput_rps=throughput,
            latency_mean_s=mean,
            latency_p50_s=p50,
            latency_p95_s=p95,
            latency_p99_s=p99,
            queue_peak=self._queue_peak,
        )


def run_simulation(
    cluster: ClusterSnapshot,
    model: ModelSpec,
    plan: AllocationPlan,
    trace: Sequence[Request],
    *,
    membership_events: Sequence[MembershipEvent] = (),
    publish_interval_s: float = DEFAULT_PUBLISH_INTERVAL_S,
    ttl_multiplier: float = DEFAULT_TTL_MULTIPLIER,
    contention_exponent: float = 1.0,
    amortize_rtt: bool = False,
    mix_alpha: float = 0.5,
    cov_threshold: float = 0.5,
    alpha: float = 1.0,
    mean_tokens_per_request: float = 128.0,
) -> MetricsReport:
    """Run the trace against the plan and report latency/throughput."""
    sim = _Simulation(
        cluster,
        model,
        plan,
        trace,
        membership_events=membership_events,
        publish_interval_s=publish_interval_s,
        ttl_multiplier=ttl_multiplier,
        contention_exponent=contention_exponent,
        amortize_rtt=amortize_rtt,
        mix_alpha=mix_alpha,
        cov_threshold=cov_threshold,
        alpha=alpha,
        mean_tokens_per_request=mean_tokens_per_request,
    )
    return sim.run()


def baseline_plan(cluster: ClusterSnapshot, model: ModelSpec) -> AllocationPlan:
    """Naive placement: capacity-sorted first-fit, even splits, no regions.

    GPUs are taken in capacity order regardless of region, grouped until a
    group can hold the model, and layers are split as evenly as the caps
    allow (a water-fill with every GPU treated as equally fast). Leftover
    GPUs that never complete a group go unused.
    """
    usable = [
        (g, layer_capacity(g, model))
        for g in sorted(cluster.gpus, key=lambda g: (-layer_capacity(g, model), g.id))
        if layer_capacity(g, model) >= 1
    ]
    layer_count = model.layer_count
    pipelines: List[Pipeline] = []
    group: List[Tuple[str, int]] = []
    acc = 0
    for gpu, cap in usable:
        group.append((gpu.id, cap))
        acc += cap
        if acc < layer_count:
            continue
        caps = [cap for _, cap in group]
        frac = solve_lambda([1.0] * len(group), caps, layer_count)
        rounded = hamilton_round(frac, caps, total=layer_count)
        stages = []
        cursor = 1
        for (gpu_id, _), count in zip(group, rounded.layers):
            stages.append(LayerSlice(gpu_id, cursor, cursor + count - 1))
            cursor += count
        regions = {cluster.gpu(gpu_id).region for gpu_id, _ in group}
        region = regions.pop() if len(regions) == 1 else None
        pipelines.append(Pipeline(stages=tuple(stages), region=region))
        group = []
        acc = 0
    if not pipelines:
        raise NoFeasiblePipeline()
    return AllocationPlan(
        replication_count=len(pipelines),
        pipelines=tuple(pipelines),
        stage_total=sum(p.stage_count for p in pipelines),
        objective_score=0.0,
        per_k_table=(),
    )
