"""In-process performance map: the cluster's shared metrics store.

Every GPU periodically publishes its per-layer decode latency and its link
RTTs to its peers; routing reads a point-in-time snapshot of those entries.
Entries expire after a TTL (publish interval times a multiplier), so a GPU
that vanishes without deregistering stops being routable within one TTL.

Three key families:

  * layer latency (gpu, layer) -> seconds per token at current occupancy
  * link RTT      (a, b)       -> one-way seconds, symmetric unless both
                                  directions are published explicitly
  * node attrs    (gpu)        -> small record (RAM token capacity, region)

Chain select/release events update per-GPU occupancy and republish the
affected latencies immediately, so routing feedback does not wait for the
next publish tick. Writes take a lock; snapshots copy the latency and attr
tables and share the RTT table, which is never mutated in place (publishes
swap in a rebuilt dict), so a snapshot stays internally consistent while
publishers keep writing.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import NegativeRtt, OccupancyUnderflow, UnknownGpu

DEFAULT_PUBLISH_INTERVAL_S = 1.5
DEFAULT_TTL_MULTIPLIER = 3.0

# latency_fn(gpu_id, layer, occupancy) -> seconds per token
LatencyFn = Callable[[str, int, int], float]


@dataclass(frozen=True)
class LayerLatencyKey:
    gpu_id: str
    layer: int


@dataclass(frozen=True)
class LinkRttKey:
    a: str
    b: str


@dataclass(frozen=True)
class NodeAttrKey:
    gpu_id: str


PerfKey = Union[LayerLatencyKey, LinkRttKey, NodeAttrKey]


@dataclass(frozen=True)
class PerfEntry:
    value: Union[float, Mapping]
    published_at: float
    ttl_s: float

    def expired(self, now: float) -> bool:
        return now - self.published_at > self.ttl_s

    def age_s(self, now: float) -> float:
        return now - self.published_at


@dataclass(frozen=True)
class LayerLoad:
    """Mixed memory/compute pressure on one layer's replica set."""

    layer: int
    kv_fraction: float
    compute_fraction: float
    mix_alpha: float = 0.5

    @property
    def value(self) -> float:
        return self.mix_alpha * self.kv_fraction + (1.0 - self.mix_alpha) * self.compute_fraction


def layer_load(
    kv_bytes: float,
    compute_flops: float,
    total_memory_bytes: float,
    total_flops: float,
    mix_alpha: float = 0.5,
) -> float:
    """Blend of the layer's KV-memory share and committed-compute share.

    Either fraction is zero when its cluster-wide denominator is zero; an
    empty cluster therefore loads to 0.
    """
    if not 0.0 <= mix_alpha <= 1.0:
        raise ValueError(f"mix_alpha must be in [0, 1], got {mix_alpha}")
    kv_fraction = kv_bytes / total_memory_bytes if total_memory_bytes > 0 else 0.0
    compute_fraction = compute_flops / total_flops if total_flops > 0 else 0.0
    return mix_alpha * kv_fraction + (1.0 - mix_alpha) * compute_fraction


def layer_load_cov(loads: Iterable[float]) -> float:
    """Population coefficient of variation; 0 for a zero or empty mean."""
    values = list(loads)
    if not values:
        return 0.0
    mean = sum(values) / len(values)
    if mean == 0.0:
        return 0.0
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    return math.sqrt(variance) / mean


class PerfSnapshot:
    """Frozen read view taken at one instant; safe to use across publishes."""

    def __init__(
        self,
        now: float,
        layer_latencies: Dict[Tuple[str, int], float],
        link_rtts: Mapping[Tuple[str, str], PerfEntry],
        attrs: Dict[str, Mapping],
        rtt_version: int,
        rtt_oldest_publish: float,
    ):
        self.now = now
        self.layer_latencies = layer_latencies  # live entries only
        self._link_rtts = link_rtts  # shared immutable table; expiry per read
        self.attrs = attrs
        self.rtt_version = rtt_version
        self.rtt_oldest_publish = rtt_oldest_publish

    def layer_latency(self, gpu_id: str, layer: int) -> Optional[float]:
        return self.layer_latencies.get((gpu_id, layer))

    def link_rtt(self, a: str, b: str) -> Optional[float]:
        entry = self._link_rtts.get((a, b))
        if entry is None:
            entry = self._link_rtts.get((b, a))
        if entry is None or entry.expired(self.now):
            return None
        return entry.value  # type: ignore[return-value]

    def link_rtt_entries(self) -> List[Tuple[str, str, float]]:
        """Unexpired (a, b, rtt_s) rows in key order."""
        rows = []
        for (a, b) in sorted(self._link_rtts):
            entry = self._link_rtts[(a, b)]
            if not entry.expired(self.now):
                rows.append((a, b, entry.value))
        return rows

    def rtt_all_live(self) -> bool:
        """True when every RTT entry in the shared table is unexpired."""
        return bool(self._link_rtts) and not any(
            e.expired(self.now) for e in self._link_rtts.values()
        )


class PerfMap:
    """Shared TTL store plus per-GPU occupancy accounting."""

    def __init__(self, *, ttl_s: float, latency_fn: Optional[LatencyFn] = None):
        if ttl_s <= 0:
            raise ValueError(f"ttl_s must be positive, got {ttl_s}")
        self.ttl_s = ttl_s
        self.latency_fn = latency_fn
        self._lock = threading.Lock()
        self._gpus: set[str] = set()
        self._latency: Dict[Tuple[str, int], PerfEntry] = {}
        self._published_layers: Dict[str, set[int]] = {}
        self._rtts: Dict[Tuple[str, str], PerfEntry] = {}
        self._rtt_version = 0
        self._rtt_oldest = math.inf
        self._attrs: Dict[str, PerfEntry] = {}
        self._occupancy: Dict[str, int] = {}

    # -- membership ---------------------------------------------------------

    def register_gpu(self, gpu_id: str) -> None:
        with self._lock:
            self._gpus.add(gpu_id)
            self._occupancy.setdefault(gpu_id, 0)

    def unregister_gpu(self, gpu_id: str) -> None:
        """Drop the GPU and every key that mentions it, immediately."""
        with self._lock:
            self._gpus.discard(gpu_id)
            self._occupancy.pop(gpu_id, None)
            for layer in self._published_layers.pop(gpu_id, set()):
                self._latency.pop((gpu_id, layer), None)
            self._attrs.pop(gpu_id, None)
            remaining = {
                pair: e for pair, e in self._rtts.items() if gpu_id not in pair
            }
            if len(remaining) != len(self._rtts):
                self._swap_rtts(remaining)

    def is_registered(self, gpu_id: str) -> bool:
        return gpu_id in self._gpus

    def registered_gpus(self) -> Tuple[str, ...]:
        return tuple(sorted(self._gpus))

    def _require(self, gpu_id: str) -> None:
        if gpu_id not in self._gpus:
            raise UnknownGpu(gpu_id)

    # -- publishing ---------------------------------------------------------

    def publish_layer_latency(
        self, gpu_id: str, layer: int, value: float, now: float
    ) -> None:
        if value < 0 or not math.isfinite(value):
            raise ValueError(f"latency must be finite and >= 0, got {value}")
        with self._lock:
            self._require(gpu_id)
            self._latency[(gpu_id, layer)] = PerfEntry(value, now, self.ttl_s)
            self._published_layers.setdefault(gpu_id, set()).add(layer)

    def publish_link_rtts(
        self, rtts: Mapping[Tuple[str, str], float], now: float
    ) -> None:
        """Batch-publish link RTTs; the table is swapped, never mutated."""
        if not rtts:
            return
        with self._lock:
            for (a, b), value in rtts.items():
                self._require(a)
                self._require(b)
                if value < 0 or not math.isfinite(value):
                    raise NegativeRtt((a, b), value)
            rebuilt = dict(self._rtts)
            for pair, value in rtts.items():
                rebuilt[pair] = PerfEntry(value, now, self.ttl_s)
            self._swap_rtts(rebuilt)

    def publish_link_rtt(self, a: str, b: str, value: float, now: float) -> None:
        self.publish_link_rtts({(a, b): value}, now)

    def publish_node_attrs(self, gpu_id: str, attrs: Mapping, now: float) -> None:
        with self._lock:
            self._require(gpu_id)
            self._attrs[gpu_id] = PerfEntry(dict(attrs), now, self.ttl_s)

    def _swap_rtts(self, rebuilt: Dict[Tuple[str, str], PerfEntry]) -> None:
        self._rtts = rebuilt
        self._rtt_version += 1
        self._rtt_oldest = min(
            (e.published_at for e in rebuilt.values()), default=math.inf
        )

    def sync_gpu_layers(self, gpu_id: str, layers: Iterable[int], now: float) -> None:
        """Make the GPU's published latency keys match ``layers`` exactly.

        Needs ``latency_fn``; used at placement time and after rebalances.
        """
        if self.latency_fn is None:
            raise ValueError("sync_gpu_layers requires a latency function")
        wanted = set(layers)
        with self._lock:
            self._require(gpu_id)
            current = self._published_layers.setdefault(gpu_id, set())
            occ = self._occupancy.get(gpu_id, 0)
            for layer in current - wanted:
                self._latency.pop((gpu_id, layer), None)
            for layer in sorted(wanted):
                self._latency[(gpu_id, layer)] = PerfEntry(
                    self.latency_fn(gpu_id, layer, occ), now, self.ttl_s
                )
            self._published_layers[gpu_id] = wanted

    # -- reading ------------------------------------------------------------

    def read(self, key: PerfKey, now: float):
        """Value for the key if a live entry exists, else None."""
        with self._lock:
            if isinstance(key, LayerLatencyKey):
                entry = self._latency.get((key.gpu_id, key.layer))
            elif isinstance(key, LinkRttKey):
                entry = self._rtts.get((key.a, key.b))
                if entry is None:
                    entry = self._rtts.get((key.b, key.a))
            elif isinstance(key, NodeAttrKey):
                entry = self._attrs.get(key.gpu_id)
            else:
                raise TypeError(f"not a perf key: {key!r}")
            if entry is None or entry.expired(now):
                return None
            return entry.value

    def layer_latency(self, gpu_id: str, layer: int, now: float) -> Optional[float]:
        return self.read(LayerLatencyKey(gpu_id, layer), now)

    def link_rtt(self, a: str, b: str, now: float) -> Optional[float]:
        return self.read(LinkRttKey(a, b), now)

    def node_attrs(self, gpu_id: str, now: float) -> Optional[Mapping]:
        return self.read(NodeAttrKey(gpu_id), now)

    def occupancy(self, gpu_id: str) -> int:
        return self._occupancy.get(gpu_id, 0)

    def hosted_layers(self, gpu_id: str) -> frozenset:
        return frozenset(self._published_layers.get(gpu_id, set()))

    def entries(self, now: float) -> List[Tuple[PerfKey, Union[float, Mapping], float]]:
        """All live entries as (key, value, age) rows in a stable order."""
        with self._lock:
            rows: List[Tuple[PerfKey, Union[float, Mapping], float]] = []
            for (gpu_id, layer) in sorted(self._latency):
                entry = self._latency[(gpu_id, layer)]
                if not entry.expired(now):
                    rows.append(
                        (LayerLatencyKey(gpu_id, layer), entry.value, entry.age_s(now))
                    )
            for (a, b) in sorted(self._rtts):
                entry = self._rtts[(a, b)]
                if not entry.expired(now):
                    rows.append((LinkRttKey(a, b), entry.value, entry.age_s(now)))
            for gpu_id in sorted(self._attrs):
                entry = self._attrs[gpu_id]
                if not entry.expired(now):
                    rows.append((NodeAttrKey(gpu_id), entry.value, entry.age_s(now)))
            return rows

    def snapshot(self, now: float) -> PerfSnapshot:
        with self._lock:
            latency_live = {
                key: entry.value
                for key, entry in self._latency.items()
                if not entry.expired(now)
            }
            attrs_live = {
                gpu: entry.value
                for gpu, entry in self._attrs.items()
                if not entry.expired(now)
            }
            return PerfSnapshot(
                now=now,
                layer_latencies=latency_live,  # type: ignore[arg-type]
                link_rtts=self._rtts,
                attrs=attrs_live,  # type: ignore[arg-type]
                rtt_version=self._rtt_version,
                rtt_oldest_publish=self._rtt_oldest,
            )

    # -- chain feedback -----------------------------------------------------

    def on_chain_event(self, chain, event: str, now: float) -> None:
        """Apply a chain select/release: bump occupancy, republish latencies.

        ``chain`` needs only a ``hops`` sequence of layer slices. Occupancy
        counts whole chains, so a GPU serving two hops of the same chain
        still moves by one.
        """
        if event == "select":
            delta = 1
        elif event == "release":
            delta = -1
        else:
            raise ValueError(f"chain event must be select or release, got {event!r}")
        gpu_ids: List[str] = []
        for hop in chain.hops:
            if hop.gpu_id not in gpu_ids:
                gpu_ids.append(hop.gpu_id)
        with self._lock:
            for gpu_id in gpu_ids:
                self._require(gpu_id)
                if self._occupancy.get(gpu_id, 0) + delta < 0:
                    raise OccupancyUnderflow(gpu_id)
            for gpu_id in gpu_ids:
                occ = self._occupancy.get(gpu_id, 0) + delta
                self._occupancy[gpu_id] = occ
                if self.latency_fn is not None:
                    for layer in sorted(self._published_layers.get(gpu_id, set())):
                        self._latency[(gpu_id, layer)] = PerfEntry(
                            self.latency_fn(gpu_id, layer, occ), now, self.ttl_s
                        )
