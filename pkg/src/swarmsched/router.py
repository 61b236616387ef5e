"""Per-request routing across replicated layer hosts.

Routing sees the cluster as a layered DAG: one column of nodes per model
layer (the GPUs currently advertising that layer), an edge between every
host of layer i and every host of layer i+1 weighted by the published link
RTT (zero when both layers sit on the same GPU), and a node cost equal to
the host's published per-token latency. A chain is a shortest path through
that DAG, found with one min-plus relaxation per layer. Host lists are kept
sorted and the relaxation takes the first argmin, so ties always resolve to
the lexicographically smallest GPU id and routing is deterministic.

The relaxation is vectorized: hosts are mapped into a dense RTT matrix once
per snapshot and each layer transition is a broadcasted add over the
relevant submatrix. ``ChainRouter`` additionally caches the matrix across
requests, reusing it while the RTT table version is unchanged and none of
its entries can have expired.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NoPath, UncoveredLayer
from .perfmap import PerfMap, PerfSnapshot
from .topology import LayerSlice

logger = logging.getLogger(__name__)

_EMPTY: FrozenSet[str] = frozenset()


@dataclass(frozen=True)
class PipelineChain:
    """One request's path: contiguous layer slices plus its decode-step cost."""

    hops: Tuple[LayerSlice, ...]
    cost_s: float

    @property
    def gpu_ids(self) -> Tuple[str, ...]:
        return tuple(hop.gpu_id for hop in self.hops)

    @property
    def layer_count(self) -> int:
        return self.hops[-1].end_layer if self.hops else 0

    @property
    def cross_gpu_edges(self) -> int:
        return sum(
            1
            for a, b in zip(self.hops, self.hops[1:])
            if a.gpu_id != b.gpu_id
        )


@dataclass(frozen=True)
class LayerDag:
    """Host columns for layers 1..layer_count plus their advertised latencies."""

    layer_count: int
    hosts: Tuple[Tuple[str, ...], ...]  # hosts[i] serves layer i+1, sorted
    latencies: Mapping[Tuple[str, int], float]

    @property
    def node_count(self) -> int:
        return sum(len(column) for column in self.hosts)

    def gpu_ids(self) -> Tuple[str, ...]:
        seen = sorted({gpu for column in self.hosts for gpu in column})
        return tuple(seen)


@dataclass
class RouteStats:
    dags_built: int = 0
    chains_selected: int = 0
    edges_relaxed: int = 0
    matrix_rebuilds: int = 0
    matrix_reuses: int = 0


def build_dag(
    snapshot: PerfSnapshot,
    layer_count: int,
    *,
    exclude: AbstractSet[str] = _EMPTY,
) -> LayerDag:
    """Arrange the snapshot's live latency keys into per-layer host columns.

    Raises UncoveredLayer for the first layer no live GPU advertises;
    ``exclude`` drops hosts (e.g. GPUs with no KV headroom) before coverage
    is checked.
    """
    if layer_count < 1:
        raise ValueError(f"layer_count must be >= 1, got {layer_count}")
    per_layer: Dict[int, List[str]] = defaultdict(list)
    for (gpu_id, layer), _ in snapshot.layer_latencies.items():
        if gpu_id not in exclude and 1 <= layer <= layer_count:
            per_layer[layer].append(gpu_id)
    columns = []
    for layer in range(1, layer_count + 1):
        hosts = per_layer.get(layer)
        if not hosts:
            raise UncoveredLayer(layer)
        columns.append(tuple(sorted(hosts)))
    return LayerDag(
        layer_count=layer_count,
        hosts=tuple(columns),
        latencies=snapshot.layer_latencies,
    )


def rtt_matrix(
    snapshot: PerfSnapshot, gpu_ids: Sequence[str]
) -> Tuple[np.ndarray, Dict[str, int]]:
    """Dense one-way RTT matrix over ``gpu_ids``.

    Unpublished pairs are +inf (no edge); the diagonal is 0 so staying on a
    GPU across a layer boundary is free. Symmetric fallback mirrors each
    published direction into the other unless that direction was published
    explicitly.
    """
    index = {gpu: i for i, gpu in enumerate(gpu_ids)}
    size = len(gpu_ids)
    matrix = np.full((size, size), np.inf)
    np.fill_diagonal(matrix, 0.0)
    mirrored: List[Tuple[int, int, float]] = []
    for a, b, value in snapshot.link_rtt_entries():
        ia = index.get(a)
        ib = index.get(b)
        if ia is None or ib is None or ia == ib:
            continue
        matrix[ia, ib] = value
        mirrored.append((ib, ia, value))
    for ib, ia, value in mirrored:
        if not np.isfinite(matrix[ib, ia]):
            matrix[ib, ia] = value
    return matrix, index


def count_dag_edges(dag: LayerDag, snapshot: PerfSnapshot) -> int:
    """Finite-weight edges between consecutive host columns."""
    matrix, index = rtt_matrix(snapshot, dag.gpu_ids())
    total = 0
    for prev_hosts, next_hosts in zip(dag.hosts, dag.hosts[1:]):
        rows = [index[g] for g in prev_hosts]
        cols = [index[g] for g in next_hosts]
        total += int(np.isfinite(matrix[np.ix_(rows, cols)]).sum())
    return total


def _relax(
    dag: LayerDag,
    matrix: np.ndarray,
    index: Mapping[str, int],
    stats: Optional[RouteStats],
) -> PipelineChain:
    first = dag.hosts[0]
    cost = np.array([dag.latencies[(gpu, 1)] for gpu in first])
    columns_idx = [np.array([index[g] for g in column]) for column in dag.hosts]
    back: List[np.ndarray] = []
    for layer in range(2, dag.layer_count + 1):
        column = dag.hosts[layer - 1]
        trans = matrix[np.ix_(columns_idx[layer - 2], columns_idx[layer - 1])]
        candidates = cost[:, None] + trans
        best_prev = np.argmin(candidates, axis=0)  # first min: smallest gpu id
        arrived = candidates[best_prev, np.arange(len(column))]
        node = np.array([dag.latencies[(gpu, layer)] for gpu in column])
        cost = arrived + node
        back.append(best_prev)
        if stats is not None:
            stats.edges_relaxed += int(np.isfinite(trans).sum())
    final = int(np.argmin(cost))
    total = float(cost[final])
    if not np.isfinite(total):
        raise NoPath()
    picks = [final]
    for best_prev in reversed(back):
        picks.append(int(best_prev[picks[-1]]))
    picks.reverse()
    assignment = [dag.hosts[i][picks[i]] for i in range(dag.layer_count)]

    hops: List[LayerSlice] = []
    start = 1
    for layer in range(2, dag.layer_count + 1):
        if assignment[layer - 1] != assignment[layer - 2]:
            hops.append(LayerSlice(assignment[layer - 2], start, layer - 1))
            start = layer
    hops.append(LayerSlice(assignment[-1], start, dag.layer_count))
    if stats is not None:
        stats.chains_selected += 1
    return PipelineChain(hops=tuple(hops), cost_s=total)


def select_chain(
    dag: LayerDag, snapshot: PerfSnapshot, stats: Optional[RouteStats] = None
) -> PipelineChain:
    """Cheapest chain through the DAG under the snapshot's RTTs."""
    matrix, index = rtt_matrix(snapshot, dag.gpu_ids())
    return _relax(dag, matrix, index, stats)


class ChainRouter:
    """Stateful router: snapshot, DAG, shortest chain, occupancy feedback.

    The RTT matrix is reused across requests while the perf map's RTT table
    is byte-identical (same version) and every entry in it was still live
    the last time it was indexed — entries all share one TTL, so that holds
    until ``oldest publish + ttl``. Any publish or expiry forces a rebuild.
    """

    def __init__(self, perf_map: PerfMap, layer_count: int):
        self.perf_map = perf_map
        self.layer_count = layer_count
        self.stats = RouteStats()
        self._cached_key: Optional[Tuple[int, Tuple[str, ...]]] = None
        self._cached_matrix: Optional[np.ndarray] = None
        self._cached_index: Dict[str, int] = {}
        self._cached_valid_until = -np.inf

    def _matrix_for(
        self, snapshot: PerfSnapshot, gpu_ids: Tuple[str, ...]
    ) -> Tuple[np.ndarray, Dict[str, int]]:
        key = (snapshot.rtt_version, gpu_ids)
        if (
            self._cached_matrix is not None
            and key == self._cached_key
            and snapshot.now <= self._cached_valid_until
        ):
            self.stats.matrix_reuses += 1
            return self._cached_matrix, self._cached_index
        matrix, index = rtt_matrix(snapshot, gpu_ids)
        self._cached_key = key
        self._cached_matrix = matrix
        self._cached_index = index
        self._cached_valid_until = (
            snapshot.rtt_oldest_publish + self.perf_map.ttl_s
        )
        self.stats.matrix_rebuilds += 1
        return matrix, index

    def route(
        self, now: float, *, exclude: AbstractSet[str] = _EMPTY
    ) -> PipelineChain:
        """Select a chain and mark it live on the perf map."""
        snapshot = self.perf_map.snapshot(now)
        dag = build_dag(snapshot, self.layer_count, exclude=exclude)
        self.stats.dags_built += 1
        matrix, index = self._matrix_for(snapshot, dag.gpu_ids())
        chain = _relax(dag, matrix, index, self.stats)
        self.perf_map.on_chain_event(chain, "select", now)
        return chain

    def release(self, chain: PipelineChain, now: float) -> None:
        self.perf_map.on_chain_event(chain, "release", now)


def route_request(perf_map: PerfMap, layer_count: int, now: float) -> PipelineChain:
    """One-shot convenience: snapshot, route, apply select feedback."""
    snapshot = perf_map.snapshot(now)
    dag = build_dag(snapshot, layer_count)
    chain = select_chain(dag, snapshot)
    perf_map.on_chain_event(chain, "select", now)
    return chain


def release_request(perf_map: PerfMap, chain: PipelineChain, now: float) -> None:
    perf_map.on_chain_event(chain, "release", now)
