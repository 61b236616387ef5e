"""Water-filling layer rebalance within a single pipeline.

Given the GPUs of one pipeline, layers are spread proportionally to compute
rate and clipped at per-GPU capacity: each GPU targets x_i = min(c_i, level *
F_i) where the water level is solved so the targets sum to the layer count.
Largest-remainder rounding then turns the fractional targets into whole
layers without breaking the capacity bounds or the total.

The rebalance never reorders GPUs; only the slice boundaries move. Running it
twice is a no-op because the result depends only on (GPU sequence,
capacities, compute rates, layer count).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from .errors import InfeasibleCapacity, RoundingOverflow, ZeroCapacityGpu
from .plan import Pipeline
from .topology import ClusterSnapshot, GpuNode, LayerSlice, ModelSpec, layer_capacity

logger = logging.getLogger(__name__)

# Relative residual at which the bisection is considered converged.
_RESIDUAL_SCALE = 1e-9
_MAX_BISECTIONS = 200


@dataclass(frozen=True)
class FractionalAllocation:
    """Per-GPU fractional layer targets plus the solved water level."""

    targets: tuple[float, ...]
    water_level: float


@dataclass(frozen=True)
class IntegerAllocation:
    """Whole-layer counts per GPU; sums to the pipeline's layer count."""

    layers: tuple[int, ...]


def solve_lambda(
    flops: Sequence[float], capacities: Sequence[int], layer_count: int
) -> FractionalAllocation:
    """Solve for the water level where sum(min(c_i, level * F_i)) == layer_count.

    The fill function is continuous and non-decreasing in the level, so a
    plain bisection on [0, layer_count / min(F) + 1] always brackets the
    solution; iteration stops once the residual is within 1e-9 of the layer
    count (relative).
    """
    if len(flops) != len(capacities) or not flops:
        raise ValueError("flops and capacities must be equal-length and non-empty")
    if any(f <= 0 for f in flops):
        raise ValueError("flops must be positive")
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    total_cap = sum(capacities)
    if total_cap < layer_count:
        raise InfeasibleCapacity(total_cap, layer_count)

    def filled(level: float) -> float:
        return sum(min(c, level * f) for c, f in zip(capacities, flops))

    lo = 0.0
    hi = layer_count / min(flops) + 1.0
    tol = _RESIDUAL_SCALE * layer_count
    for _ in range(_MAX_BISECTIONS):
        if abs(filled(hi) - layer_count) <= tol:
            break
        mid = 0.5 * (lo + hi)
        if filled(mid) >= layer_count:
            hi = mid
        else:
            lo = mid
    level = hi
    residual = filled(level) - layer_count
    if abs(residual) > 2.0 * tol:
        # Loose backstop; the bracket halves 200 times so this is unreachable
        # for finite inputs.
        raise RoundingOverflow(f"bisection residual {residual} did not converge")
    targets = tuple(min(c, level * f) for c, f in zip(capacities, flops))
    return FractionalAllocation(targets=targets, water_level=level)


def hamilton_round(
    frac: FractionalAllocation,
    capacities: Sequence[int],
    total: int | None = None,
) -> IntegerAllocation:
    """Largest-remainder rounding of fractional targets under capacity caps.

    Floors every target, then hands the leftover layers one each to the
    largest fractional remainders (ties to the lower index), skipping entries
    already at capacity. Any layers still left after that spill to the first
    entries with spare capacity in index order; that branch only fires when
    the fractional sum was perturbed by bisection tolerance.
    """
    targets = frac.targets
    if len(targets) != len(capacities):
        raise ValueError("targets and capacities must be equal-length")
    if total is None:
        total = round(sum(targets))
    floors = [min(math.floor(t), c) for t, c in zip(targets, capacities)]
    leftover = total - sum(floors)
    if leftover < 0:
        raise RoundingOverflow(f"floored targets already exceed total {total}")
    by_remainder = sorted(
        range(len(targets)), key=lambda i: (-(targets[i] - floors[i]), i)
    )
    for i in by_remainder:
        if leftover == 0:
            break
        if floors[i] < capacities[i]:
            floors[i] += 1
            leftover -= 1
    for i in range(len(floors)):
        while leftover > 0 and floors[i] < capacities[i]:
            floors[i] += 1
            leftover -= 1
    if leftover > 0:
        raise RoundingOverflow(f"{leftover} layers do not fit under the capacity caps")
    return IntegerAllocation(layers=tuple(floors))


GpuLookup = Union[ClusterSnapshot, Mapping[str, GpuNode], Iterable[GpuNode]]


def _as_gpu_map(gpus: GpuLookup) -> Mapping[str, GpuNode]:
    if isinstance(gpus, ClusterSnapshot):
        return {g.id: g for g in gpus.gpus}
    if isinstance(gpus, Mapping):
        return gpus
    return {g.id: g for g in gpus}


def rebalance_pipeline(
    pipeline: Pipeline, gpus: GpuLookup, model: ModelSpec
) -> Pipeline:
    """Recompute slice boundaries for one pipeline, keeping its GPU order.

    Each stage must end up with at least one layer (a slice cannot be empty),
    so a zero from the rounder is promoted to one layer taken from the
    currently largest stage. Zeros only occur when the pipeline carries more
    capacity than it strictly needs; the allocator's pipelines never do.
    """
    by_id = _as_gpu_map(gpus)
    nodes = [by_id[s.gpu_id] for s in pipeline.stages]
    caps = [layer_capacity(n, model) for n in nodes]
    for node, cap in zip(nodes, caps):
        if cap < 1:
            raise ZeroCapacityGpu(node.id)
    rates = [n.flops for n in nodes]
    layer_count = model.layer_count
    frac = solve_lambda(rates, caps, layer_count)
    counts = list(hamilton_round(frac, caps, layer_count).layers)

    while 0 in counts:
        needy = counts.index(0)
        donor = max(range(len(counts)), key=lambda i: (counts[i], -i))
        if counts[donor] < 2:
            raise RoundingOverflow(
                f"pipeline of {len(counts)} stages cannot split {layer_count} layers"
            )
        counts[donor] -= 1
        counts[needy] += 1
        logger.debug(
            "promoted zero-layer stage %s by taking a layer from %s",
            nodes[needy].id,
            nodes[donor].id,
        )

    slices = []
    cursor = 1
    for node, n_layers in zip(nodes, counts):
        slices.append(LayerSlice(node.id, cursor, cursor + n_layers - 1))
        cursor += n_layers
    return Pipeline(stages=tuple(slices), region=pipeline.region)
