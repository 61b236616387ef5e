"""Shared builders for tests: GPUs sized by layer capacity, linked clusters."""

from __future__ import annotations

from typing import Dict, Iterable, Sequence, Tuple

from swarmsched.topology import ClusterSnapshot, GpuNode, ModelSpec

TEST_MODEL = ModelSpec(
    name="test-10l",
    layer_count=10,
    bytes_per_layer=1.0e9,
    flops_per_layer_per_token=2.0e10,
)


def gpu_with_capacity(
    gpu_id: str,
    capacity: int,
    *,
    region: str = "east",
    flops: float = 1.0e14,
    model: ModelSpec = TEST_MODEL,
    reserve_fraction: float = 0.2,
    ram_token_capacity: int = 100_000,
) -> GpuNode:
    """GPU whose VRAM holds exactly ``capacity`` layers of ``model``."""
    vram = capacity * model.bytes_per_layer / (1.0 - reserve_fraction)
    return GpuNode(
        id=gpu_id,
        region=region,
        vram_bytes=vram,
        flops=flops,
        reserve_fraction=reserve_fraction,
        ram_token_capacity=ram_token_capacity,
    )


def full_mesh(ids: Sequence[str], rtt_s: float = 0.001) -> Dict[Tuple[str, str], float]:
    return {
        (a, b): rtt_s for i, a in enumerate(ids) for b in ids[i + 1 :]
    }


def linked_cluster(
    gpus: Iterable[GpuNode],
    *,
    intra_rtt_s: float = 0.001,
    cross_rtt_s: float = 0.010,
) -> ClusterSnapshot:
    """Full mesh: explicit intra-region links, default RTT across regions."""
    gpus = tuple(gpus)
    links = {}
    for i, a in enumerate(gpus):
        for b in gpus[i + 1 :]:
            if a.region == b.region:
                links[(a.id, b.id)] = intra_rtt_s
    return ClusterSnapshot(
        gpus=gpus, links=links, default_cross_region_rtt_s=cross_rtt_s
    )


DESK_MODEL = ModelSpec(
    name="desk-24l",
    layer_count=24,
    bytes_per_layer=1.2e9,
    flops_per_layer_per_token=2.8e10,
)

_STRONG_FLOPS = 2.0e14
_WEAK_FLOPS = 8.0e13  # 2.5x slower per layer


def desk_cluster(ram_token_capacity: int = 400) -> ClusterSnapshot:
    """Fixed 7-GPU two-region pool: 5 strong + 2 weak, 10 ms across regions.

    Region east holds four strong GPUs (12 layers each) that pair cleanly
    into two replicas; region west holds the fifth strong GPU (16 layers)
    and both weak ones. A capacity-sorted first-fit walks the list as
    [w-big, e-1..e-4, w-s1, w-s2] and therefore stitches {w-big, e-1} and
    {e-4, w-s1, w-s2} across the 10 ms boundary, while the regional planner
    never pays that hop.
    """
    gpus = [
        gpu_with_capacity(
            f"e-{i}",
            12,
            region="east",
            flops=_STRONG_FLOPS,
            model=DESK_MODEL,
            ram_token_capacity=ram_token_capacity,
        )
        for i in range(1, 5)
    ]
    gpus.append(
        gpu_with_capacity(
            "w-big",
            16,
            region="west",
            flops=_STRONG_FLOPS,
            model=DESK_MODEL,
            ram_token_capacity=ram_token_capacity,
        )
    )
    gpus.extend(
        gpu_with_capacity(
            f"w-s{i}",
            10,
            region="west",
            flops=_WEAK_FLOPS,
            model=DESK_MODEL,
            ram_token_capacity=ram_token_capacity,
        )
        for i in (1, 2)
    )
    return linked_cluster(gpus, intra_rtt_s=0.001, cross_rtt_s=0.010)
