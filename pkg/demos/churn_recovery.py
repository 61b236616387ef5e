#!/usr/bin/env python3
"""Membership churn: a sole layer host leaves, the pool heals, a card joins.

Three GPUs host a 10-layer model as one two-stage pipeline (capacities rule
out a second replica). When the first-stage GPU leaves, its layers lose
their only host; the trigger evaluation flips to a global rebalance, which
re-plans onto the survivors. A fresh card then joins and is handed the
slice around the current bottleneck layer. Along the way the perf map shows
exactly what routers would see: keys vanish the moment a GPU leaves.
"""

from swarmsched import (
    GpuNode,
    MembershipManager,
    ModelSpec,
    PerfMap,
    allocate,
)
from swarmsched.topology import ClusterSnapshot

MODEL = ModelSpec(
    name="demo-10l",
    layer_count=10,
    bytes_per_layer=1.0e9,
    flops_per_layer_per_token=2.0e10,
)


def gpu(gpu_id, capacity, ram_tokens):
    return GpuNode(
        id=gpu_id,
        region="lab",
        vram_bytes=capacity * MODEL.bytes_per_layer / 0.8,
        flops=1.0e14,
        reserve_fraction=0.2,
        ram_token_capacity=ram_tokens,
    )


def show_slices(manager, note):
    slices = ", ".join(
        f"{g}[{s.start_layer}-{s.end_layer}]"
        for g, s in sorted(manager.slices.items())
    )
    holes = manager.uncovered_layers()
    print(f"{note}: {slices or '(nothing serving)'}"
          + (f"  uncovered={list(holes)}" if holes else ""))


def main():
    gpus = [gpu("anchor", 9, 50_000), gpu("mid", 6, 20_000), gpu("small", 5, 30_000)]
    links = {(a.id, b.id): 0.001 for i, a in enumerate(gpus) for b in gpus[i + 1 :]}
    cluster = ClusterSnapshot(gpus=tuple(gpus), links=links)

    perf_map = PerfMap(ttl_s=4.5, latency_fn=lambda g, l, occ: 0.001 * (1 + occ))
    manager = MembershipManager(cluster, MODEL, perf_map)
    manager.initialize(allocate(cluster, MODEL), now=0.0)
    show_slices(manager, "t=0.0 initial plan")

    print("\nt=1.0 'anchor' leaves (sole host of its slice)")
    manager.on_leave("anchor", now=1.0)
    show_slices(manager, "  after leave")
    print(f"  anchor attrs still readable? "
          f"{perf_map.node_attrs('anchor', now=1.0) is not None}")

    decision = manager.evaluate_triggers()
    print(f"  trigger: scope={decision.scope} reason={decision.reason}")
    result = manager.global_rebalance(now=1.0)
    print(f"  rebalance changed: {sorted(result.changed_gpus)}"
          f" degraded={result.degraded}")
    show_slices(manager, "  after rebalance")

    print("\nt=2.0 a 4-layer card joins")
    bottleneck = manager.bottleneck_layer()
    joined = manager.on_join(gpu("fresh", 4, 1_000), now=2.0)
    print(f"  bottleneck layer was {bottleneck};"
          f" fresh got [{joined.start_layer}-{joined.end_layer}]")
    show_slices(manager, "  after join")

    decision = manager.evaluate_triggers()
    print(f"\nsteady state trigger: scope={decision.scope} reason={decision.reason}"
          f" (load CoV {decision.load_cov:.2f})")


if __name__ == "__main__":
    main()
