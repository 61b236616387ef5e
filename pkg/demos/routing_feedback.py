#!/usr/bin/env python3
"""Request routing under load: chains spread across replicas as queues build.

Two identical two-stage replicas serve a 6-layer model. The first request
takes the (nominally) cheapest chain; because routing feeds occupancy back
into the published per-layer latencies, the next requests see that chain as
busier and spill onto the other replica. Releasing everything drains the
occupancies, and the router's matrix cache shows how little rebuilding all
of this needed.
"""

from swarmsched import ChainRouter, PerfMap

LAYERS = 6


def main():
    # latency a router sees: 2 ms per hosted layer, scaled by queue depth
    perf_map = PerfMap(
        ttl_s=60.0, latency_fn=lambda gpu, layer, occ: 0.002 * (1 + occ)
    )
    for gpu, hosted in {
        "a-front": range(1, 4),
        "a-back": range(4, 7),
        "b-front": range(1, 4),
        "b-back": range(4, 7),
    }.items():
        perf_map.register_gpu(gpu)
        for layer in hosted:
            perf_map.publish_layer_latency(gpu, layer, 0.002, now=0.0)
    perf_map.publish_link_rtts(
        {
            ("a-front", "a-back"): 0.001,
            ("b-front", "b-back"): 0.001,
            ("a-front", "b-back"): 0.008,
            ("b-front", "a-back"): 0.008,
        },
        now=0.0,
    )

    router = ChainRouter(perf_map, LAYERS)
    live = []
    print("routing six requests back to back:")
    for i in range(6):
        chain = router.route(now=0.1 * i)
        live.append(chain)
        hops = " -> ".join(
            f"{h.gpu_id}[{h.start_layer}-{h.end_layer}]" for h in chain.hops
        )
        print(f"  request {i + 1}: {hops}  cost={chain.cost_s * 1000:.1f} ms")

    print("\nqueue depths while all six are in flight:")
    for gpu in ("a-front", "a-back", "b-front", "b-back"):
        print(f"  {gpu}: {perf_map.occupancy(gpu)}")

    for chain in live:
        router.release(chain, now=1.0)
    print("\nafter releasing everything:")
    for gpu in ("a-front", "a-back", "b-front", "b-back"):
        print(f"  {gpu}: {perf_map.occupancy(gpu)}")

    stats = router.stats
    print(f"\nrouter cache: {stats.matrix_rebuilds} rebuild(s),"
          f" {stats.matrix_reuses} reuse(s)"
          "\n(the RTT table never changed, so one matrix served every route)")


if __name__ == "__main__":
    main()
