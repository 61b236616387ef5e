"""Command-line front end.

Subcommands mirror the library's phases: ``allocate`` plans placements,
``route`` walks sample requests through a published map, ``simulate``
replays a trace, ``bench`` times the planner and router on synthetic
pools, ``dump-perf`` prints the live perf-map entries for a placement, and
``gen-trace`` writes arrival traces.

Exit codes: 0 on success, 2 for invalid input (unreadable or malformed
files, bad flag values, inconsistent clusters), 3 when the input was valid
but no feasible result exists (no pipeline fits, a layer has no host, no
route survives).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional, Tuple

from .allocator import allocate
from .bench import DEFAULT_SIZES, run_bench, save_report
from .config import resolve_config
from .errors import (
    DegenerateObjective,
    InfeasibleCapacity,
    NoFeasiblePipeline,
    NoPath,
    RoundingOverflow,
    SchedulerError,
    UncoveredLayer,
    ZeroCapacityGpu,
)
from .membership import MembershipManager, load_events
from .perfmap import LayerLatencyKey, LinkRttKey, NodeAttrKey, PerfMap
from .plan import AllocationPlan, load_plan, plan_to_dict, save_plan
from .router import ChainRouter, PipelineChain
from .sim import (
    LatencyModel,
    baseline_plan,
    generate_trace,
    load_trace,
    run_simulation,
    save_trace,
)
from .topology import ClusterSnapshot, ModelSpec, load_cluster, load_model

_INFEASIBLE = (
    NoFeasiblePipeline,
    InfeasibleCapacity,
    DegenerateObjective,
    UncoveredLayer,
    NoPath,
    RoundingOverflow,
    ZeroCapacityGpu,
)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_inputs(args) -> Tuple[ClusterSnapshot, ModelSpec]:
    return load_cluster(args.cluster), load_model(args.model)


def _resolve_plan(args, cluster, model, config) -> AllocationPlan:
    if getattr(args, "baseline", False):
        if getattr(args, "plan", None):
            raise ValueError("--plan and --baseline are mutually exclusive")
        return baseline_plan(cluster, model)
    if getattr(args, "plan", None):
        return load_plan(args.plan)
    return allocate(
        cluster,
        model,
        alpha=config.alpha,
        mean_tokens_per_request=config.mean_tokens_per_request,
    )


def _bootstrap_map(cluster, model, plan, config) -> Tuple[PerfMap, MembershipManager]:
    """Perf map as it looks right after the placement goes live at t=0."""
    perf_map = PerfMap(ttl_s=config.ttl_s)
    manager = MembershipManager(
        cluster,
        model,
        perf_map,
        mix_alpha=config.mix_alpha,
        cov_threshold=config.cov_threshold,
        alpha=config.alpha,
        mean_tokens_per_request=config.mean_tokens_per_request,
    )
    latency = LatencyModel(model, manager, config.contention_exponent)
    perf_map.latency_fn = latency.published
    manager.initialize(plan, 0.0)
    return perf_map, manager


def _hop_text(hop) -> str:
    return f"{hop.gpu_id}[{hop.start_layer}-{hop.end_layer}]"


def _chain_to_dict(chain: PipelineChain) -> dict:
    return {
        "hops": [
            {
                "gpu_id": hop.gpu_id,
                "start_layer": hop.start_layer,
                "end_layer": hop.end_layer,
            }
            for hop in chain.hops
        ],
        "cost_s": chain.cost_s,
    }


# -- subcommands ---------------------------------------------------------------


def _cmd_allocate(args) -> int:
    config = resolve_config(args.config, alpha=args.alpha)
    cluster, model = _load_inputs(args)
    plan = allocate(
        cluster,
        model,
        alpha=config.alpha,
        mean_tokens_per_request=config.mean_tokens_per_request,
    )
    if args.out:
        save_plan(plan, args.out)
    if args.json:
        _print_json(plan_to_dict(plan))
        return 0
    print(f"replicas  : {plan.replication_count}")
    print(f"stages    : {plan.stage_total}")
    print(f"objective : {plan.objective_score:.4f}")
    for i, pipeline in enumerate(plan.pipelines, 1):
        hops = " ".join(_hop_text(s) for s in pipeline.stages)
        region = pipeline.region or "-"
        print(f"pipeline {i} ({region}): {hops}")
    for entry in plan.per_k_table:
        print(
            f"per-k {entry.region}: k={entry.k} stages={entry.s_star}"
            f" score={entry.z:.4f}"
        )
    return 0


def _cmd_route(args) -> int:
    config = resolve_config(args.config)
    cluster, model = _load_inputs(args)
    plan = _resolve_plan(args, cluster, model, config)
    perf_map, _ = _bootstrap_map(cluster, model, plan, config)
    router = ChainRouter(perf_map, model.layer_count)
    # selects stay applied between requests, so repeated routes spread load
    chains = [router.route(0.0) for _ in range(args.requests)]
    if args.json:
        _print_json({"chains": [_chain_to_dict(c) for c in chains]})
        return 0
    for i, chain in enumerate(chains, 1):
        hops = " -> ".join(_hop_text(h) for h in chain.hops)
        print(f"request {i}: {hops}  step_cost={chain.cost_s * 1000:.3f} ms")
    return 0


def _cmd_simulate(args) -> int:
    config = resolve_config(
        args.config, seed=args.seed, amortize_rtt=args.amortize_rtt
    )
    cluster, model = _load_inputs(args)
    plan = _resolve_plan(args, cluster, model, config)
    trace = load_trace(args.trace)
    events = load_events(args.events) if args.events else []
    metrics = run_simulation(
        cluster,
        model,
        plan,
        trace,
        membership_events=events,
        publish_interval_s=config.publish_interval_s,
        ttl_multiplier=config.ttl_multiplier,
        contention_exponent=config.contention_exponent,
        amortize_rtt=config.amortize_rtt,
        mix_alpha=config.mix_alpha,
        cov_threshold=config.cov_threshold,
        alpha=config.alpha,
        mean_tokens_per_request=config.mean_tokens_per_request,
    )
    payload = metrics.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.json:
        _print_json(payload)
        return 0
    print(f"submitted  : {metrics.submitted}")
    print(f"completed  : {metrics.completed}")
    print(f"unserved   : {metrics.unserved}")
    print(f"aborted    : {metrics.aborted}")
    print(f"duration   : {metrics.duration_s:.3f} s")
    print(f"throughput : {metrics.throughput_rps:.3f} req/s")
    print(
        "latency    : mean"
        f" {metrics.latency_mean_s:.3f}s p50 {metrics.latency_p50_s:.3f}s"
        f" p95 {metrics.latency_p95_s:.3f}s p99 {metrics.latency_p99_s:.3f}s"
    )
    print(f"queue peak : {metrics.queue_peak}")
    return 0


def _cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else DEFAULT_SIZES
    report = run_bench(sizes, seed=args.seed or 0, routings=args.routings)
    if args.out:
        save_report(report, args.out)
    if args.json:
        _print_json(report.to_dict())
        return 0
    print(
        f"{'gpus':>5} {'regions':>7} {'k':>3} {'allocate_ms':>12}"
        f" {'route_ms':>9} {'nodes':>6} {'edges':>8} {'~L*R^2':>9}"
    )
    for row in report.rows:
        print(
            f"{row.gpu_count:>5} {row.region_count:>7} {row.replication_count:>3}"
            f" {row.allocate_ms:>12.2f} {row.route_ms:>9.3f}"
            f" {row.dag_nodes:>6} {row.dag_edges:>8} {row.predicted_edges:>9.0f}"
        )
    return 0


def _cmd_dump_perf(args) -> int:
    config = resolve_config(args.config)
    cluster, model = _load_inputs(args)
    plan = _resolve_plan(args, cluster, model, config)
    perf_map, _ = _bootstrap_map(cluster, model, plan, config)
    rows = perf_map.entries(args.at)
    if args.json:
        payload = []
        for key, value, age_s in rows:
            if isinstance(key, LayerLatencyKey):
                entry = {"kind": "layer_latency", "gpu_id": key.gpu_id, "layer": key.layer}
            elif isinstance(key, LinkRttKey):
                entry = {"kind": "link_rtt", "from": key.a, "to": key.b}
            else:
                assert isinstance(key, NodeAttrKey)
                entry = {"kind": "node_attr", "gpu_id": key.gpu_id}
            entry["value"] = value
            entry["age_s"] = age_s
            payload.append(entry)
        _print_json(payload)
        return 0
    for key, value, age_s in rows:
        if isinstance(key, LayerLatencyKey):
            print(
                f"layer_latency {key.gpu_id} layer={key.layer}"
                f" {value:.6f}s age={age_s:.1f}s"
            )
        elif isinstance(key, LinkRttKey):
            print(f"link_rtt {key.a} -> {key.b} {value:.6f}s age={age_s:.1f}s")
        else:
            assert isinstance(key, NodeAttrKey)
            print(f"node_attr {key.gpu_id} {json.dumps(value, sort_keys=True)} age={age_s:.1f}s")
    return 0


def _cmd_gen_trace(args) -> int:
    config = resolve_config(args.config, seed=args.seed)
    requests = generate_trace(
        args.rate,
        args.duration,
        seed=config.seed,
        prompt_tokens=(args.prompt_min, args.prompt_max),
        output_tokens=(args.output_min, args.output_max),
    )
    save_trace(requests, args.out)
    print(f"wrote {len(requests)} requests to {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_common(sub, *, cluster=True, model=True) -> None:
    sub.add_argument("--config", help="TOML settings file")
    if cluster:
        sub.add_argument("--cluster", required=True, help="cluster JSON file")
    if model:
        sub.add_argument("--model", required=True, help="model JSON file")
    sub.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmsched",
        description="Two-phase placement and routing for pipelined decoding pools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info logging")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("allocate", help="plan layer placement")
    _add_common(sub)
    sub.add_argument("--alpha", type=float, help="replication-vs-latency exponent")
    sub.add_argument("--out", help="write the plan JSON here")
    sub.set_defaults(handler=_cmd_allocate)

    sub = commands.add_parser("route", help="route sample requests through a plan")
    _add_common(sub)
    sub.add_argument("--plan", help="plan JSON (default: allocate on the fly)")
    sub.add_argument("--requests", type=int, default=1, help="chains to select")
    sub.set_defaults(handler=_cmd_route)

    sub = commands.add_parser("simulate", help="replay a trace against a plan")
    _add_common(sub)
    sub.add_argument("--trace", required=True, help="request trace JSONL")
    sub.add_argument("--plan", help="plan JSON (default: allocate on the fly)")
    sub.add_argument(
        "--baseline", action="store_true", help="use the naive first-fit placement"
    )
    sub.add_argument("--events", help="membership events JSONL")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument(
        "--amortize-rtt",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="hide per-step link RTTs in stream overlap",
    )
    sub.add_argument("--out", help="write metrics JSON here")
    sub.set_defaults(handler=_cmd_simulate)

    sub = commands.add_parser("bench", help="time planner and router on synthetic pools")
    sub.add_argument("--config", help="TOML settings file")
    sub.add_argument("--json", action="store_true", help="machine-readable output")
    sub.add_argument("--sizes", help="comma-separated pool sizes")
    sub.add_argument("--routings", type=int, default=1000, help="routes per pool")
    sub.add_argument("--seed", type=int, help="synthetic pool seed")
    sub.add_argument("--out", help="write the report JSON here")
    sub.set_defaults(handler=_cmd_bench)

    sub = commands.add_parser("dump-perf", help="print live perf-map entries")
    _add_common(sub)
    sub.add_argument("--plan", help="plan JSON (default: allocate on the fly)")
    sub.add_argument(
        "--at", type=float, default=0.0, help="read time in seconds since publish"
    )
    sub.set_defaults(handler=_cmd_dump_perf)

    sub = commands.add_parser("gen-trace", help="write a Poisson arrival trace")
    sub.add_argument("--config", help="TOML settings file")
    sub.add_argument("--rate", type=float, required=True, help="requests per second")
    sub.add_argument("--duration", type=float, required=True, help="trace length (s)")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--prompt-min", type=int, default=32)
    sub.add_argument("--prompt-max", type=int, default=256)
    sub.add_argument("--output-min", type=int, default=16)
    sub.add_argument("--output-max", type=int, default=128)
    sub.add_argument("--out", required=True, help="trace JSONL path")
    sub.set_defaults(handler=_cmd_gen_trace)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(
            level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )
    try:
        return args.handler(args)
    except _INFEASIBLE as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SchedulerError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
