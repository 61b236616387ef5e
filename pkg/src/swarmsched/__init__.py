"""Two-phase scheduling for decentralized pipelined decoding pools.

Phase one places model layers onto heterogeneous GPUs — replicated
pipelines per region, sized by a stage-count search and balanced by a
water-fill split. Phase two routes each request through the replicas as a
shortest chain over the published latency/RTT map. A deterministic
event simulator and a synthetic scaling benchmark sit on top.
"""

from .allocator import (
    ObjectiveParams,
    StageSolution,
    SweepStats,
    allocate,
    estimate_objective_params,
    k_max,
    min_stages,
    score,
    solve_stage_counts,
)
from .bench import BenchReport, BenchRow, run_bench, synthetic_cluster
from .config import RunConfig, load_config, resolve_config, save_config
from .errors import (
    DegenerateObjective,
    DuplicateGpuId,
    EmptySample,
    InfeasibleCapacity,
    InvalidCluster,
    NegativeRtt,
    NoFeasiblePipeline,
    NoPath,
    OccupancyUnderflow,
    RoundingOverflow,
    SchedulerError,
    UncoveredLayer,
    UnknownGpu,
    UnknownRegion,
    ZeroCapacityGpu,
)
from .membership import (
    MembershipEvent,
    MembershipManager,
    RebalanceDecision,
    RebalanceResult,
    load_events,
    save_events,
)
from .perfmap import (
    LayerLatencyKey,
    LayerLoad,
    LinkRttKey,
    NodeAttrKey,
    PerfMap,
    PerfSnapshot,
    layer_load,
    layer_load_cov,
)
from .plan import (
    AllocationPlan,
    PerKEntry,
    Pipeline,
    PlanViolation,
    load_plan,
    plan_from_dict,
    plan_to_dict,
    save_plan,
    validate_plan,
)
from .router import (
    ChainRouter,
    LayerDag,
    PipelineChain,
    build_dag,
    count_dag_edges,
    release_request,
    route_request,
    select_chain,
)
from .sim import (
    LatencyModel,
    MetricsReport,
    Request,
    baseline_plan,
    generate_trace,
    load_trace,
    percentile,
    run_simulation,
    save_trace,
)
from .topology import (
    ClusterSnapshot,
    GpuNode,
    LayerSlice,
    ModelSpec,
    layer_capacity,
    load_cluster,
    load_model,
    save_cluster,
    save_model,
    total_capacity,
    validate_snapshot,
)
from .waterfill import (
    FractionalAllocation,
    IntegerAllocation,
    hamilton_round,
    rebalance_pipeline,
    solve_lambda,
)

__version__ = "0.1.0"
