"""Phase-1 planner: how many pipelines to run and which GPUs form each one.

The search works per region. For every candidate replication count k it finds
the minimum total number of stages s*(k) via a dynamic program over
(capacity-sorted GPU prefix, open-pipeline residual multiset, completed
count), then picks the k maximizing

    score(k) = k^alpha / (t_comp + (s*(k) / k) * rtt)

i.e. replication wins until the per-pipeline hop overhead eats the gain.

Two exact reductions keep the DP fast; both follow from a capacity exchange
argument (swapping any used GPU for an unused one with equal or larger
capacity keeps every pipeline's capacity sum over the threshold):

  * zero-capacity GPUs never appear in an optimal assignment, so they are
    dropped before the sweep;
  * with capacities sorted non-increasing, some optimal assignment for every
    k uses a prefix of the sorted list; the sweep therefore assigns every
    GPU it consumes (skipping never improves the optimum) and the stage
    total of any state equals its prefix length.

Within a level, states are canonicalized to sorted residual tuples and a
state is pruned when another state at the same (completed, open) counts needs
pointwise no more layers. The pruned sweep is checked against an unpruned
reference and an exhaustive partition oracle in the test suite.

Grouping GPUs so every pipeline clears the layer threshold is a set-covering
problem, so the exact sweep's frontier can grow combinatorially; past
_EXACT_SWEEP_LIMIT GPUs the solver switches to a constructive mode: seed k
groups with the k largest capacities, best-fit the rest, repair by
moves/swaps, and widen the candidate prefix until every group closes. Stage
counts from that mode are feasible witnesses (and provably optimal whenever
they meet the capacity lower bound ceil(k*L / largest caps), which uniform
pools almost always do); they are no longer guaranteed minimal in adversarial
corners. Every correctness-vs-oracle test stays under the exact limit.
"""

from __future__ import annotations

import logging
from bisect import bisect_left
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import DegenerateObjective, NoFeasiblePipeline
from .plan import AllocationPlan, PerKEntry, Pipeline
from .topology import ClusterSnapshot, GpuNode, LayerSlice, ModelSpec, layer_capacity
from .waterfill import rebalance_pipeline

logger = logging.getLogger(__name__)

# Largest pool the exact sweep handles; bigger pools go constructive.
_EXACT_SWEEP_LIMIT = 16

Action = Tuple  # ("start",) | ("extend", slot_index)
State = Tuple[Tuple[int, ...], int]  # (sorted open residuals, completed count)
ParentTable = Dict[State, Tuple[State, Action]]


@dataclass(frozen=True)
class ObjectiveParams:
    """Fixed inputs to the replication score."""

    alpha: float = 1.0
    t_comp_seconds: float = 0.0
    rtt_seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.t_comp_seconds < 0 or self.rtt_seconds < 0:
            raise ValueError("objective times must be >= 0")


@dataclass(frozen=True)
class StageSolution:
    """Minimum stage count for one k plus the GPU groups that achieve it.

    ``groups`` holds indices into the capacity list, in assignment order.
    """

    stages: int
    groups: Tuple[Tuple[int, ...], ...]


@dataclass
class SweepStats:
    """Instrumentation for the DP sweep (used by tests and bench)."""

    levels: int = 0
    states_expanded: int = 0
    peak_frontier: int = 0
    pruned_dominated: int = 0


def k_max(capacities: Sequence[int], layer_count: int) -> int:
    """Upper bound on replication: GPU count and total capacity both limit it."""
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    return min(len(capacities), sum(capacities) // layer_count)


def score(k: int, s_star: int, params: ObjectiveParams) -> float:
    """Replication score for running k pipelines at s_star total stages."""
    if k < 1 or s_star < k:
        raise ValueError(f"need k >= 1 and s_star >= k, got k={k} s_star={s_star}")
    denom = params.t_comp_seconds + (s_star / k) * params.rtt_seconds
    if denom <= 0.0:
        raise DegenerateObjective("both t_comp and rtt are zero; the score is undefined")
    return k**params.alpha / denom


def _prune_dominated(residual_lists: List[Tuple[int, ...]]) -> List[Tuple[int, ...]]:
    """Keep the pointwise-minimal residual tuples (all inputs same length).

    Sorted lexicographically, a dominator always precedes anything it
    dominates, so one forward pass over the sorted list is exact.
    """
    residual_lists.sort()
    kept: List[Tuple[int, ...]] = []
    for res in residual_lists:
        dominated = False
        for other in kept:
            ok = True
            for b, a in zip(other, res):
                if b > a:
                    ok = False
                    break
            if ok:
                dominated = True
                break
        if not dominated:
            kept.append(res)
    return kept


def _sweep(
    caps: Tuple[int, ...],
    layer_count: int,
    max_replicas: int,
    stats: Optional[SweepStats] = None,
) -> Tuple[Dict[int, int], List[ParentTable]]:
    """Forward DP over capacity-sorted positive capacities.

    Returns (completion level per k, per-level parent tables). Level i holds
    states reachable after assigning every one of the first i GPUs, so the
    stage total of a state is its level and s*(k) is the first level where
    (no opens, k completed) appears.
    """
    n = len(caps)
    suffix = [0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + caps[i]

    root: State = ((), 0)
    levels: List[ParentTable] = [{root: (((), -1), ())}]
    frontier: ParentTable = levels[0]
    found: Dict[int, int] = {}

    for i in range(n):
        cap = caps[i]
        remaining = n - (i + 1)
        nxt: ParentTable = {}
        for state in sorted(frontier.keys()):
            residuals, done = state
            m = len(residuals)
            if stats:
                stats.states_expanded += 1
            # Extend an open pipeline; equal residuals collapse to one branch.
            for slot in range(m):
                if slot > 0 and residuals[slot] == residuals[slot - 1]:
                    continue
                left = residuals[slot] - cap
                rest = residuals[:slot] + residuals[slot + 1 :]
                if left <= 0:
                    child: State = (rest, done + 1)
                else:
                    child = (tuple(sorted(rest + (left,))), done)
                if child not in nxt:
                    nxt[child] = (state, ("extend", slot))
            # Start a new pipeline with this GPU as its first stage.
            if done + m < max_replicas:
                left = layer_count - cap
                if left <= 0:
                    child = (residuals, done + 1)
                else:
                    child = (tuple(sorted(residuals + (left,))), done)
                if child not in nxt:
                    nxt[child] = (state, ("start",))

        # Feasibility: open pipelines must be closable by what is left.
        by_class: Dict[Tuple[int, int], List[Tuple[int, ...]]] = {}
        for state in nxt:
            residuals, done = state
            if len(residuals) > remaining:
                continue
            if sum(residuals) > suffix[i + 1]:
                continue
            by_class.setdefault((done, len(residuals)), []).append(residuals)

        # Dominance inside each (completed, open-count) class.
        pruned: ParentTable = {}
        for (done, _m), residual_lists in sorted(by_class.items()):
            before = len(residual_lists)
            kept = _prune_dominated(residual_lists)
            if stats:
                stats.pruned_dominated += before - len(kept)
            for res in kept:
                state = (res, done)
                pruned[state] = nxt[state]

        levels.append(pruned)
        frontier = pruned
        if stats:
            stats.levels = i + 1
            stats.peak_frontier = max(stats.peak_frontier, len(frontier))

        for residuals, done in frontier:
            if not residuals and done >= 1 and done not in found:
                found[done] = i + 1
        if len(found) == max_replicas or not frontier:
            break

    return found, levels


def _replay(
    levels: List[ParentTable],
    k: int,
    stage_level: int,
    caps: Tuple[int, ...],
    layer_count: int,
) -> Tuple[Tuple[int, ...], ...]:
    """Walk parents back from the completed state and rebuild the GPU groups."""
    actions: List[Action] = []
    state: State = ((), k)
    for lvl in range(stage_level, 0, -1):
        parent, action = levels[lvl][state]
        actions.append(action)
        state = parent
    actions.reverse()

    # Open groups mirror the canonical residual tuple: sorted by residual,
    # stable on ties, so each recorded slot index lands on the right group.
    open_groups: List[Tuple[int, List[int]]] = []
    closed: List[List[int]] = []
    for gpu_index, action in enumerate(actions):
        cap = caps[gpu_index]
        if action[0] == "start":
            residual = layer_count - cap
            members = [gpu_index]
        else:
            residual, members = open_groups.pop(action[1])
            members.append(gpu_index)
            residual -= cap
        if residual <= 0:
            closed.append(members)
        else:
            open_groups.append((residual, members))
            open_groups.sort(key=lambda rg: rg[0])
    if open_groups:
        raise AssertionError("replay ended with open pipelines")
    return tuple(tuple(g) for g in closed)


def _best_fit_groups(
    vals: Sequence[int], m: int, k: int, layer_count: int
) -> Optional[List[List[int]]]:
    """k covering groups from the m largest values, or None.

    Seeds each group with one of the k largest values, best-fits the rest
    into the fullest still-open group, then tries single-item moves and
    swaps before giving up. Groups hold indices into ``vals``; ties always
    resolve to the lowest index, so the result is deterministic.
    """
    sums = [vals[g] for g in range(k)]
    members = [[g] for g in range(k)]
    for i in range(k, m):
        best = -1
        for g in range(k):
            if sums[g] < layer_count and (best < 0 or sums[g] > sums[best]):
                best = g
        if best < 0:
            break  # every group already closed; the rest stay unused
        sums[best] += vals[i]
        members[best].append(i)

    for _ in range(4):
        open_groups = [g for g in range(k) if sums[g] < layer_count]
        if not open_groups:
            break
        changed = False
        for u in open_groups:
            if sums[u] >= layer_count:
                continue
            # move in an item a donor can spare; prefer the smallest that
            # closes this group, otherwise the largest available
            best_move = None
            best_key = None
            for g in range(k):
                if g == u:
                    continue
                for pos, item in enumerate(members[g]):
                    if len(members[g]) == 1 or sums[g] - vals[item] < layer_count:
                        continue
                    closes = sums[u] + vals[item] >= layer_count
                    key = (closes, vals[item] if not closes else -vals[item])
                    if best_key is None or key > best_key:
                        best_key = key
                        best_move = (g, pos)
            if best_move is not None:
                g, pos = best_move
                item = members[g].pop(pos)
                sums[g] -= vals[item]
                sums[u] += vals[item]
                members[u].append(item)
                changed = True
                continue
            # swap a small item of ours for a bigger one a donor can spare
            best_swap = None
            best_gain = 0
            for g in range(k):
                if g == u or sums[g] < layer_count:
                    continue
                for gp, b in enumerate(members[g]):
                    for up, a in enumerate(members[u]):
                        gain = vals[b] - vals[a]
                        if gain <= best_gain:
                            continue
                        if sums[g] - gain >= layer_count:
                            best_gain = gain
                            best_swap = (g, gp, up)
            if best_swap is not None:
                g, gp, up = best_swap
                members[g][gp], members[u][up] = members[u][up], members[g][gp]
                sums[g] -= best_gain
                sums[u] += best_gain
                changed = True
        if not changed:
            break

    if any(s < layer_count for s in sums):
        return None
    for g in range(k):  # minimal witness: shed whatever a group can spare
        for item in sorted(members[g], key=lambda i: vals[i]):
            if len(members[g]) > 1 and sums[g] - vals[item] >= layer_count:
                members[g].remove(item)
                sums[g] -= vals[item]
    return members


def _peel_groups(
    vals: Sequence[int], m: int, k: int, layer_count: int
) -> Optional[List[List[int]]]:
    """k covering groups by peeling off cheap covering subsets.

    A bitmask subset-sum pass over the unused values finds the smallest
    reachable sums at or above the threshold; peeling the cheapest wastes
    the least capacity, which rescues tight pools where best-fit stalls.
    When a peel strands the remaining groups, backtracking tries the next
    few targets under a fixed node budget, so the search stays bounded and
    deterministic. Sums past twice the threshold never matter (values are
    clamped, so a minimal cover overshoots by less than one threshold) and
    stay masked off. Branches whose leftover capacity cannot cover the
    groups still owed are cut before any mask work, and the last group
    skips the mask entirely: values run largest-first, so taking them in
    order is the fewest-item cover.

    The budget is tiered: narrow prefixes get a deep search (node cost is
    small there, and that band is the one the exact sweep can audit), wide
    ones a shallow one — on wide pools a findable cover falls out fast, and
    a fruitless search is the expensive way to learn nothing.
    """
    full = (1 << (2 * layer_count)) - 1
    budget = [300 if m <= 24 else 80]

    def peel(
        remaining: List[int], total: int, need: int
    ) -> Optional[List[List[int]]]:
        if need == 0:
            return []
        if budget[0] <= 0:
            return None
        budget[0] -= 1
        if total < need * layer_count or len(remaining) < need:
            return None
        if need == 1:
            picked = []
            short = layer_count
            for i in remaining:
                picked.append(i)
                short -= vals[i]
                if short <= 0:
                    return [picked]
            return None
        reach = [1]
        for i in remaining:
            reach.append(reach[-1] | (reach[-1] << vals[i]) & full)
        above = reach[-1] >> layer_count
        targets = []
        base = layer_count
        while above and len(targets) < 4:
            step = (above & -above).bit_length() - 1
            targets.append(base + step)
            above >>= step + 1
            base += step + 1
        for target in targets:
            group_sum = target
            picked = []
            for pos in range(len(remaining) - 1, -1, -1):
                if (reach[pos] >> target) & 1:
                    continue
                picked.append(remaining[pos])
                target -= vals[remaining[pos]]
            taken = set(picked)
            rest = [i for i in remaining if i not in taken]
            tail = peel(rest, total - group_sum, need - 1)
            if tail is not None:
                return [picked[::-1]] + tail
        return None

    return peel(list(range(m)), sum(vals[i] for i in range(m)), k)


def _cover_construct(
    caps: Tuple[int, ...], layer_count: int, max_replicas: int
) -> Dict[int, StageSolution]:
    """Feasible stage counts for pools too large for the exact sweep.

    Capacity above the threshold never helps a group, so values are clamped
    before grouping. For each k the candidate prefix starts at the capacity
    lower bound and widens until a constructor closes every group; a result
    equal to that bound is optimal, larger ones are feasible witnesses only.
    """
    n = len(caps)
    clamped = [min(c, layer_count) for c in caps]
    prefix = [0]
    for c in clamped:
        prefix.append(prefix[-1] + c)
    per_group_min = -(-layer_count // clamped[0])

    out: Dict[int, StageSolution] = {}
    for k in range(1, max_replicas + 1):
        target = k * layer_count
        if prefix[n] < target:
            break
        m0 = max(k * per_group_min, bisect_left(prefix, target))
        groups = None
        for m in range(m0, n + 1):
            groups = _best_fit_groups(clamped, m, k, layer_count)
            if groups is None:
                groups = _peel_groups(clamped, m, k, layer_count)
            if groups is not None:
                break
        if groups is None:
            logger.info("constructive grouping stalled at k=%d", k)
            break
        stages = sum(len(g) for g in groups)
        out[k] = StageSolution(
            stages=stages, groups=tuple(tuple(g) for g in groups)
        )
        if stages > m0:
            logger.debug(
                "k=%d grouped with %d stages, capacity bound was %d",
                k,
                stages,
                m0,
            )
    return out


def solve_stage_counts(
    capacities: Sequence[int],
    layer_count: int,
    max_replicas: int,
    stats: Optional[SweepStats] = None,
) -> Dict[int, StageSolution]:
    """Minimum stage totals (and one witness assignment) for every feasible k.

    ``capacities`` must be sorted non-increasing. Returned group entries are
    indices into ``capacities``; zero-capacity entries never appear in any
    group. Pools with more than _EXACT_SWEEP_LIMIT usable GPUs are solved
    constructively (see the module docstring); ``stats`` records nothing on
    that path.
    """
    caps = tuple(capacities)
    if any(caps[j] < caps[j + 1] for j in range(len(caps) - 1)):
        raise ValueError("capacities must be sorted non-increasing")
    if max_replicas < 1:
        return {}
    nonzero = tuple(c for c in caps if c > 0)
    if not nonzero:
        return {}
    if len(nonzero) > _EXACT_SWEEP_LIMIT:
        return _cover_construct(nonzero, layer_count, max_replicas)

    found, levels = _sweep(nonzero, layer_count, max_replicas, stats)
    out: Dict[int, StageSolution] = {}
    for k in sorted(found):
        level = found[k]
        groups = _replay(levels, k, level, nonzero, layer_count)
        out[k] = StageSolution(stages=level, groups=groups)
    return out


def min_stages(
    capacities: Sequence[int], layer_count: int, k: int
) -> Optional[StageSolution]:
    """s*(k) with one optimal assignment, or None when k pipelines cannot fit."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return solve_stage_counts(capacities, layer_count, k).get(k)


def estimate_objective_params(
    region_gpus: Sequence[GpuNode],
    cluster: ClusterSnapshot,
    model: ModelSpec,
    alpha: float,
    mean_tokens_per_request: float,
) -> ObjectiveParams:
    """Region-level objective inputs: harmonic-mean compute, mean pairwise RTT."""
    inv = sum(1.0 / g.flops for g in region_gpus)
    harmonic = len(region_gpus) / inv
    t_comp = (
        model.flops_per_layer_per_token
        * model.layer_count
        * mean_tokens_per_request
        / harmonic
    )
    rtts: List[float] = []
    for a in region_gpus:
        for b in region_gpus:
            if a.id != b.id:
                rtts.append(cluster.rtt_s(a.id, b.id))
    rtt = sum(rtts) / len(rtts) if rtts else 0.0
    return ObjectiveParams(alpha=alpha, t_comp_seconds=t_comp, rtt_seconds=rtt)


def allocate(
    cluster: ClusterSnapshot,
    model: ModelSpec,
    *,
    alpha: float = 1.0,
    params: Optional[ObjectiveParams] = None,
    mean_tokens_per_request: float = 128.0,
) -> AllocationPlan:
    """Build the full placement: per-region pipelines, water-filled slices.

    Pipelines never cross regions. Each region independently picks its own
    best replication count; regions that cannot host one full copy of the
    model contribute nothing. When ``params`` is given it overrides the
    per-region objective estimate for every region.
    """
    layer_count = model.layer_count
    pipelines: List[Pipeline] = []
    per_k: List[PerKEntry] = []
    objective_total = 0.0

    for region in sorted(cluster.regions):
        region_gpus = cluster.gpus_in_region(region)
        if not region_gpus:
            continue
        caps_by_gpu = [(layer_capacity(g, model), g) for g in region_gpus]
        cap_limit = k_max([c for c, _ in caps_by_gpu], layer_count)
        if cap_limit < 1:
            logger.info("region %s cannot host a full replica", region)
            continue
        caps_by_gpu.sort(key=lambda cg: (-cg[0], cg[1].id))
        ordered_caps = tuple(c for c, _ in caps_by_gpu)
        ordered_gpus = [g for _, g in caps_by_gpu]

        solutions = solve_stage_counts(ordered_caps, layer_count, cap_limit)
        if not solutions:
            logger.info("region %s has capacity but no feasible grouping", region)
            continue

        region_params = params or estimate_objective_params(
            region_gpus, cluster, model, alpha, mean_tokens_per_request
        )
        scored = {k: score(k, sol.stages, region_params) for k, sol in solutions.items()}
        best_k = max(scored, key=lambda k: (scored[k], k))
        for k in sorted(solutions):
            per_k.append(
                PerKEntry(region=region, k=k, s_star=solutions[k].stages, z=scored[k])
            )
        objective_total += scored[best_k]
        logger.info(
            "region %s: k=%d, %d stages, score %.4g",
            region,
            best_k,
            solutions[best_k].stages,
            scored[best_k],
        )

        gpu_map = {g.id: g for g in ordered_gpus}
        for group in solutions[best_k].groups:
            cursor = 1
            slices = []
            for idx in group:
                span = min(ordered_caps[idx], layer_count - cursor + 1)
                slices.append(LayerSlice(ordered_gpus[idx].id, cursor, cursor + span - 1))
                cursor += span
            draft = Pipeline(stages=tuple(slices), region=region)
            pipelines.append(rebalance_pipeline(draft, gpu_map, model))

    if not pipelines:
        raise NoFeasiblePipeline(
            f"no region can host all {layer_count} layers of {model.name!r}"
        )
    return AllocationPlan(
        replication_count=len(pipelines),
        pipelines=tuple(pipelines),
        stage_total=sum(p.stage_count for p in pipelines),
        objective_score=objective_total,
        per_k_table=tuple(per_k),
    )
