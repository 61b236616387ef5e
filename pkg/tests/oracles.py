"""Brute-force reference implementations the fast paths are checked against.

Everything here favours obviousness over speed: bitmask enumeration for the
stage-count search, full composition / path enumeration for the splitter and
the router. Keep instance sizes small when calling these.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple


def min_stages_exhaustive(
    capacities: Sequence[int], layer_count: int, max_replicas: int
) -> Dict[int, int]:
    """k -> minimum total GPUs forming k disjoint groups with capsum >= L.

    Enumerates submask partitions (3^N states); fine for N <= 10 or so.
    """
    n = len(capacities)
    full = (1 << n) - 1
    capsum = [0] * (1 << n)
    for mask in range(1, 1 << n):
        low = mask & -mask
        capsum[mask] = capsum[mask ^ low] + capacities[low.bit_length() - 1]

    @lru_cache(maxsize=None)
    def best(k: int, used: int) -> Optional[int]:
        if k == 0:
            return 0
        free = full ^ used
        winner: Optional[int] = None
        sub = free
        while sub:
            if capsum[sub] >= layer_count:
                rest = best(k - 1, used | sub)
                if rest is not None:
                    total = bin(sub).count("1") + rest
                    if winner is None or total < winner:
                        winner = total
            sub = (sub - 1) & free
        return winner

    out: Dict[int, int] = {}
    for k in range(1, max_replicas + 1):
        val = best(k, 0)
        if val is not None:
            out[k] = val
    best.cache_clear()
    return out


def min_stages_labelled(
    capacities: Sequence[int], layer_count: int, k: int
) -> Optional[int]:
    """Same answer by raw label assignment (0 = unused). N <= 5 only."""
    n = len(capacities)
    winner: Optional[int] = None
    for labels in itertools.product(range(k + 1), repeat=n):
        sums = [0] * (k + 1)
        used = 0
        for cap, label in zip(capacities, labels):
            sums[label] += cap
            if label > 0:
                used += 1
        if all(sums[g] >= layer_count for g in range(1, k + 1)):
            if winner is None or used < winner:
                winner = used
    return winner


def min_stages_plain_dp(
    capacities: Sequence[int], layer_count: int, max_replicas: int
) -> Dict[int, int]:
    """Three-transition DP (skip / extend / start) with no dominance pruning.

    The production sweep drops the skip transition and prunes dominated
    states; this keeps both out so the reductions have something honest to
    answer to.
    """
    caps = sorted(capacities, reverse=True)
    frontier: Dict[Tuple[Tuple[int, ...], int], int] = {((), 0): 0}
    for cap in caps:
        nxt: Dict[Tuple[Tuple[int, ...], int], int] = {}

        def update(state, uses):
            if state not in nxt or uses < nxt[state]:
                nxt[state] = uses

        for (residuals, done), uses in frontier.items():
            update((residuals, done), uses)  # skip this GPU
            if done + len(residuals) < max_replicas:  # start a new pipeline
                left = layer_count - cap
                if left <= 0:
                    update((residuals, done + 1), uses + 1)
                else:
                    update(
                        (tuple(sorted(residuals + (left,))), done), uses + 1
                    )
            for j in range(len(residuals)):  # extend an open pipeline
                if j > 0 and residuals[j] == residuals[j - 1]:
                    continue
                left = residuals[j] - cap
                rest = residuals[:j] + residuals[j + 1 :]
                if left <= 0:
                    update((rest, done + 1), uses + 1)
                else:
                    update((tuple(sorted(rest + (left,))), done), uses + 1)
        frontier = nxt
    out: Dict[int, int] = {}
    for (residuals, done), uses in frontier.items():
        if not residuals and done >= 1:
            if done not in out or uses < out[done]:
                out[done] = uses
    return out


def bottleneck_exhaustive(
    flops: Sequence[float], capacities: Sequence[int], layer_count: int
) -> float:
    """Best possible max(x_i / F_i) over integer x with 0 <= x_i <= c_i, sum L."""
    n = len(capacities)
    suffix = [0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + capacities[i]
    best = float("inf")

    def rec(i: int, remaining: int, cur_max: float) -> None:
        nonlocal best
        if cur_max >= best:
            return
        if i == n:
            if remaining == 0:
                best = cur_max
            return
        if remaining > suffix[i]:
            return
        for x in range(min(capacities[i], remaining), -1, -1):
            rec(i + 1, remaining - x, max(cur_max, x / flops[i]))

    rec(0, layer_count, 0.0)
    return best


RttFn = Callable[[str, str], Optional[float]]


def chain_cost_exhaustive(
    hosts: Sequence[Sequence[str]],
    latencies: Dict[Tuple[str, int], float],
    rtt: RttFn,
) -> Tuple[float, Tuple[str, ...]]:
    """Min-cost host assignment by full enumeration.

    Accumulates left to right in the same association order as the router's
    relaxation, so cost comparisons against it can demand bit equality.
    Returns (cost, assignment); among equal-cost paths the first found in
    host-list order wins.
    """
    best: Optional[float] = None
    best_assign: Tuple[str, ...] = ()

    def rec(layer_index: int, gpu: str, acc: float, assign: List[str]) -> None:
        nonlocal best, best_assign
        if layer_index == len(hosts):
            if best is None or acc < best:
                best = acc
                best_assign = tuple(assign)
            return
        for nxt in hosts[layer_index]:
            hop = 0.0 if nxt == gpu else rtt(gpu, nxt)
            if hop is None:
                continue
            assign.append(nxt)
            rec(
                layer_index + 1,
                nxt,
                (acc + hop) + latencies[(nxt, layer_index + 1)],
                assign,
            )
            assign.pop()

    for first in hosts[0]:
        rec(1, first, latencies[(first, 1)], [first])
    assert best is not None, "no path at all"
    return best, best_assign


def percentile_by_counting(values: Sequence[float], p: float) -> float:
    """Smallest v such that at least p% of the sample is <= v."""
    ordered = sorted(values)
    n = len(ordered)
    for v in ordered:
        at_or_below = sum(1 for u in ordered if u <= v)
        if 100.0 * at_or_below / n >= p:
            return v
    return ordered[-1]
