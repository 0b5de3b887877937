"""Compute/communication cost model and optimal layer grouping.

Each candidate group ``(i, j)`` becomes an edge ``i -> j`` of a DAG over map
indices ``0 .. L``; the cheapest path from ``0`` to ``L`` gives the sync maps.
Group costs are taken at the most expensive tile, since tiles wait for each
other at every group boundary.
"""
from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .geometry import (BACKWARD, FORWARD, GridSpec, Group, GroupingProfile, TilePlan,
                       build_tile_plan, check_tileable)
from .tensor import LayerSpec

MAX_BRUTE_FORCE_MAPS = 12


@dataclass(frozen=True)
class CostParams:
    c_p: float
    c_c: float
    c_f: float

    def __post_init__(self):
        if min(self.c_p, self.c_c, self.c_f) < 0:
            raise ConfigurationError("cost parameters must be non-negative")

    def scaled(self, factor):
        return CostParams(self.c_p * factor, self.c_c * factor, self.c_f * factor)


@dataclass(frozen=True)
class GroupCostBreakdown:
    group: Group
    tile: int
    macs: int
    compute: float
    boundary_elements: int
    comm: float
    sync: float
    total: float

    def as_record(self):
        rec = asdict(self)
        rec["group"] = list(self.group)
        return rec


def mac_count(spec: LayerSpec, width, height, depth_in, depth_out=None) -> int:
    """MAC-equivalent operations for one tile's layer on a ``width x height`` haloed map."""
    k, s = spec.kernel, spec.stride
    ops = width * height * depth_in * k * k
    if spec.is_conv:
        ops *= depth_out if depth_out is not None else spec.out_channels
    return ops // (s * s)


def layer_region(plan: TilePlan, tile, layer):
    """The map-``layer`` region the cost model charges for one tile's pass over ``layer``."""
    if plan.direction == FORWARD:
        return plan.entry(tile, layer).required
    return plan.output_region(tile, layer)


def layer_macs(plan: TilePlan, tile, layer) -> int:
    r = layer_region(plan, tile, layer)
    d_in = plan.dims[layer][2]
    d_out = plan.dims[layer + 1][2]
    return mac_count(plan.layers[layer], r.width, r.height, d_in, d_out)


def group_macs(group: Group, plan: TilePlan, tile) -> int:
    return sum(layer_macs(plan, tile, l) for l in range(group.s, group.e))


def group_compute_cost(group: Group, plan: TilePlan, params: CostParams, tile) -> float:
    total = 0.0
    for l in range(group.s, group.e):
        total += params.c_p * layer_macs(plan, tile, l)
    return total


def boundary_elements(group: Group, plan: TilePlan, tile) -> int:
    m = group.s if plan.direction == FORWARD else group.e
    entry = plan.entry(tile, m)
    return plan.dims[m][2] * (entry.required.area - entry.owned.area)


def group_cost(group: Group, plan: TilePlan, params: CostParams, tile=None) -> GroupCostBreakdown:
    """Cost of one group for ``tile``, or for the most expensive tile when ``tile`` is None."""
    tiles = range(plan.tiles) if tile is None else (tile,)
    worst = None
    for t in tiles:
        macs = group_macs(group, plan, t)
        p_g = group_compute_cost(group, plan, params, t)
        b_g = boundary_elements(group, plan, t)
        c_g = params.c_c * b_g
        bd = GroupCostBreakdown(group, t, macs, p_g, b_g, c_g, params.c_f, p_g + c_g + params.c_f)
        if worst is None or bd.total > worst.total:
            worst = bd
    return worst


def total_cost(profile: GroupingProfile, plan: TilePlan, params: CostParams):
    if profile.direction != plan.direction:
        raise ConfigurationError("profile and plan directions differ")
    profile.validate(len(plan.layers))
    parts = [group_cost(g, plan, params) for g in profile.groups]
    total = 0.0
    for p in parts:
        total += p.total
    return total, parts


# -- group graph ----------------------------------------------------------------

def _group_plan(layers, dims, grid, group, direction):
    n = len(layers)
    bounds = sorted({0, group.s, group.e, n})
    return build_tile_plan(layers, dims, grid, GroupingProfile.from_boundaries(direction, bounds))


def build_group_graph(layers: Sequence[LayerSpec], grid: GridSpec, dims, params: CostParams,
                      direction: str) -> Dict[Tuple[int, int], GroupCostBreakdown]:
    """Edge ``(i, j)`` for every ``i < j`` over maps ``0 .. L``, weighted by the group's total cost."""
    layers = list(layers)
    check_tileable(layers)
    n = len(layers)
    edges = {}
    for i in range(n):
        for j in range(i + 1, n + 1):
            g = Group(i, j)
            edges[(i, j)] = group_cost(g, _group_plan(layers, dims, grid, g, direction), params)
    return edges


def _profile_from_path(direction, path):
    return GroupingProfile.from_boundaries(direction, path)


def shortest_grouping(edges: Dict[Tuple[int, int], GroupCostBreakdown], num_maps: int):
    """Dijkstra from map 0 to the last map.

    Labels are ``(cost, groups, path)``, so equal-cost paths resolve to fewer
    groups and then to the lexicographically smallest boundary sequence.
    """
    adj: Dict[int, List[Tuple[int, float]]] = {v: [] for v in range(num_maps)}
    for (i, j), bd in edges.items():
        adj[i].append((j, bd.total))
    sink = num_maps - 1
    heap = [(0.0, 0, (0,))]
    done = set()
    while heap:
        cost, ngroups, path = heapq.heappop(heap)
        v = path[-1]
        if v in done:
            continue
        done.add(v)
        if v == sink:
            return cost, path
        for w, weight in adj[v]:
            if w not in done:
                heapq.heappush(heap, (cost + weight, ngroups + 1, path + (w,)))
    raise ConfigurationError("group graph has no path to the final map")


def optimal_grouping(layers, grid: GridSpec, dims, params: CostParams, direction: str,
                     edges=None) -> GroupingProfile:
    edges = edges if edges is not None else build_group_graph(layers, grid, dims, params, direction)
    _, path = shortest_grouping(edges, len(layers) + 1)
    return _profile_from_path(direction, path)


def path_cost(edges, path):
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += edges[(a, b)].total
    return total


def brute_force_grouping(layers, grid: GridSpec, dims, params: CostParams, direction: str,
                         edges=None) -> GroupingProfile:
    """Exhaustive minimum over all ``2**(N-2)`` profiles, same tie-break as Dijkstra."""
    n = len(layers)
    if n + 1 > MAX_BRUTE_FORCE_MAPS:
        raise ConfigurationError(f"brute force limited to {MAX_BRUTE_FORCE_MAPS} maps, got {n + 1}")
    edges = edges if edges is not None else build_group_graph(layers, grid, dims, params, direction)
    best = None
    for r in range(n):
        for inner in itertools.combinations(range(1, n), r):
            path = (0,) + inner + (n,)
            key = (path_cost(edges, path), len(path) - 1, path)
            if best is None or key < best:
                best = key
    return _profile_from_path(direction, best[2])


# -- calibration ---------------------------------------------------------------------

def measure_cost_params(c_f_transactions: int = 200, repeats: int = 3) -> CostParams:
    """Rough c_p (s/MAC), c_c (s/element) and c_f (s/transaction) on this host.

    c_p times the conv kernel; c_c and c_f time an in-process wire round trip.
    """
    from . import kernels
    from .transport.wire import Message, decode_frame, encode_frame, HALO_BLOCK
    from .geometry import TileRect

    x = np.ones((16, 34, 34), dtype=np.float32)
    w = np.ones((3, 3, 16, 16), dtype=np.float32)
    kernels.conv_valid(x, w, 1)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.conv_valid(x, w, 1)
        best = min(best, time.perf_counter() - t0)
    c_p = best / (32 * 32 * 16 * 9 * 16)

    def roundtrip(n):
        msg = Message(HALO_BLOCK, 0, 1, FORWARD, 0, TileRect(0, 0, n - 1, 0), 1,
                      np.zeros(n, dtype=np.float32))
        t0 = time.perf_counter()
        for _ in range(c_f_transactions):
            decode_frame(encode_frame(msg))
        return (time.perf_counter() - t0) / c_f_transactions

    small, large = roundtrip(1), roundtrip(1 << 16)
    c_c = max(large - small, 0.0) / ((1 << 16) - 1)
    return CostParams(c_p, c_c, max(small, 0.0))


__all__ = [
    "CostParams", "GroupCostBreakdown", "mac_count", "layer_macs", "group_macs",
    "group_compute_cost", "boundary_elements", "group_cost", "total_cost", "build_group_graph",
    "shortest_grouping", "optimal_grouping", "brute_force_grouping", "path_cost",
    "measure_cost_params", "FORWARD", "BACKWARD",
]
