"""Execution plans: both pass directions plus the halo schedules between them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from ..errors import ConfigurationError
from ..geometry import (BACKWARD, FORWARD, GridSpec, GroupingProfile, HaloBlock, TilePlan, TileRect,
                        build_tile_plan, check_tileable, clip, exchange_schedule, input_window,
                        partition_map)
from ..tensor import Model

Schedule = Dict[int, Tuple[List[HaloBlock], List[HaloBlock]]]


@dataclass
class ExecutionPlan:
    grid: GridSpec
    dims: List[Tuple[int, int, int]]
    layers: list
    fwd: TilePlan
    bwd: TilePlan
    # map index -> per-tile (receive, send) sets; map 0 forward and map L backward are scattered
    fwd_exchanges: Dict[int, Schedule]
    bwd_exchanges: Dict[int, Schedule]
    # (tile, layer) -> pooled-output region whose argmax map the backward pass reads
    pool_index_regions: Dict[Tuple[int, int], TileRect]
    # (tile, layer) -> output positions whose weight-gradient terms the tile owns
    wgrad_regions: Dict[Tuple[int, int], TileRect]
    coordinator: int = 0
    extra_forward: Dict[Tuple[int, int], TileRect] = field(default_factory=dict)

    @property
    def tiles(self):
        return self.grid.tiles

    @property
    def num_layers(self):
        return len(self.layers)

    def scatter_region(self, tile):
        return self.fwd.entry(tile, 0).required

    def delta_scatter_region(self, tile):
        return self.bwd.entry(tile, self.num_layers).required

    def halo_elements(self, direction, m, tile):
        """Elements ``tile`` receives at sync map ``m``."""
        sched = (self.fwd_exchanges if direction == FORWARD else self.bwd_exchanges)[m]
        depth = self.dims[m][2]
        return depth * sum(b.rect.area for b in sched[tile][0])

    def describe(self):
        """Rows of the per-tile, per-map rect table (for the ``plan`` command)."""
        rows = []
        for name, tp in ((FORWARD, self.fwd), (BACKWARD, self.bwd)):
            for t in range(self.tiles):
                for m, e in enumerate(tp.entries[t]):
                    rows.append({
                        "direction": name, "tile": t, "map": m,
                        "owned": list(e.owned), "required": list(e.required),
                        "computed": list(tp.output_region(t, m)),
                        "sync": tp.is_sync_map(m),
                    })
        return rows


def _backward_needs(layers, dims, grid, bwd: TilePlan):
    """Feature-map regions the backward pass and weight gradients read, per (tile, map)."""
    needs: Dict[Tuple[int, int], TileRect] = {}
    pool_regions, wgrad_regions = {}, {}
    owned = [partition_map(w, h, grid) for (w, h, _) in dims]

    def add(t, m, rect):
        w, h, _ = dims[m]
        r = clip(rect, w, h)
        needs[(t, m)] = r.hull(needs.get((t, m)))

    for t in range(grid.tiles):
        for l, spec in enumerate(layers):
            held_delta = bwd.entry(t, l + 1).required
            if spec.is_conv:
                wg = owned[l + 1][t]
                wgrad_regions[(t, l)] = wg
                add(t, l, input_window(wg, spec))
                if spec.activation != "linear":
                    add(t, l + 1, held_delta)
            else:
                pool_regions[(t, l)] = held_delta
                add(t, l, input_window(held_delta, spec))
    return needs, pool_regions, wgrad_regions


def build_plan(model: Model, grid: GridSpec, fwd_profile: GroupingProfile,
               bwd_profile: GroupingProfile, coordinator: int = 0) -> ExecutionPlan:
    """Plan both passes for ``grid``.

    The backward plan is traced first; forward regions are then widened so
    every feature map value the backward pass reads (activation derivatives,
    pooling argmax, weight-gradient windows) is already held locally.
    """
    if fwd_profile.direction != FORWARD or bwd_profile.direction != BACKWARD:
        raise ConfigurationError("profiles must be (forward, backward)")
    layers = list(model.layers)
    check_tileable(layers)
    dims = model.map_dims()
    if not 0 <= coordinator < grid.tiles:
        raise ConfigurationError(f"coordinator {coordinator} outside the {grid} grid")
    bwd = build_tile_plan(layers, dims, grid, bwd_profile)
    needs, pool_regions, wgrad_regions = _backward_needs(layers, dims, grid, bwd)
    pure = build_tile_plan(layers, dims, grid, fwd_profile)
    fwd = build_tile_plan(layers, dims, grid, fwd_profile, needs)
    extra = {}
    for t in range(grid.tiles):
        for m in range(len(dims)):
            a, b = pure.entry(t, m).required, fwd.entry(t, m).required
            if a != b:
                extra[(t, m)] = b
    n = len(layers)
    fwd_x = {m: exchange_schedule(fwd, m) for m in fwd_profile.sync_maps() if m != 0}
    bwd_x = {m: exchange_schedule(bwd, m) for m in bwd_profile.sync_maps() if m != n}
    return ExecutionPlan(grid, dims, layers, fwd, bwd, fwd_x, bwd_x, pool_regions, wgrad_regions,
                         coordinator, extra)
