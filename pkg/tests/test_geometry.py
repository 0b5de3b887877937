import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _checks import (backward_sufficiency_violations, exchange_violations, layer_kinds,
                     partition_violations, window_mask)
from tiletrain.errors import ConfigurationError
from tiletrain.geometry import (BACKWARD, FORWARD, GridSpec, GroupingProfile, TileRect,
                                backtrace_forward_region, build_tile_plan, clip, exchange_schedule,
                                forwardtrace_delta_region, halo_decomposition, partition_map,
                                weight_grad_halo)
from tiletrain.modelio import synth_model
from tiletrain.tensor import CONV, MAXPOOL, LayerSpec

K3S1 = LayerSpec(CONV, 3, 1, 1, 4)
K3S2 = LayerSpec(CONV, 3, 2, 1, 4)


def test_worked_traces():
    assert tuple(backtrace_forward_region(TileRect(0, 0, 51, 51), K3S1)) == (-1, -1, 52, 52)
    assert tuple(backtrace_forward_region(TileRect(10, 10, 20, 20), K3S2)) == (19, 19, 42, 42)
    assert tuple(forwardtrace_delta_region(TileRect(5, 5, 10, 10), K3S1)) == (4, 4, 11, 11)
    assert tuple(forwardtrace_delta_region(TileRect(4, 4, 10, 10), K3S2)) == (2, 2, 5, 5)
    assert tuple(clip(TileRect(-1, -1, 52, 52), 104, 104)) == (0, 0, 52, 52)
    assert tuple(clip(TileRect(50, 50, 105, 105), 104, 104)) == (50, 50, 103, 103)
    with pytest.raises(ConfigurationError):
        clip(TileRect(200, 200, 210, 210), 104, 104)


@pytest.mark.parametrize("k,w", [(1, 1), (3, 2), (5, 3)])
def test_weight_grad_halo(k, w):
    assert weight_grad_halo(k) == w


def test_partition_examples():
    rects = partition_map(6, 6, GridSpec(2, 2))
    assert [tuple(r) for r in rects] == [(0, 0, 2, 2), (3, 0, 5, 2), (0, 3, 2, 5), (3, 3, 5, 5)]
    rects = partition_map(7, 7, GridSpec(2, 2))
    assert [r.width for r in rects] == [4, 3, 4, 3] and [r.height for r in rects] == [4, 4, 3, 3]
    with pytest.raises(ConfigurationError):
        partition_map(2, 2, GridSpec(3, 3))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 60), st.integers(0, 60))
def test_partition_covers_exactly_once(rows, cols, dw, dh):
    grid = GridSpec(rows, cols)
    assert partition_violations(cols + dw, rows + dh, grid) == 0


def _exact_bbox(mask):
    ys, xs = np.nonzero(mask)
    return TileRect(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(layer_kinds()), st.integers(6, 20), st.integers(6, 20), st.data())
def test_backtrace_covers_exact_window(spec, w, h, data):
    ow, oh, _ = spec.output_dims(w, h, 1)
    x1 = data.draw(st.integers(0, ow - 1))
    y1 = data.draw(st.integers(0, oh - 1))
    r = TileRect(x1, y1, data.draw(st.integers(x1, ow - 1)), data.draw(st.integers(y1, oh - 1)))
    exact = _exact_bbox(window_mask(spec, ow, oh, w, h, r))
    assert clip(backtrace_forward_region(r, spec), w, h).contains(exact)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(layer_kinds()), st.integers(4, 14), st.integers(4, 14), st.data())
def test_delta_trace_sufficient(spec, w, h, data):
    x1 = data.draw(st.integers(0, w - 1))
    y1 = data.draw(st.integers(0, h - 1))
    r = TileRect(x1, y1, data.draw(st.integers(x1, w - 1)), data.draw(st.integers(y1, h - 1)))
    assert backward_sufficiency_violations(spec, w, h, r) == 0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_duality_stride_one(k):
    spec = LayerSpec(CONV, k, 1, k // 2, 2)
    for x1 in range(0, 5):
        for x2 in range(x1, 7):
            r = TileRect(x1, x1, x2, x2)
            assert forwardtrace_delta_region(backtrace_forward_region(r, spec), spec).contains(r)
            assert backtrace_forward_region(forwardtrace_delta_region(r, spec), spec).contains(r)


def test_halo_counts():
    grid = GridSpec(3, 3)
    owned = partition_map(9, 9, grid)
    required = [r.expand(1) for r in owned]
    recv, send = halo_decomposition(4, required, owned, grid)
    assert len(recv) == 8 and len(send) == 8
    assert sum(b.rect.area for b in recv) == 5 * 5 - 9
    grid = GridSpec(2, 2)
    owned = partition_map(6, 6, grid)
    required = [clip(r.expand(1), 6, 6) for r in owned]
    recv, _ = halo_decomposition(0, required, owned, grid)
    assert sorted(b.peer for b in recv) == [1, 2, 3]
    assert sum(b.rect.area for b in recv) == 4 * 4 - 9


def test_non_adjacent_halo_rejected():
    grid = GridSpec(1, 4)
    owned = partition_map(8, 2, grid)
    required = [clip(r.expand(3), 8, 2) for r in owned]
    with pytest.raises(ConfigurationError):
        halo_decomposition(0, required, owned, grid)


@pytest.mark.parametrize("grid", ["1x2", "2x2", "2x3", "3x3"])
@pytest.mark.parametrize("bounds", [(0, 1, 2, 3, 4, 5, 6), (0, 6), (0, 3, 4, 6)])
def test_plan_exchange_consistency(grid, bounds):
    model = synth_model(0)
    dims = model.map_dims()
    for direction in (FORWARD, BACKWARD):
        prof = GroupingProfile.from_boundaries(direction, bounds)
        plan = build_tile_plan(model.layers, dims, GridSpec.parse(grid), prof)
        for m in prof.sync_maps():
            assert exchange_violations(plan, m) == 0


def test_forward_plan_sufficient_within_groups():
    model = synth_model(0)
    dims = model.map_dims()
    prof = GroupingProfile.from_boundaries(FORWARD, (0, 3, 6))
    plan = build_tile_plan(model.layers, dims, GridSpec(2, 2), prof)
    for t in range(4):
        for m in range(6):
            spec = model.layers[m]
            w, h, _ = dims[m]
            out = plan.output_region(t, m + 1)
            need = _exact_bbox(window_mask(spec, *dims[m + 1][:2], w, h, out))
            assert plan.entry(t, m).required.contains(need)


def test_exchange_blocks_exclude_owned_core():
    model = synth_model(0)
    plan = build_tile_plan(model.layers, model.map_dims(), GridSpec(3, 3),
                           GroupingProfile.per_layer(FORWARD, 6))
    for t, (recv, _) in exchange_schedule(plan, 2).items():
        for blk in recv:
            assert blk.rect.intersect(plan.entry(t, 2).owned) is None


def test_profile_validation():
    with pytest.raises(ConfigurationError):
        GroupingProfile(FORWARD, ((0, 2), (3, 4)))
    with pytest.raises(ConfigurationError):
        GroupingProfile.per_layer(FORWARD, 3).validate(4)
    p = GroupingProfile.from_boundaries(BACKWARD, (0, 2, 5))
    assert p.sync_maps() == [5, 2] and str(p) == "0,2,5"
    assert GroupingProfile.from_boundaries(FORWARD, (0, 2, 5)).sync_maps() == [0, 2]


def test_untileable_layers_rejected():
    from tiletrain.geometry import check_tileable
    with pytest.raises(ConfigurationError):
        check_tileable([LayerSpec(CONV, 3, 1, 0, 2)])
    with pytest.raises(ConfigurationError):
        check_tileable([LayerSpec(MAXPOOL, 3, 2, 1)])


@pytest.mark.parametrize("direction", [FORWARD, BACKWARD])
def test_merging_groups_never_shrinks_group_input_halo(direction):
    model = synth_model(0)
    dims = model.map_dims()
    grid = GridSpec(3, 3)
    for cut in range(1, 6):
        split = build_tile_plan(model.layers, dims, grid, GroupingProfile.from_boundaries(direction, (0, cut, 6)))
        merged = build_tile_plan(model.layers, dims, grid, GroupingProfile.single(direction, 6))
        m = 0 if direction == FORWARD else 6
        for t in range(9):
            assert merged.entry(t, m).required.contains(split.entry(t, m).required)
