import numpy as np
import pytest

from _checks import grouping_violations, random_instance
from tiletrain import grouping
from tiletrain.errors import ConfigurationError
from tiletrain.geometry import BACKWARD, FORWARD, GridSpec, Group, GroupingProfile, build_tile_plan
from tiletrain.grouping import (CostParams, boundary_elements, brute_force_grouping, build_group_graph,
                                group_compute_cost, group_cost, mac_count, optimal_grouping, path_cost,
                                total_cost)
from tiletrain.modelio import synth_model
from tiletrain.tensor import CONV, MAXPOOL, LayerSpec


def test_mac_count_examples():
    assert mac_count(LayerSpec(CONV, 3, 1, 1, 16), 12, 12, 3, 16) == 62208
    assert mac_count(LayerSpec(CONV, 3, 2, 1, 16), 12, 12, 3, 16) == 15552
    assert mac_count(LayerSpec(CONV, 1, 1, 0, 1), 1, 1, 1, 1) == 1
    assert mac_count(LayerSpec(MAXPOOL, 2, 2), 4, 4, 3) == 48


def _center_plan(k):
    layers = [LayerSpec(CONV, k, 1, k // 2, 16)]
    dims = [(30, 30, 16), (30, 30, 16)]
    return build_tile_plan(layers, dims, GridSpec(3, 3), GroupingProfile.single(FORWARD, 1))


@pytest.mark.parametrize("k,expect", [(3, 704), (5, 1536)])
def test_boundary_elements_examples(k, expect):
    assert boundary_elements(Group(0, 1), _center_plan(k), 4) == expect


def test_boundary_elements_single_tile():
    layers = [LayerSpec(CONV, 3, 1, 1, 4)]
    plan = build_tile_plan(layers, [(8, 8, 2), (8, 8, 4)], GridSpec(1, 1), GroupingProfile.single(FORWARD, 1))
    assert boundary_elements(Group(0, 1), plan, 0) == 0


def test_compute_cost():
    plan = _center_plan(3)
    o = grouping.layer_macs(plan, 4, 0)
    assert group_compute_cost(Group(0, 1), plan, CostParams(1, 0, 0), 4) == o
    assert group_compute_cost(Group(0, 1), plan, CostParams(0, 1, 1), 4) == 0
    assert group_compute_cost(Group(0, 1), plan, CostParams(0.5, 0, 0), 4) == 0.5 * o


def test_total_cost_example(monkeypatch):
    monkeypatch.setattr(grouping, "layer_macs", lambda plan, tile, layer: 62208)
    monkeypatch.setattr(grouping, "boundary_elements", lambda group, plan, tile: 704)
    plan = _center_plan(3)
    total, parts = total_cost(plan.profile, plan, CostParams(1, 1, 10))
    assert total == 62922 and parts[0].total == parts[0].compute + parts[0].comm + parts[0].sync


def test_sync_only_cost():
    model = synth_model(0)
    prof = GroupingProfile.per_layer(BACKWARD, 6)
    plan = build_tile_plan(model.layers, model.map_dims(), GridSpec(2, 2), prof)
    assert total_cost(prof, plan, CostParams(0, 0, 3))[0] == 18
    with pytest.raises(ConfigurationError):
        total_cost(GroupingProfile.per_layer(FORWARD, 6), plan, CostParams(0, 0, 1))


def test_worst_tile_is_charged():
    plan = _center_plan(3)
    bd = group_cost(Group(0, 1), plan, CostParams(0, 1, 0))
    assert bd.tile == 4 and bd.boundary_elements == 704


def test_graph_shape():
    model = synth_model(0)
    layers = model.layers[:3]
    dims = model.map_dims()[:4]
    edges = build_group_graph(layers, GridSpec(2, 2), dims, CostParams(1, 1, 5), FORWARD)
    assert sorted(edges) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    assert all(bd.total == bd.compute + bd.comm + 5 for bd in edges.values())


def test_splitting_never_adds_compute():
    model = synth_model(0)
    dims = model.map_dims()
    edges = build_group_graph(model.layers, GridSpec(3, 3), dims, CostParams(1, 0, 0), FORWARD)
    for i in range(6):
        for j in range(i + 2, 7):
            for k in range(i + 1, j):
                assert edges[(i, k)].compute + edges[(k, j)].compute <= edges[(i, j)].compute


def test_small_brute_force():
    layers = [LayerSpec(CONV, 3, 1, 1, 2)]
    dims = [(8, 8, 1), (8, 8, 2)]
    assert brute_force_grouping(layers, GridSpec(2, 2), dims, CostParams(1, 1, 1), FORWARD).boundaries == (0, 1)
    too_many = [LayerSpec(CONV, 1, 1, 0, 1)] * 12
    with pytest.raises(ConfigurationError):
        brute_force_grouping(too_many, GridSpec(1, 1), [(4, 4, 1)] * 13, CostParams(1, 1, 1), FORWARD)


def test_sync_dominated_gives_single_group():
    model = synth_model(0)
    for direction in (FORWARD, BACKWARD):
        prof = optimal_grouping(model.layers, GridSpec(2, 2), model.map_dims(), CostParams(0, 0, 1e6), direction)
        assert prof.boundaries == (0, 6)


def test_compute_bound_per_layer_is_optimal():
    model = synth_model(0)
    for direction in (FORWARD, BACKWARD):
        edges = build_group_graph(model.layers, GridSpec(2, 2), model.map_dims(), CostParams(1, 0, 0), direction)
        best = optimal_grouping(model.layers, GridSpec(2, 2), model.map_dims(), CostParams(1, 0, 0), direction,
                                edges=edges)
        assert path_cost(edges, tuple(range(7))) == path_cost(edges, best.boundaries)


def test_random_instances_small():
    opt_bad, scale_bad, n = grouping_violations(instances=40, seed=7)
    assert (opt_bad, scale_bad) == (0, 0)


def test_random_instance_is_deterministic():
    a = random_instance(np.random.default_rng(3))
    b = random_instance(np.random.default_rng(3))
    assert a[1] == b[1] and a[3] == b[3]


def test_negative_params_rejected():
    with pytest.raises(ConfigurationError):
        CostParams(-1, 0, 0)
