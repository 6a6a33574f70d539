import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocsprune.graph import (GraphError, build_model, builtin_architectures, count_flops,
                            count_params, init_params, load_spec)
from ocsprune.nn import ShapeError, forward

from archgen import random_spec


def chain(c1=16, c2=8, hw=32, c_in=3):
    return {"name": "chain", "input_shape": [c_in, hw, hw], "num_classes": 2, "layers": [
        {"id": "conv1", "kind": "conv2d", "out_channels": c1, "padding": 1},
        {"id": "relu1", "kind": "relu"},
        {"id": "conv2", "kind": "conv2d", "out_channels": c2, "padding": 1},
        {"id": "gap", "kind": "gap"},
        {"id": "fc", "kind": "dense", "out_features": 2},
    ]}


def test_builtins_load():
    assert {"chain-tiny", "vgg-tiny", "resnet-tiny", "mobilenet-tiny", "desk-resnet"} <= set(builtin_architectures())
    for name in builtin_architectures():
        build_model(name)


def test_two_conv_net_has_two_prunable_convs():
    g = build_model(chain())
    assert [n.id for n in g.nodes if n.kind == "conv2d"] == ["conv1", "conv2"]


def test_basic_block_add_has_two_inputs():
    g = build_model("resnet-tiny")
    add = g.node("b1_add")
    assert add.kind == "add" and add.inputs == ("b1_bn2", "stem_relu")


def test_stride_mismatch_on_residual_branches_is_a_shape_conflict():
    spec = load_spec("resnet-tiny")
    for layer in spec["layers"]:
        if layer["id"] == "b1_conv2":
            layer["stride"] = 2
    with pytest.raises(ShapeError, match="shape conflict"):
        build_model(spec)


def test_cycle_and_unknown_kind_rejected():
    spec = chain()
    spec["layers"][0]["inputs"] = ["conv2"]
    with pytest.raises(GraphError, match="cycle"):
        build_model(spec)
    spec = chain()
    spec["layers"][1]["kind"] = "softplus"
    with pytest.raises(GraphError, match="unknown kind"):
        build_model(spec)


def test_add_needs_exactly_two_inputs():
    spec = chain()
    spec["layers"].insert(2, {"id": "a", "kind": "add", "inputs": ["relu1"]})
    with pytest.raises(GraphError, match="exactly 2"):
        build_model(spec)


def test_init_is_deterministic_and_within_bound():
    g = build_model(chain())
    a, b = init_params(g, 7), init_params(g, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    bound = math.sqrt(6 / 27)
    assert bound == pytest.approx(0.4714, abs=1e-4)
    assert np.abs(a["conv1.weight"]).max() <= bound
    assert np.abs(a["conv1.weight"]).max() > 0.9 * bound


def test_bn_scale_initialized_to_one():
    p = init_params(build_model("resnet-tiny"), 0)
    np.testing.assert_array_equal(p["stem_bn.weight"], 1.0)
    np.testing.assert_array_equal(p["stem_bn.bias"], 0.0)


def test_conv_macs_example():
    rep = count_flops(build_model(chain()))
    assert rep.per_node["conv1"] == 16 * 3 * 9 * 32 * 32 == 442_368
    assert rep.total == sum(rep.per_node.values())


def test_pool_only_graph_has_zero_macs():
    spec = {"name": "p", "input_shape": [3, 4, 4], "num_classes": 3,
            "layers": [{"id": "pool", "kind": "maxpool"}, {"id": "gap", "kind": "gap"}]}
    assert count_flops(build_model(spec)).total == 0


def test_halving_a_chain():
    full = count_flops(build_model(chain(16, 16)))
    half = count_flops(build_model(chain(8, 8)))
    assert half.per_node["conv1"] * 2 == full.per_node["conv1"]
    assert half.per_node["conv2"] * 4 == full.per_node["conv2"]


def test_input_resolution_override():
    g = build_model(chain())
    assert count_flops(g, (16, 16)).per_node["conv1"] == 16 * 3 * 9 * 16 * 16
    with pytest.raises(ShapeError):
        count_flops(build_model("vgg-tiny"), (2, 2))


def test_flops_ratio_against_baseline():
    base = count_flops(build_model(chain(16, 16)))
    rep = count_flops(build_model(chain(8, 8)), baseline=base)
    assert 0 < rep.ratio < 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_inference_agrees_with_forward(seed):
    g = build_model(random_spec(seed))
    _, tape = forward(g, init_params(g, seed), np.zeros((2, *g.input_shape)))
    assert len(tape.nodes) == len(g.nodes)
    for node, rec in zip(g.nodes, tape.nodes):
        assert tape[rec.output].shape == (2, *g.shapes[node.id]), node.id


def test_narrowing_any_plain_conv_strictly_reduces_macs():
    g = build_model("vgg-tiny")
    base = count_flops(g).total
    for n in g.nodes:
        if n.kind == "conv2d":
            smaller = g.with_attrs({n.id: {"out_channels": n["out_channels"] - 1}})
            assert count_flops(smaller).total < base


def test_to_spec_round_trip():
    g = build_model("mobilenet-tiny")
    assert build_model(g.to_spec()) == g
