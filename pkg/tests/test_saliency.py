import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocsprune.graph import build_model, count_flops, init_params, load_spec
from ocsprune.groups import ParamSlice, build_groups
from ocsprune.saliency import (InfeasibleRatio, PartitionResult, all_scores, global_partition,
                               group_scores, partition_table, score_channel, signature_of)
from ocsprune.surgery import SurgeryError, apply_prune

from oracles import exhaustive_partition, saliency_by_hand

SMALL = ["chain-tiny", "resnet-tiny", "vgg-tiny"]


def widened(name, factor):
    spec = load_spec(name)
    for layer in spec["layers"]:
        if layer.get("kind") == "conv2d":
            layer["out_channels"] *= factor
            if layer.get("groups", 1) > 1:
                layer["groups"] *= factor
        elif layer.get("kind") == "dense" and layer is not spec["layers"][-1]:
            layer["out_features"] *= factor
    spec["name"] = f"{name}-x{factor}"
    return spec


# Architectures for the +-1% ratio check: every channel step is well below 1% of MACs.
WIDE = {"desk-resnet": "desk-resnet", "vgg-wide": widened("vgg-tiny", 8),
        "mobilenet-wide": widened("mobilenet-tiny", 16)}


def physical_ratio(graph, params, groups, prune):
    """FLOPs ratio by actually removing the channels and recounting."""
    part = PartitionResult.from_pruned(groups, prune)
    pruned, _, _, _ = apply_prune(graph, params, None, part)
    return count_flops(pruned).total / count_flops(graph).total


def test_score_example():
    params = {"a": np.array([[3.0, 4.0]]), "b": np.array([[1.0, 2.0, 2.0]])}
    bundle = [ParamSlice("a", 0, 0, 1, "out"), ParamSlice("b", 0, 0, 1, "out")]
    assert score_channel(params, bundle) == pytest.approx(2.63379, abs=1e-5)
    assert saliency_by_hand([[3, 4], [1, 2, 2]]) == pytest.approx(2.63379, abs=1e-5)


def test_zero_bundle_scores_zero():
    params = {"a": np.zeros((2, 3))}
    assert score_channel(params, [ParamSlice("a", 0, 1, 2, "out")]) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_score_is_positively_homogeneous(c, seed):
    rng = np.random.default_rng(seed)
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((5, 3))}
    bundle = [ParamSlice("a", 0, 1, 2, "out"), ParamSlice("b", 1, 1, 2, "in")]
    scaled = {k: v * c for k, v in params.items()}
    assert score_channel(scaled, bundle) == pytest.approx(c * score_channel(params, bundle), rel=1e-12)


@pytest.mark.parametrize("name", SMALL + ["mobilenet-tiny"])
def test_vectorised_scores_match_bundle_scores(name):
    g = build_model(name)
    p = init_params(g, 4)
    for grp in build_groups(g):
        vec = group_scores(p, grp)
        for c in range(grp.channels):
            hand = saliency_by_hand([p[s.param][s.index()] for s in grp.bundle(c, include_stats=False)])
            assert vec[c] == pytest.approx(hand, rel=1e-12)


def test_alpha_one_prunes_nothing():
    g = build_model("resnet-tiny")
    groups = build_groups(g)
    part = global_partition(all_scores(init_params(g, 0), groups), g, groups, 1.0)
    assert part.prune == frozenset() and part.ratio == 1.0


def test_infeasible_alpha_names_groups():
    g = build_model("chain-tiny")
    groups = build_groups(g)
    with pytest.raises(InfeasibleRatio, match="binding groups"):
        global_partition(all_scores(init_params(g, 0), groups), g, groups, 0.001)


@pytest.mark.parametrize("name", SMALL)
@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7])
def test_matches_exhaustive_threshold_sweep(name, alpha):
    g = build_model(name)
    p = init_params(g, 2)
    groups = build_groups(g)
    scores = all_scores(p, groups)
    part = global_partition(scores, g, groups, alpha)
    want, want_ratio = exhaustive_partition(scores, groups, lambda s: physical_ratio(g, p, groups, s), alpha)
    assert part.prune == want
    assert part.ratio == pytest.approx(want_ratio, abs=1e-12)
    assert physical_ratio(g, p, groups, part.prune) == pytest.approx(part.ratio, abs=1e-12)


def test_two_group_toy_net():
    spec = {"name": "toy", "input_shape": [1, 4, 4], "num_classes": 2, "layers": [
        {"id": "c1", "kind": "conv2d", "out_channels": 4, "padding": 1},
        {"id": "c2", "kind": "conv2d", "out_channels": 3, "padding": 1},
        {"id": "gap", "kind": "gap"}, {"id": "fc", "kind": "dense", "out_features": 2}]}
    g = build_model(spec)
    groups = build_groups(g)
    assert len(groups) == 2
    p = init_params(g, 0)
    scores = all_scores(p, groups)
    part = global_partition(scores, g, groups, 0.5)
    want, _ = exhaustive_partition(scores, groups, lambda s: physical_ratio(g, p, groups, s), 0.5)
    assert part.prune == want and part.ratio >= 0.5


def test_equal_scores_tie_break_is_deterministic():
    g = build_model("resnet-tiny")
    groups = build_groups(g)
    scores = {grp.id: np.ones(grp.channels) for grp in groups}
    a = global_partition(scores, g, groups, 0.5)
    b = global_partition(scores, g, groups, 0.5)
    assert a.prune == b.prune
    # lower group id, then lower channel index, pruned first
    first = min(grp.id for grp in groups)
    assert (first, 0) in a.prune


@pytest.mark.parametrize("name", list(WIDE))
@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7])
def test_ratio_within_one_percent(name, alpha):
    g = build_model(WIDE[name])
    p = init_params(g, 0)
    groups = build_groups(g)
    part = global_partition(all_scores(p, groups), g, groups, alpha)
    assert alpha <= part.ratio <= alpha + 0.01
    assert physical_ratio(g, p, groups, part.prune) == pytest.approx(part.ratio, abs=1e-12)


@pytest.mark.parametrize("name", list(WIDE) + SMALL)
def test_monotone_in_alpha_and_scale_invariant(name):
    g = build_model(WIDE.get(name, name))
    p = init_params(g, 5)
    groups = build_groups(g)
    scores = all_scores(p, groups)
    scaled = all_scores({k: v * 10 for k, v in p.items()}, groups)
    prev = None
    for alpha in (0.3, 0.4, 0.5, 0.6, 0.7, 0.8):
        part = global_partition(scores, g, groups, alpha)
        assert global_partition(scaled, g, groups, alpha).prune == part.prune
        if prev is not None:
            assert part.ratio >= prev.ratio
            assert part.prune <= prev.prune
        prev = part


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 0.95))
def test_partition_invariants(seed, alpha):
    g = build_model("resnet-tiny")
    groups = build_groups(g)
    rng = np.random.default_rng(seed)
    scores = {grp.id: rng.random(grp.channels) for grp in groups}
    part = global_partition(scores, g, groups, alpha)
    everything = {(grp.id, c) for grp in groups for c in range(grp.channels)}
    assert part.prune | part.keep == everything and not part.prune & part.keep
    assert part.ratio >= alpha - 0.01
    for grp in groups:
        assert part.kept_channels(grp)  # floor of one channel
    # threshold monotonicity: channels below the threshold are all pruned
    for grp in groups:
        for c in range(grp.channels):
            if scores[grp.id][c] < part.threshold and len(part.kept_channels(grp)) > 1:
                assert (grp.id, c) in part.prune


def test_signature_examples():
    g = build_model("resnet-tiny")
    groups = build_groups(g)
    empty = PartitionResult.from_pruned(groups, set())
    sig = signature_of(empty, g)
    assert sig["stem"] == frozenset(range(8))
    stem = next(grp for grp in groups if "stem" in grp.owners)
    part = PartitionResult.from_pruned(groups, {(stem.id, 1), (stem.id, 3)})
    sig = signature_of(part, g)
    assert sig["stem"] == sig["b1_conv2"] == frozenset({0, 2, 4, 5, 6, 7})


def test_partition_table_counts():
    g = build_model("chain-tiny")
    groups = build_groups(g)
    part = PartitionResult.from_pruned(groups, {(0, 0), (0, 5)})
    rows = {r["layer"]: r for r in partition_table(part)}
    assert rows["conv1"]["retained"] == 6 and rows["conv1"]["pruned"] == 2
    assert rows["conv2"]["pruned"] == 0


def test_apply_prune_nothing_is_identity():
    g = build_model("mobilenet-tiny")
    p = init_params(g, 0)
    g2, p2, _, mapping = apply_prune(g, p, None, PartitionResult.from_pruned(build_groups(g), set()))
    assert g2 == g
    assert all(np.array_equal(p[k], p2[k]) for k in p)
    assert all(m == {c: c for c in m} for m in mapping.values())


def test_apply_prune_slices_momentum_and_maps_indices():
    from ocsprune.nn import OptimizerState
    g = build_model("chain-tiny")
    p = init_params(g, 0)
    bufs = {k: np.arange(v.size, dtype=float).reshape(v.shape) for k, v in p.items()}
    groups = build_groups(g)
    part = PartitionResult.from_pruned(groups, {(0, 1), (0, 6)})
    g2, p2, st2, mapping = apply_prune(g, p, OptimizerState(buffers=bufs), part)
    kept = [0, 2, 3, 4, 5, 7]
    np.testing.assert_array_equal(st2.buffers["conv1.weight"], bufs["conv1.weight"][kept])
    np.testing.assert_array_equal(st2.buffers["conv2.weight"], bufs["conv2.weight"][:, kept])
    np.testing.assert_array_equal(p2["bn1.running_var"], p["bn1.running_var"][kept])
    assert mapping[0] == {old: new for new, old in enumerate(kept)}


def test_apply_prune_refuses_to_empty_a_group():
    g = build_model("chain-tiny")
    groups = build_groups(g)
    with pytest.raises(SurgeryError):
        apply_prune(g, init_params(g, 0), None,
                    PartitionResult.from_pruned(groups, {(1, c) for c in range(4)}))


def coupled_fixture():
    """Producer filters ranked one way, heavy consumer slices ranked the other way."""
    g = build_model("chain-tiny")
    p = init_params(g, 0)
    order = np.arange(8, dtype=float) + 1.0
    p["conv1.weight"] = np.ones_like(p["conv1.weight"]) * order[:, None, None, None] * 0.01
    p["conv2.weight"] = np.ones_like(p["conv2.weight"]) * order[::-1][None, :, None, None]
    return g, p


def test_group_and_conventional_saliency_rank_differently():
    g, p = coupled_fixture()
    groups = build_groups(g)
    a = global_partition(all_scores(p, groups, "group"), g, groups, 0.6)
    b = global_partition(all_scores(p, groups, "conventional"), g, groups, 0.6)
    assert a.prune != b.prune
