"""Dependency analysis: partition parameters into structurally coupled pruning groups.

Channels are tracked as "spaces". Every conv2d (groups=1) and dense layer opens a
new space for its output; batch-norm, activations, pooling, flatten and depthwise
convs carry their input space through; a residual add merges the spaces of its
two operands. A pruning group is one merged space: removing channel ``c`` means
removing that output filter from every producer, the matching entries of every
batch-norm and depthwise conv riding on it, and the matching input slice of
every consumer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import INPUT, ModelGraph


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class ParamSlice:
    param: str
    axis: int
    start: int
    stop: int
    role: str

    def index(self):
        return (slice(None),) * self.axis + (slice(self.start, self.stop),)


@dataclass(frozen=True)
class SliceTemplate:
    """Shape of one coupled slice; channel ``c`` spans ``[c*width, (c+1)*width)`` on ``axis``."""

    param: str
    axis: int
    width: int
    role: str  # out | in | bn | bn_stat

    def at(self, c: int) -> ParamSlice:
        return ParamSlice(self.param, self.axis, c * self.width, (c + 1) * self.width, self.role)


@dataclass(frozen=True)
class PruningGroup:
    id: int
    channels: int
    templates: tuple[SliceTemplate, ...]
    owners: tuple[str, ...]
    depthwise: tuple[str, ...] = ()

    def bundle(self, c: int, include_stats: bool = True) -> tuple[ParamSlice, ...]:
        if not 0 <= c < self.channels:
            raise IndexError(f"channel {c} out of range for group {self.id} ({self.channels})")
        return tuple(t.at(c) for t in self.templates if include_stats or t.role != "bn_stat")

    def saliency_templates(self) -> tuple[SliceTemplate, ...]:
        return tuple(t for t in self.templates if t.role != "bn_stat")


@dataclass
class _Space:
    extent: int
    producers: list = field(default_factory=list)
    riders: list = field(default_factory=list)      # (node, kind)
    consumers: list = field(default_factory=list)   # (node, width)


def build_groups(graph: ModelGraph) -> list[PruningGroup]:
    """Prunable groups in order of their first owning node. Pure in ``graph``."""
    parent: dict[str, str] = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the earlier-created space as root for determinism
            if order[ra] > order[rb]:
                ra, rb = rb, ra
            parent[rb] = ra

    spaces: dict[str, _Space] = {}
    order: dict[str, int] = {}

    def open_space(name, extent):
        spaces[name] = _Space(extent)
        parent[name] = name
        order[name] = len(order)

    open_space(INPUT, graph.input_shape[0])
    # node id -> (space, features per channel)
    carried: dict[str, tuple[str, int]] = {INPUT: (INPUT, 1)}
    position = {n.id: i for i, n in enumerate(graph.nodes)}

    for n in graph.nodes:
        src, width = carried[n.inputs[0]]
        in_shape = graph.shapes[n.inputs[0]]
        if n.kind == "conv2d":
            c_in, groups = in_shape[0], n["groups"]
            if groups == 1:
                spaces[src].consumers.append((n.id, width))
                open_space(n.id, n["out_channels"])
                spaces[n.id].producers.append(n.id)
                carried[n.id] = (n.id, 1)
            elif groups == c_in == n["out_channels"]:
                spaces[src].riders.append((n.id, "depthwise"))
                carried[n.id] = (src, 1)
            else:
                raise GroupingError(
                    f"node {n.id!r}: grouped conv with groups={groups} over {c_in} channels "
                    "is not a supported coupling pattern")
        elif n.kind == "dense":
            spaces[src].consumers.append((n.id, width))
            open_space(n.id, n["out_features"])
            spaces[n.id].producers.append(n.id)
            carried[n.id] = (n.id, 1)
        elif n.kind == "batchnorm2d":
            spaces[src].riders.append((n.id, "bn"))
            carried[n.id] = (src, width)
        elif n.kind in ("relu", "maxpool", "gap"):
            carried[n.id] = (src, width)
        elif n.kind == "flatten":
            spatial = int(np.prod(in_shape[1:])) if len(in_shape) == 3 else 1
            carried[n.id] = (src, width * spatial)
        elif n.kind == "add":
            (a, wa), (b, wb) = carried[n.inputs[0]], carried[n.inputs[1]]
            if wa != wb or spaces[find(a)].extent != spaces[find(b)].extent:
                raise GroupingError(f"node {n.id!r}: residual add joins incompatible channel layouts")
            union(a, b)
            carried[n.id] = (a, wa)
        else:
            raise GroupingError(f"node {n.id!r}: unsupported kind {n.kind!r}")

    fixed = {find(INPUT), find(carried[graph.output][0])}
    members: dict[str, list[str]] = {}
    for name in sorted(spaces, key=order.get):
        members.setdefault(find(name), []).append(name)

    groups = []
    for root, names in members.items():
        if root in fixed:
            continue
        templates: list[SliceTemplate] = []
        owners: list[str] = []
        depthwise: list[str] = []
        for name in names:
            sp = spaces[name]
            for p in sp.producers:
                owners.append(p)
                templates.append(SliceTemplate(f"{p}.weight", 0, 1, "out"))
                if graph.node(p)["bias"]:
                    templates.append(SliceTemplate(f"{p}.bias", 0, 1, "out"))
        for name in names:
            sp = spaces[name]
            for r, kind in sp.riders:
                if kind == "depthwise":
                    owners.append(r)
                    depthwise.append(r)
                    templates.append(SliceTemplate(f"{r}.weight", 0, 1, "out"))
                    if graph.node(r)["bias"]:
                        templates.append(SliceTemplate(f"{r}.bias", 0, 1, "out"))
                else:
                    templates += [SliceTemplate(f"{r}.weight", 0, 1, "bn"),
                                  SliceTemplate(f"{r}.bias", 0, 1, "bn"),
                                  SliceTemplate(f"{r}.running_mean", 0, 1, "bn_stat"),
                                  SliceTemplate(f"{r}.running_var", 0, 1, "bn_stat")]
        for name in names:
            for c, width in spaces[name].consumers:
                templates.append(SliceTemplate(f"{c}.weight", 1, width, "in"))
        owners.sort(key=position.get)
        groups.append((position[owners[0]], owners, depthwise, templates, spaces[root].extent))

    groups.sort(key=lambda g: g[0])
    return [PruningGroup(i, extent, tuple(t), tuple(o), tuple(sorted(d, key=position.get)))
            for i, (_, o, d, t, extent) in enumerate(groups)]


def group_table(groups: list[PruningGroup]) -> str:
    """Human-readable dump: group id -> member slices."""
    lines = []
    for g in groups:
        lines.append(f"group {g.id}: {g.channels} channels, owners={','.join(g.owners)}")
        for t in g.templates:
            lines.append(f"  {t.param} axis={t.axis} width={t.width} role={t.role}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EquivalenceReport:
    group: int
    channel: int
    max_abs_diff: float
    tolerance: float
    passed: bool
    detail: str = ""


def verify_group(graph: ModelGraph, params, group: PruningGroup, channel: int,
                 batch=None, tolerance: float | None = None, train: bool = False) -> EquivalenceReport:
    """Zero the channel's bundle vs. physically remove it; logits must agree."""
    from .nn import forward
    from .saliency import PartitionResult
    from .surgery import apply_prune

    dtype = next(iter(params.values())).dtype
    if tolerance is None:
        tolerance = 1e-10 if dtype == np.float64 else 1e-5
    if batch is None:
        rng = np.random.default_rng(1234)
        batch = rng.standard_normal((4, *graph.input_shape)).astype(dtype)

    zeroed = {k: v.copy() for k, v in params.items()}
    for s in group.bundle(channel):
        zeroed[s.param][s.index()] = 0
    ref, _ = forward(graph, zeroed, batch, train=train)

    partition = PartitionResult.from_pruned([group], {(group.id, channel)})
    try:
        pruned_graph, pruned_params, _, _ = apply_prune(graph, params, None, partition)
        out, _ = forward(pruned_graph, pruned_params, batch, train=train)
    except Exception as e:  # any surgery/shape failure means the bundle is wrong
        return EquivalenceReport(group.id, channel, float("inf"), tolerance, False,
                                 f"removal failed: {e}")
    diff = float(np.max(np.abs(out - ref)))
    ok = diff <= tolerance
    detail = "" if ok else f"group {group.id} channel {channel}: max |diff| {diff:.3e} > {tolerance:g}"
    return EquivalenceReport(group.id, channel, diff, tolerance, ok, detail)
