"""Group saliency scoring, FLOPs-constrained global partitioning and sub-network signatures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import ModelGraph, count_flops
from .groups import ParamSlice, PruningGroup


class InfeasibleRatio(ValueError):
    pass


def score_channel(params: Mapping[str, np.ndarray], bundle: Sequence[ParamSlice]) -> float:
    """Mean over slices of ||w||_2 / sqrt(|w|)."""
    total = 0.0
    for s in bundle:
        w = params[s.param][s.index()]
        total += float(np.sqrt(np.sum(np.square(w, dtype=np.float64)))) / math.sqrt(w.size)
    return total / len(bundle)


def _per_channel_norms(arr: np.ndarray, axis: int, width: int, channels: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0).reshape(channels, -1).astype(np.float64)
    return np.sqrt(np.sum(moved * moved, axis=1)), moved.shape[1]


def group_scores(params, group: PruningGroup, mode: str = "group") -> np.ndarray:
    """Per-channel scores for one group (vectorised ``score_channel``).

    ``mode="group"`` uses every coupled slice; ``mode="conventional"`` only the
    owning layers' own filters.
    """
    if mode == "group":
        templates = group.saliency_templates()
    elif mode == "conventional":
        templates = [t for t in group.templates if t.role == "out" and t.param.endswith(".weight")]
    else:
        raise ValueError(f"unknown saliency mode {mode!r}")
    acc = np.zeros(group.channels)
    for t in templates:
        norms, n = _per_channel_norms(params[t.param], t.axis, t.width, group.channels)
        acc += norms / math.sqrt(n)
    return acc / len(templates)


def all_scores(params, groups: Iterable[PruningGroup], mode: str = "group") -> dict[int, np.ndarray]:
    return {g.id: group_scores(params, g, mode) for g in groups}


@dataclass(frozen=True)
class PartitionResult:
    groups: tuple[PruningGroup, ...]
    prune: frozenset[tuple[int, int]]
    ratio: float = 1.0
    threshold: float = float("-inf")

    @classmethod
    def from_pruned(cls, groups, prune, ratio=float("nan")):
        return cls(tuple(groups), frozenset(prune), ratio)

    @property
    def keep(self) -> frozenset[tuple[int, int]]:
        return frozenset((g.id, c) for g in self.groups for c in range(g.channels)
                         if (g.id, c) not in self.prune)

    def pruned_channels(self, gid: int) -> list[int]:
        return sorted(c for g, c in self.prune if g == gid)

    def kept_channels(self, group: PruningGroup) -> list[int]:
        return [c for c in range(group.channels) if (group.id, c) not in self.prune]


class FlopsModel:
    """MAC count as a function of per-group kept widths (no graph rebuild)."""

    def __init__(self, graph: ModelGraph, groups: Sequence[PruningGroup]):
        self.graph = graph
        base = count_flops(graph)
        self.baseline = base.total
        owner_group = {}
        for g in groups:
            for o in g.owners:
                owner_group[o] = g.id
        # group id (or None for fixed) of the channel space each node emits
        self._out_gid = {}
        for n in graph.nodes:
            if n.kind in ("conv2d", "dense"):
                if n.id in owner_group:
                    self._out_gid[n.id] = owner_group[n.id]
                else:
                    self._out_gid[n.id] = None
            else:
                self._out_gid[n.id] = self._out_gid.get(n.inputs[0]) if n.inputs[0] != "input" else None
        self._terms = []
        for n in graph.nodes:
            if n.kind not in ("conv2d", "dense"):
                continue
            src = n.inputs[0]
            in_gid = None if src == "input" else self._out_gid.get(src)
            out_gid = self._out_gid[n.id]
            if n.kind == "conv2d":
                c_in = graph.shapes[src][0]
                o, ho, wo = graph.shapes[n.id]
                k = n["kernel"]
                depthwise = n["groups"] > 1
                if depthwise:
                    # one input channel per output channel: cost scales with the width once
                    self._terms.append((k * k * ho * wo, out_gid, None, o, 1))
                else:
                    self._terms.append((k * k * ho * wo, out_gid, in_gid, o, c_in))
            else:
                in_feat = graph.shapes[src][0]
                spatial = 1
                if in_gid is not None:
                    chans = next(g.channels for g in groups if g.id == in_gid)
                    spatial = in_feat // chans
                self._terms.append((spatial, out_gid, in_gid, n["out_features"],
                                    in_feat // spatial))

    def macs(self, widths: Mapping[int, int]) -> int:
        total = 0
        for unit, og, ig, o, c in self._terms:
            ow = widths.get(og, o) if og is not None else o
            cw = widths.get(ig, c) if ig is not None else c
            total += unit * ow * cw
        return total

    def ratio(self, widths: Mapping[int, int]) -> float:
        return self.macs(widths) / self.baseline


def _candidate_order(scores: Mapping[int, np.ndarray], groups: Sequence[PruningGroup]):
    """Channels in pruning order, excluding each group's last (floor of one kept)."""
    items = []
    for g in groups:
        s = scores[g.id]
        ranked = sorted(range(g.channels), key=lambda c: (s[c], c))
        items += [(float(s[c]), g.id, c) for c in ranked[:-1]]
    items.sort()
    return items


def global_partition(scores: Mapping[int, np.ndarray], graph: ModelGraph,
                     groups: Sequence[PruningGroup], alpha: float,
                     tolerance: float = 0.01, max_iter: int = 64) -> PartitionResult:
    """Prune the lowest-scoring channels globally while FLOPs-keep ratio stays >= alpha.

    Channels are ordered by (score, group id, channel index); binary search finds
    the longest prefix whose removal keeps the ratio at or above ``alpha``.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    groups = tuple(groups)
    fm = FlopsModel(graph, groups)
    order = _candidate_order(scores, groups)
    full = {g.id: g.channels for g in groups}

    def ratio_for(k):
        w = dict(full)
        for _, gid, _ in order[:k]:
            w[gid] -= 1
        return fm.ratio(w)

    if alpha >= 1.0:
        return PartitionResult(groups, frozenset(), 1.0, order[0][0] if order else float("-inf"))
    lo, hi = 0, len(order)  # invariant: ratio_for(lo) >= alpha
    r_hi = ratio_for(hi)
    if r_hi >= alpha:
        if r_hi > alpha + tolerance:
            binding = [g.id for g in groups]
            raise InfeasibleRatio(
                f"FLOPs ratio {r_hi:.4f} at one channel per group still exceeds "
                f"alpha={alpha} + tol; binding groups: {binding}")
        lo = hi
    else:
        it = 0
        while hi - lo > 1 and it < max_iter:
            mid = (lo + hi) // 2
            if ratio_for(mid) >= alpha:
                lo = mid
            else:
                hi = mid
            it += 1
    prune = frozenset((gid, c) for _, gid, c in order[:lo])
    theta = order[lo][0] if lo < len(order) else float("inf")
    return PartitionResult(groups, prune, ratio_for(lo), theta)


Signature = dict  # node id -> frozenset of retained original channel indices


def signature_of(partition: PartitionResult, graph: ModelGraph | None = None) -> dict[str, frozenset]:
    sig = {}
    for g in partition.groups:
        kept = frozenset(partition.kept_channels(g))
        for node in g.owners:
            sig[node] = kept
    return sig


def partition_table(partition: PartitionResult) -> list[dict]:
    """Per-layer retained/pruned counts."""
    rows = []
    for g in partition.groups:
        pruned = len(partition.pruned_channels(g.id))
        for node in g.owners:
            rows.append({"layer": node, "group": g.id, "total": g.channels,
                         "retained": g.channels - pruned, "pruned": pruned})
    return rows
