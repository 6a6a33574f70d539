"""Physical channel removal driven by pruning-group bundles."""
from __future__ import annotations

import numpy as np

from .graph import ModelGraph
from .nn.optim import OptimizerState


class SurgeryError(RuntimeError):
    pass


def _keep_index(kept, width):
    kept = np.asarray(kept, dtype=np.intp)
    return (kept[:, None] * width + np.arange(width)[None, :]).reshape(-1)


def apply_prune(graph: ModelGraph, params, opt_state: OptimizerState | None, partition):
    """Remove every pruned channel from params, momentum buffers and the graph.

    Returns ``(graph, params, opt_state, mapping)`` where ``mapping[group_id]``
    maps original channel index -> new index for the kept channels.
    """
    new_params = dict(params)
    new_bufs = dict(opt_state.buffers) if opt_state is not None else None
    updates: dict[str, dict] = {}
    mapping: dict[int, dict[int, int]] = {}
    for g in partition.groups:
        kept = partition.kept_channels(g)
        mapping[g.id] = {old: new for new, old in enumerate(kept)}
        if len(kept) == g.channels:
            continue
        if not kept:
            raise SurgeryError(f"group {g.id} would lose every channel")
        for t in g.templates:
            idx = _keep_index(kept, t.width)
            new_params[t.param] = np.take(new_params[t.param], idx, axis=t.axis)
            if new_bufs is not None and t.param in new_bufs:
                new_bufs[t.param] = np.take(new_bufs[t.param], idx, axis=t.axis)
        for owner in g.owners:
            node = graph.node(owner)
            if node.kind == "dense":
                updates[owner] = {"out_features": len(kept)}
            elif owner in g.depthwise:
                updates[owner] = {"out_channels": len(kept), "groups": len(kept)}
            else:
                updates[owner] = {"out_channels": len(kept)}
    try:
        new_graph = graph.with_attrs(updates)
    except ValueError as e:
        raise SurgeryError(f"pruned graph is inconsistent: {e}") from None
    expected = new_graph.param_shapes()
    for name, shape in expected.items():
        if tuple(new_params[name].shape) != shape:
            raise SurgeryError(
                f"parameter {name!r} has shape {tuple(new_params[name].shape)} after surgery, "
                f"expected {shape}")
    new_state = None
    if opt_state is not None:
        new_state = OptimizerState(opt_state.lr, opt_state.momentum, opt_state.weight_decay, new_bufs)
    return new_graph, new_params, new_state, mapping
