"""Run a ModelGraph forward on a tape."""
from __future__ import annotations

import numpy as np

from .ops import ShapeError
from .tape import Tape


def forward(graph, params, batch, train: bool = True):
    """Forward pass; returns ``(logits, tape)``.

    In train mode batch-norm uses batch statistics and the tape's
    ``state_updates`` holds the new running statistics (momentum 0.1,
    unbiased variance); ``params`` is never modified.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(f"node 'input': batch shape {batch.shape} does not match "
                         f"[N, {', '.join(map(str, graph.input_shape))}]")
    expected = graph.param_shapes()
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"node {name.rsplit('.', 1)[0]!r}: missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"node {name.rsplit('.', 1)[0]!r}: parameter {name!r} has shape "
                             f"{tuple(params[name].shape)}, expected {shape}")

    tape = Tape()
    ids = {"input": tape.variable(batch)}
    for n in graph.nodes:
        xs = [ids[i] for i in n.inputs]
        try:
            if n.kind == "conv2d":
                w = tape.param(f"{n.id}.weight", params[f"{n.id}.weight"])
                b = tape.param(f"{n.id}.bias", params[f"{n.id}.bias"]) if n["bias"] else None
                out = tape.apply("conv2d", xs[0], w, b, stride=n["stride"],
                                 padding=n["padding"], groups=n["groups"])
            elif n.kind == "dense":
                w = tape.param(f"{n.id}.weight", params[f"{n.id}.weight"])
                b = tape.param(f"{n.id}.bias", params[f"{n.id}.bias"]) if n["bias"] else None
                out = tape.apply("dense", xs[0], w, b)
            elif n.kind == "batchnorm2d":
                g = tape.param(f"{n.id}.weight", params[f"{n.id}.weight"])
                b = tape.param(f"{n.id}.bias", params[f"{n.id}.bias"])
                rm, rv = params[f"{n.id}.running_mean"], params[f"{n.id}.running_var"]
                out = tape.apply("batchnorm2d", xs[0], g, b, running_mean=rm, running_var=rv,
                                 train=train, eps=n["eps"])
                if train:
                    ctx = tape.nodes[-1].ctx
                    m = n["momentum"]
                    cnt = ctx["count"]
                    unbiased = ctx["var"] * (cnt / (cnt - 1)) if cnt > 1 else ctx["var"]
                    tape.state_updates[f"{n.id}.running_mean"] = ((1 - m) * rm + m * ctx["mean"]).astype(rm.dtype)
                    tape.state_updates[f"{n.id}.running_var"] = ((1 - m) * rv + m * unbiased).astype(rv.dtype)
            elif n.kind == "maxpool":
                out = tape.apply("maxpool", xs[0], kernel=n["kernel"], stride=n["stride"])
            else:
                out = tape.apply(n.kind, *xs)
        except ShapeError as e:
            raise ShapeError(f"node {n.id!r}: {e}") from None
        ids[n.id] = out
    tape.output = ids[graph.output]
    return tape[tape.output], tape
