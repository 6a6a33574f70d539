from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum and coupled weight decay."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState) -> dict[str, np.ndarray]:
    """Return a new parameter mapping; only names present in ``grads`` move.

    v <- m*v + g + wd*w ;  w <- w - lr*v
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    new = dict(params)
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        d = g + state.weight_decay * w if state.weight_decay else g
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(w)
        buf = state.momentum * buf + d
        state.buffers[name] = buf.astype(w.dtype, copy=False)
        new[name] = (w - state.lr * buf).astype(w.dtype, copy=False)
    return new
