"""Growing structured sparsity regularization on the current pruning candidates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PenaltyState:
    lam0: float = 1e-4
    delta: float = 1e-4
    interval: int = 1
    t_sl_start: int = 0
    lam: float | None = None
    t: int | None = None

    def to_dict(self):
        return dict(lam0=self.lam0, delta=self.delta, interval=self.interval,
                    t_sl_start=self.t_sl_start, lam=self.lam, t=self.t)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def update_penalty(state: PenaltyState, t: int) -> float:
    """lam_t = lam_{t-1} + delta * floor((t - t_sl_start) / interval), lam at t_sl_start = lam0.

    Epochs skipped since the last call are iterated through.
    """
    if t < state.t_sl_start:
        raise ValueError(f"epoch {t} precedes sparsity-learning start {state.t_sl_start}")
    if state.t is None or state.lam is None:
        state.t, state.lam = state.t_sl_start, state.lam0
    if t < state.t:
        raise ValueError(f"penalty epochs must not go backwards ({t} < {state.t})")
    while state.t < t:
        state.t += 1
        state.lam = state.lam + state.delta * ((state.t - state.t_sl_start) // state.interval)
    return state.lam


def penalty_closed_form(lam0: float, delta: float, interval: int, t_sl_start: int, t: int) -> float:
    steps = sum((k - t_sl_start) // interval for k in range(t_sl_start + 1, t + 1))
    return lam0 + delta * steps


def _pruned_slices(group, channels):
    """(template, flat index array along its axis) for trainable slices of pruned channels."""
    chans = np.asarray(sorted(channels), dtype=np.intp)
    for t in group.saliency_templates():
        idx = (chans[:, None] * t.width + np.arange(t.width)[None, :]).reshape(-1)
        yield t, chans, idx


def _by_group(prune):
    out: dict[int, list[int]] = {}
    for gid, c in prune:
        out.setdefault(gid, []).append(c)
    return out


def penalty_loss_and_grads(params, groups, prune, lam: float):
    """lam * sum of L2 norms of every pruned-channel slice, and its gradient.

    Zero-norm slices get a zero subgradient. Batch-norm running statistics are
    not trainable and are left out.
    """
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    if lam == 0 or not prune:
        return 0.0, grads
    by_group = _by_group(prune)
    for g in groups:
        chans = by_group.get(g.id)
        if not chans:
            continue
        for t, ch, idx in _pruned_slices(g, chans):
            w = params[t.param]
            moved = np.moveaxis(w, t.axis, 0)
            sl = moved[idx].reshape(len(ch), t.width, *moved.shape[1:])
            flat = sl.reshape(len(ch), -1)
            norms = np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
            total += lam * float(norms.sum())
            scale = np.divide(lam, norms, out=np.zeros_like(norms), where=norms > 0)
            gsl = (flat * scale[:, None].astype(w.dtype)).reshape(len(ch) * t.width, *moved.shape[1:])
            gfull = grads.get(t.param)
            if gfull is None:
                gfull = np.zeros_like(w)
                grads[t.param] = gfull
            np.moveaxis(gfull, t.axis, 0)[idx] += gsl
    return total, grads


def direct_shrink(params, groups, prune, lam: float, lr: float):
    """Multiply every pruned-channel slice by (1 - lam*lr); everything else untouched."""
    factor = 1.0 - lam * lr
    if lam * lr >= 1:
        raise ValueError(f"lam*lr = {lam * lr} >= 1 would flip weight signs")
    if not prune or factor == 1.0:
        return dict(params)
    new = dict(params)
    by_group = _by_group(prune)
    for g in groups:
        chans = by_group.get(g.id)
        if not chans:
            continue
        for t, ch, idx in _pruned_slices(g, chans):
            w = new[t.param]
            if w is params[t.param]:
                w = w.copy()
                new[t.param] = w
            view = np.moveaxis(w, t.axis, 0)
            view[idx] = view[idx] * w.dtype.type(factor)
    return new


def group_norms(params, groups) -> list[tuple[int, int, float]]:
    """(group, channel, L2 norm over all trainable slices) for a norm histogram."""
    rows = []
    for g in groups:
        sq = np.zeros(g.channels)
        for t in g.saliency_templates():
            moved = np.moveaxis(params[t.param], t.axis, 0).reshape(g.channels, -1).astype(np.float64)
            sq += np.sum(moved * moved, axis=1)
        rows += [(g.id, c, math.sqrt(v)) for c, v in enumerate(sq)]
    return rows
