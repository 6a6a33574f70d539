"""Sub-network stability tracking with Jaccard similarity over epochs."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

SL_START = "SL_START"
STABLE = "STABLE"


def jaccard(sig_a: Mapping[str, frozenset], sig_b: Mapping[str, frozenset]) -> float:
    """Layer-averaged Jaccard similarity of two signatures (both-empty layers count as 1)."""
    if set(sig_a) != set(sig_b):
        raise ValueError(f"signatures cover different layers: {sorted(set(sig_a) ^ set(sig_b))}")
    if not sig_a:
        return 1.0
    total = 0.0
    for layer in sig_a:
        a, b = set(sig_a[layer]), set(sig_b[layer])
        union = len(a | b)
        total += 1.0 if union == 0 else len(a & b) / union
    return total / len(sig_a)


@dataclass
class StabilityState:
    window: int = 5          # r
    gap: int = 1             # i
    tau: float = 1e-4
    eps: float = 1e-3
    sl_mode: str = "auto"    # auto | fixed
    sl_fixed: int | None = None
    history: deque = field(default_factory=deque)   # (epoch, signature)
    j: dict = field(default_factory=dict)           # epoch -> J
    j_avg: dict = field(default_factory=dict)       # epoch -> J_avg
    sl_start: int | None = None
    stable_epoch: int | None = None

    def __post_init__(self):
        if self.window < 1 or self.gap < 1:
            raise ValueError("window and gap must be >= 1")
        if self.sl_mode not in ("auto", "fixed"):
            raise ValueError(f"unknown sl_mode {self.sl_mode!r}")
        if self.sl_mode == "fixed":
            if self.sl_fixed is None:
                raise ValueError("fixed sl_mode needs sl_fixed")
            self.sl_start = self.sl_fixed
        self.history = deque(self.history, maxlen=self.window + self.gap)

    def sl_active(self, epoch: int) -> bool:
        """Whether sparsity learning is running during ``epoch``."""
        if self.sl_start is None:
            return False
        return epoch >= self.sl_start if self.sl_mode == "fixed" else epoch > self.sl_start

    def to_dict(self) -> dict:
        return {
            "window": self.window, "gap": self.gap, "tau": self.tau, "eps": self.eps,
            "sl_mode": self.sl_mode, "sl_fixed": self.sl_fixed,
            "history": [[e, {k: sorted(v) for k, v in s.items()}] for e, s in self.history],
            "j": [[e, v] for e, v in self.j.items()],
            "j_avg": [[e, v] for e, v in self.j_avg.items()],
            "sl_start": self.sl_start, "stable_epoch": self.stable_epoch,
        }

    @classmethod
    def from_dict(cls, d) -> "StabilityState":
        st = cls(d["window"], d["gap"], d["tau"], d["eps"], d["sl_mode"], d["sl_fixed"])
        for e, s in d["history"]:
            st.history.append((e, {k: frozenset(v) for k, v in s.items()}))
        st.j = {e: v for e, v in d["j"]}
        st.j_avg = {e: v for e, v in d["j_avg"]}
        st.sl_start = d["sl_start"]
        st.stable_epoch = d["stable_epoch"]
        return st


def observe_similarity(state: StabilityState, epoch: int, j: float | None) -> list[str]:
    """Record J for ``epoch`` (None if not yet defined) and run the event checks."""
    if j is not None:
        state.j[epoch] = j
    r = state.window
    window = [state.j.get(epoch - k) for k in range(r)]
    if any(v is None for v in window):
        return []
    avg = sum(window) / r
    state.j_avg[epoch] = avg
    events = []
    if state.sl_start is None:
        prev = state.j_avg.get(epoch - r)
        if prev is not None and avg - prev <= state.tau:
            state.sl_start = epoch
            events.append(SL_START)
    elif state.stable_epoch is None and state.sl_active(epoch) and avg >= 1.0 - state.eps:
        state.stable_epoch = epoch
        events.append(STABLE)
    return events


def update(state: StabilityState, epoch: int, signature: Mapping[str, frozenset]) -> list[str]:
    """Feed the temporary sub-network of ``epoch``; returns events fired this epoch."""
    if state.history and epoch <= state.history[-1][0]:
        raise ValueError(f"epochs must increase: got {epoch} after {state.history[-1][0]}")
    signature = {k: frozenset(v) for k, v in signature.items()}
    earlier = dict(state.history).get(epoch - state.gap)
    state.history.append((epoch, signature))
    j = jaccard(earlier, signature) if earlier is not None else None
    return observe_similarity(state, epoch, j)
