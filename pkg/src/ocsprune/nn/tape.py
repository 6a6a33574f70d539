"""Reverse-mode tape: records op applications and replays them backwards."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .ops import OPS


class TapeError(RuntimeError):
    pass


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    ctx: dict[str, Any]


def _fingerprint(a: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(a).view(np.uint8))


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    values: dict[int, np.ndarray] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    output: int | None = None
    # running statistics produced by train-mode batch-norm, keyed by param name
    state_updates: dict[str, np.ndarray] = field(default_factory=dict)
    _refs: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    _next: int = 0

    def _new(self, value) -> int:
        i = self._next
        self._next += 1
        self.values[i] = value
        return i

    def variable(self, value) -> int:
        return self._new(np.asarray(value))

    def param(self, name: str, value) -> int:
        value = np.asarray(value)
        if name in self.params:
            return self.params[name]
        i = self._new(value)
        self.params[name] = i
        self._refs[name] = (value, _fingerprint(value))
        return i

    def apply(self, kind: str, *inputs: int | None, **attrs) -> int:
        fwd, _ = OPS[kind]
        args = [None if i is None else self.values[i] for i in inputs]
        out, ctx = fwd(*args, **attrs)
        o = self._new(out)
        self.nodes.append(TapeNode(kind, tuple(inputs), o, ctx))
        self.output = o
        return o

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]


def backward(tape: Tape, loss_grad) -> dict[str, np.ndarray]:
    """Propagate ``loss_grad`` (d loss / d tape output) to every registered param.

    Raises TapeError if any parameter array was modified in place after it
    was recorded.
    """
    for name, (arr, fp) in tape._refs.items():
        if _fingerprint(arr) != fp:
            raise TapeError(f"parameter {name!r} was mutated after the forward pass")
    out = tape.output
    if out is None:
        raise TapeError("empty tape")
    grads: dict[int, np.ndarray] = {out: np.asarray(loss_grad, dtype=tape.values[out].dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        in_grads = OPS[node.kind][1](node.ctx, g)
        for i, gi in zip(node.inputs, in_grads):
            if i is None or gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    result = {}
    for name, i in tape.params.items():
        g = grads.get(i)
        result[name] = np.zeros_like(tape.values[i]) if g is None else np.asarray(g).reshape(tape.values[i].shape)
    return result
