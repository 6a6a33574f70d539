"""Randomized finite-difference checks for every op kind."""
from __future__ import annotations

import numpy as np

from ocsprune.nn.ops import OPS
from oracles import numeric_grad, rel_error

OP_KINDS = ("conv2d", "batchnorm2d", "dense", "relu", "maxpool", "gap", "add", "flatten",
            "softmax_xent")
TRIALS = 24


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _case(kind, rng):
    """(inputs, attrs) for one random trial; inputs listed in op argument order."""
    if kind == "conv2d":
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(3, 7, size=2)
        k = int(rng.integers(1, 4))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        if min(h, w) + 2 * padding < k:
            k = 1
        groups = int(c) if rng.random() < 0.3 else 1
        o = int(c) * int(rng.integers(1, 3)) if groups > 1 else int(rng.integers(1, 5))
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c // groups, k, k))
        b = rng.standard_normal(o) if rng.random() < 0.5 else None
        return [x, wt, b], dict(stride=stride, padding=padding, groups=groups)
    if kind == "batchnorm2d":
        n, c = rng.integers(2, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 4, size=2)
        x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 2.0)
        train = bool(rng.random() < 0.75)
        attrs = dict(running_mean=rng.standard_normal(c), running_var=rng.uniform(0.5, 2, c),
                     train=train, eps=1e-5)
        return [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)], attrs
    if kind == "dense":
        n, fi, fo = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
        b = rng.standard_normal(fo) if rng.random() < 0.5 else None
        return [rng.standard_normal((n, fi)), rng.standard_normal((fo, fi)), b], {}
    if kind == "relu":
        shape = tuple(rng.integers(1, 4, size=int(rng.integers(2, 5))))
        return [_away_from_zero(rng, shape)], {}
    if kind == "maxpool":
        n, c = rng.integers(1, 3), rng.integers(1, 3)
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, k + 1))
        h, w = rng.integers(k, k + 4, size=2)
        size = n * c * h * w
        # well-separated values so no perturbation flips an argmax
        x = (rng.permutation(size) * 0.01 + rng.uniform(0, 1e-3, size)).reshape(n, c, h, w)
        return [x], dict(kernel=k, stride=s)
    if kind == "gap":
        return [rng.standard_normal(tuple(rng.integers(1, 4, size=4)))], {}
    if kind == "add":
        shape = tuple(rng.integers(1, 4, size=int(rng.integers(2, 5))))
        return [rng.standard_normal(shape), rng.standard_normal(shape)], {}
    if kind == "flatten":
        return [rng.standard_normal(tuple(rng.integers(1, 4, size=4)))], {}
    if kind == "softmax_xent":
        n, k = rng.integers(1, 6), rng.integers(2, 6)
        return [rng.standard_normal((n, k)) * 2], dict(labels=rng.integers(0, k, n))
    raise KeyError(kind)


def check_op(kind: str, seed: int) -> float:
    """Worst relative error between analytic and numeric input grads for one trial."""
    rng = np.random.default_rng([seed, OP_KINDS.index(kind)])
    inputs, attrs = _case(kind, rng)
    fwd, bwd = OPS[kind]
    out, ctx = fwd(*inputs, **attrs)
    proj = rng.standard_normal(np.shape(out))
    analytic = bwd(ctx, proj)

    def loss():
        return float(np.sum(fwd(*inputs, **attrs)[0] * proj))

    worst = 0.0
    for arr, g in zip(inputs, analytic):
        if arr is None:
            assert g is None
            continue
        worst = max(worst, rel_error(g, numeric_grad(loss, arr)))
    return worst
