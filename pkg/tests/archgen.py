"""Random architecture specs for property tests."""
from __future__ import annotations

import numpy as np


def random_spec(seed: int, residual: bool | None = None, depthwise: bool | None = None) -> dict:
    rng = np.random.default_rng(seed)
    c_in = int(rng.integers(1, 4))
    hw = hw0 = int(rng.integers(6, 10))
    classes = int(rng.integers(2, 5))
    layers: list[dict] = []
    count = 0

    def uid(prefix):
        nonlocal count
        count += 1
        return f"{prefix}{count}"

    def conv(out, k=3, stride=1, groups=1, bn=True, relu=True, inputs=None):
        cid = uid("conv")
        layer = {"id": cid, "kind": "conv2d", "out_channels": out, "kernel": k,
                 "padding": k // 2, "stride": stride, "groups": groups,
                 "bias": bool(rng.random() < 0.3)}
        if inputs:
            layer["inputs"] = inputs
        layers.append(layer)
        last = cid
        if bn:
            last = uid("bn")
            layers.append({"id": last, "kind": "batchnorm2d"})
        if relu:
            last_r = uid("relu")
            layers.append({"id": last_r, "kind": "relu"})
            last = last_r
        return last

    width = int(rng.integers(2, 6))
    last = conv(width)
    blocks = int(rng.integers(1, 4))
    want_res = rng.random() < 0.5 if residual is None else residual
    want_dw = rng.random() < 0.3 if depthwise is None else depthwise
    kinds = ["plain"] * blocks
    if want_res:
        kinds[int(rng.integers(0, blocks))] = "res"
    if want_dw:
        kinds.append("dw")
    for kind in kinds:
        if kind == "plain":
            width = int(rng.integers(2, 6))
            last = conv(width, k=int(rng.choice([1, 3])), relu=bool(rng.random() < 0.8))
        elif kind == "res":
            mid = int(rng.integers(2, 6))
            h = conv(mid)
            h = conv(width, relu=False)
            add = uid("add")
            layers.append({"id": add, "kind": "add", "inputs": [h, last]})
            last = uid("relu")
            layers.append({"id": last, "kind": "relu", "inputs": [add]})
        else:
            last = conv(width, k=3, groups=width)
        if rng.random() < 0.25 and hw >= 4:
            pid = uid("pool")
            layers.append({"id": pid, "kind": "maxpool", "kernel": 2})
            last = pid
            hw //= 2
    if rng.random() < 0.5:
        layers.append({"id": uid("gap"), "kind": "gap"})
    else:
        layers.append({"id": uid("flat"), "kind": "flatten"})
    if rng.random() < 0.4:
        layers.append({"id": uid("fc"), "kind": "dense", "out_features": int(rng.integers(3, 8))})
        layers.append({"id": uid("relu"), "kind": "relu"})
    layers.append({"id": "head", "kind": "dense", "out_features": classes})
    return {"name": f"random-{seed}", "input_shape": [c_in, hw0, hw0],
            "num_classes": classes, "layers": layers}
