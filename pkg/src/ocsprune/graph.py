"""Architecture IR: declarative network specs, shape inference, init and MAC counting.

An architecture spec is a key-value tree (a dict, or a TOML document) of the form::

    name = "tiny"
    input_shape = [3, 16, 16]
    num_classes = 10

    [[layers]]
    id = "conv1"
    kind = "conv2d"
    out_channels = 8
    kernel = 3
    padding = 1

    [[layers]]
    id = "bn1"
    kind = "batchnorm2d"

Each layer consumes the previous layer unless it lists ``inputs``; ``add``
layers must list exactly two. The last layer is the network output and must
produce ``num_classes`` features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np

from .nn.ops import ShapeError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

KINDS = ("conv2d", "batchnorm2d", "dense", "relu", "maxpool", "gap", "add", "flatten")
INPUT = "input"

_ATTR_DEFAULTS = {
    "conv2d": dict(kernel=3, stride=1, padding=0, groups=1, bias=False),
    "dense": dict(bias=True),
    "maxpool": dict(kernel=2, stride=None),
    "batchnorm2d": dict(eps=1e-5, momentum=0.1),
}
_REQUIRED = {"conv2d": ("out_channels",), "dense": ("out_features",)}


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.attrs[key]

    @property
    def out_channels(self) -> int | None:
        if self.kind == "conv2d":
            return self.attrs["out_channels"]
        if self.kind == "dense":
            return self.attrs["out_features"]
        return None


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    nodes: tuple[LayerNode, ...]
    shapes: Mapping[str, tuple[int, ...]]

    @property
    def output(self) -> str:
        return self.nodes[-1].id

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self, node_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def in_shape(self, node: LayerNode) -> tuple[int, ...]:
        return self.shapes[node.inputs[0]]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected shape of every tensor (trainable and buffer) keyed by name."""
        out = {}
        for n in self.nodes:
            if n.kind == "conv2d":
                c = self.in_shape(n)[0]
                k = n["kernel"]
                out[f"{n.id}.weight"] = (n["out_channels"], c // n["groups"], k, k)
                if n["bias"]:
                    out[f"{n.id}.bias"] = (n["out_channels"],)
            elif n.kind == "dense":
                out[f"{n.id}.weight"] = (n["out_features"], self.in_shape(n)[0])
                if n["bias"]:
                    out[f"{n.id}.bias"] = (n["out_features"],)
            elif n.kind == "batchnorm2d":
                c = self.in_shape(n)[0]
                for suffix in ("weight", "bias", "running_mean", "running_var"):
                    out[f"{n.id}.{suffix}"] = (c,)
        return out

    def trainable(self) -> list[str]:
        return [k for k in self.param_shapes() if not k.split(".")[-1].startswith("running_")]

    def to_spec(self) -> dict:
        layers = []
        for n in self.nodes:
            d = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs)}
            d.update({k: v for k, v in n.attrs.items() if v is not None})
            layers.append(d)
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": layers}

    def with_attrs(self, updates: Mapping[str, Mapping[str, Any]]) -> "ModelGraph":
        """Copy of the graph with per-node attribute overrides, shapes re-inferred."""
        nodes = tuple(
            replace(n, attrs=MappingProxyType({**n.attrs, **updates[n.id]})) if n.id in updates else n
            for n in self.nodes)
        return _finalize(self.name, self.input_shape, self.num_classes, nodes)


def load_spec(source: str | Path | Mapping) -> dict:
    """Resolve a spec from a mapping, a TOML path, or a built-in architecture name."""
    if isinstance(source, Mapping):
        return dict(source)
    path = Path(source)
    if path.suffix != ".toml" and not path.exists():
        path = Path(__file__).parent / "archs" / f"{source}.toml"
    if not path.exists():
        raise GraphError(f"unknown architecture {source!r}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def builtin_architectures() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "archs").glob("*.toml"))


def build_model(spec: str | Path | Mapping) -> ModelGraph:
    spec = load_spec(spec)
    try:
        input_shape = tuple(int(v) for v in spec["input_shape"])
        num_classes = int(spec["num_classes"])
        raw_layers = spec["layers"]
    except KeyError as e:
        raise GraphError(f"architecture spec missing key {e.args[0]!r}") from None
    if len(input_shape) != 3:
        raise GraphError("input_shape must be [channels, height, width]")

    nodes = []
    prev = INPUT
    seen = {INPUT}
    for i, layer in enumerate(raw_layers):
        layer = dict(layer)
        node_id = str(layer.pop("id", f"{layer.get('kind', 'layer')}{i}"))
        kind = layer.pop("kind", None)
        if kind not in KINDS:
            raise GraphError(f"node {node_id!r}: unknown kind {kind!r}")
        if node_id in seen:
            raise GraphError(f"duplicate node id {node_id!r}")
        seen.add(node_id)
        inputs = layer.pop("inputs", None)
        inputs = (prev,) if inputs is None else tuple(inputs) if not isinstance(inputs, str) else (inputs,)
        want = 2 if kind == "add" else 1
        if len(inputs) != want:
            raise GraphError(f"node {node_id!r} ({kind}) needs exactly {want} input(s), got {len(inputs)}")
        for req in _REQUIRED.get(kind, ()):
            if req not in layer:
                raise GraphError(f"node {node_id!r}: missing attribute {req!r}")
        attrs = {**_ATTR_DEFAULTS.get(kind, {}), **layer}
        nodes.append(LayerNode(node_id, kind, inputs, MappingProxyType(attrs)))
        prev = node_id

    ids = {n.id for n in nodes} | {INPUT}
    for n in nodes:
        for src in n.inputs:
            if src not in ids:
                raise GraphError(f"node {n.id!r} references unknown input {src!r}")
    ts = TopologicalSorter({n.id: set(n.inputs) - {INPUT} for n in nodes})
    try:
        order = list(ts.static_order())
    except CycleError as e:
        raise GraphError(f"cycle in architecture: {e.args[1]}") from None
    # keep declaration order when it is already topological; otherwise reorder
    pos = {nid: i for i, nid in enumerate(order)}
    declared_ok = all(pos.get(src, -1) < pos[n.id] for n in nodes for src in n.inputs if src != INPUT)
    if not declared_ok:
        by_id = {n.id: n for n in nodes}
        last = nodes[-1].id
        nodes = [by_id[i] for i in order if i != last] + [by_id[last]]
    return _finalize(str(spec.get("name", "model")), input_shape, num_classes, tuple(nodes))


def infer_shapes(nodes, input_shape) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {INPUT: tuple(input_shape)}
    for n in nodes:
        src = shapes[n.inputs[0]]
        try:
            shapes[n.id] = _out_shape(n, src, [shapes[i] for i in n.inputs])
        except ShapeError as e:
            raise ShapeError(f"node {n.id!r}: {e}") from None
    return shapes


def _out_shape(n: LayerNode, src, all_in):
    if n.kind in ("conv2d", "batchnorm2d", "maxpool", "gap") and len(src) != 3:
        raise ShapeError(f"{n.kind} needs a CHW input, got {src}")
    if n.kind == "conv2d":
        c, h, w = src
        k, s, p, g = n["kernel"], n["stride"], n["padding"], n["groups"]
        o = n["out_channels"]
        if o < 1 or c % g or o % g:
            raise ShapeError(f"channels {c}->{o} not divisible by groups={g}")
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {k} does not fit input {h}x{w}")
        return (o, ho, wo)
    if n.kind in ("batchnorm2d", "relu"):
        return src
    if n.kind == "maxpool":
        c, h, w = src
        k = n["kernel"]
        s = n["stride"] or k
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool {k} does not fit input {h}x{w}")
        return (c, ho, wo)
    if n.kind == "gap":
        return (src[0],)
    if n.kind == "flatten":
        return (math.prod(src),)
    if n.kind == "dense":
        if len(src) != 1:
            raise ShapeError(f"dense needs a flat input, got {src}")
        if n["out_features"] < 1:
            raise ShapeError("dense needs out_features >= 1")
        return (n["out_features"],)
    if n.kind == "add":
        a, b = all_in
        if a != b:
            raise ShapeError(f"shape conflict at residual add: {a} vs {b}")
        return a
    raise ShapeError(f"unsupported kind {n.kind}")


def _finalize(name, input_shape, num_classes, nodes) -> ModelGraph:
    shapes = infer_shapes(nodes, input_shape)
    out = shapes[nodes[-1].id]
    if out != (num_classes,):
        raise ShapeError(f"network output {nodes[-1].id!r} has shape {out}, expected ({num_classes},)")
    return ModelGraph(name, tuple(input_shape), num_classes, tuple(nodes), MappingProxyType(shapes))


def init_params(graph: ModelGraph, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes().items():
        suffix = name.rsplit(".", 1)[1]
        node = graph.node(name.rsplit(".", 1)[0])
        if suffix == "weight" and node.kind in ("conv2d", "dense"):
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif suffix in ("weight", "running_var"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


@dataclass(frozen=True)
class FlopsReport:
    per_node: Mapping[str, int]
    total: int
    ratio: float = 1.0


def _node_macs(n: LayerNode, shapes) -> int:
    if n.kind == "conv2d":
        c_in = shapes[n.inputs[0]][0]
        o, ho, wo = shapes[n.id]
        k = n["kernel"]
        return o * (c_in // n["groups"]) * k * k * ho * wo
    if n.kind == "dense":
        return shapes[n.id][0] * shapes[n.inputs[0]][0]
    return 0


def count_flops(graph: ModelGraph, input_resolution=None, baseline: FlopsReport | None = None) -> FlopsReport:
    """Multiply-accumulate counts per node. BN, activations and pooling count as zero."""
    shapes = graph.shapes
    if input_resolution is not None:
        h, w = input_resolution
        try:
            shapes = infer_shapes(graph.nodes, (graph.input_shape[0], h, w))
        except ShapeError as e:
            raise ShapeError(f"resolution {h}x{w} incompatible with graph: {e}") from None
        if shapes[graph.output] != (graph.num_classes,):
            raise ShapeError(f"resolution {h}x{w} incompatible with graph output")
    per_node = {n.id: _node_macs(n, shapes) for n in graph.nodes}
    total = sum(per_node.values())
    ratio = total / baseline.total if baseline is not None and baseline.total else 1.0
    return FlopsReport(MappingProxyType(per_node), total, ratio)


def count_params(graph: ModelGraph) -> int:
    return sum(math.prod(s) for k, s in graph.param_shapes().items() if not k.split(".")[-1].startswith("running_"))
