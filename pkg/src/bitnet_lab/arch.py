"""Block and network descriptions, and their lowering to an explicit layer DAG.

A network is described declaratively (:class:`NetworkSpec`) and lowered with
:func:`lower` into a flat, topologically ordered tuple of :class:`LayerNode`.
Node ids are assigned by a counter in emission order, so lowering the same
spec twice yields identical graphs and every node's inputs precede it.
"""

from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import ShapeError, SpecError

NODE_KINDS = (
    "input",
    "conv3x3",
    "conv7x7",
    "conv1x1",
    "dense",
    "batchnorm",
    "relu",
    "maxpool3x3s2",
    "concat_channels",
    "global_avg_pool",
    "add_residual",
    "classifier",
)
CONV_KINDS = ("conv3x3", "conv7x7", "conv1x1")
SPATIAL_KINDS = CONV_KINDS + ("maxpool3x3s2",)
TRAINABLE_KINDS = CONV_KINDS + ("dense", "classifier", "batchnorm")
KERNEL_SIZE = {"conv3x3": 3, "conv7x7": 7, "conv1x1": 1}
SHORTCUTS = ("none", "identity", "projection")
BLOCK_OPS = ("conv3x3", "dense")


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    inputs: tuple[int, ...] = ()
    bias: bool = False
    tag: str = ""

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class BitBlockSpec:
    """Binary-tree block: ``depth_K`` levels, each halving the width.

    ``op`` selects the per-branch layer: ``conv3x3`` for image nets or
    ``dense`` for the fully connected analog.
    """

    width_D: int
    depth_K: int
    stride_s: int = 1
    in_channels_c: int = 0
    op: str = "conv3x3"

    kind = "bit"

    def violations(self) -> list[str]:
        out = []
        for name in ("width_D", "depth_K", "stride_s", "in_channels_c"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                out.append(f"bit block {name} must be a positive integer, got {v!r}")
        if out:
            return out
        if self.width_D % (2 ** self.depth_K):
            out.append(
                f"bit block width {self.width_D} not divisible by 2^{self.depth_K}"
            )
        if self.op not in BLOCK_OPS:
            out.append(f"bit block op must be one of {BLOCK_OPS}, got {self.op!r}")
        elif self.op == "dense" and self.stride_s != 1:
            out.append("dense bit block cannot be strided")
        return out

    def repeat(self) -> BitBlockSpec:
        """Spec for the 2nd..n-th block of a group."""
        return replace(self, stride_s=1, in_channels_c=self.width_D)


@dataclass(frozen=True)
class ConvenBlockSpec:
    width_D: int
    depth_K: int
    stride_s: int = 1
    in_channels_c: int = 0
    shortcut: str = "none"
    op: str = "conv3x3"

    kind = "conven"

    def violations(self) -> list[str]:
        out = []
        for name in ("width_D", "depth_K", "stride_s", "in_channels_c"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                out.append(f"conven block {name} must be a positive integer, got {v!r}")
        if out:
            return out
        if self.shortcut not in SHORTCUTS:
            out.append(f"unknown shortcut {self.shortcut!r}")
        if self.op not in BLOCK_OPS:
            out.append(f"conven block op must be one of {BLOCK_OPS}, got {self.op!r}")
        elif self.op == "dense" and self.stride_s != 1:
            out.append("dense conven block cannot be strided")
        reshapes = self.in_channels_c != self.width_D or self.stride_s > 1
        if self.shortcut == "projection" and not reshapes:
            out.append("projection shortcut requires a channel or stride change")
        if self.shortcut == "identity" and reshapes:
            out.append(
                f"identity shortcut needs equal shapes (c={self.in_channels_c}, "
                f"D={self.width_D}, s={self.stride_s})"
            )
        return out

    def repeat(self) -> ConvenBlockSpec:
        shortcut = "none" if self.shortcut == "none" else "identity"
        return replace(self, stride_s=1, in_channels_c=self.width_D, shortcut=shortcut)


BlockSpec = BitBlockSpec | ConvenBlockSpec


@dataclass(frozen=True)
class StemLayer:
    """Template for a stem layer. Conv and dense templates lower to conv, batchnorm, relu."""

    kind: str
    out_channels: int = 0
    stride: int = 1


@dataclass(frozen=True)
class Group:
    block: BlockSpec
    n: int


@dataclass(frozen=True)
class NetworkSpec:
    stem: tuple[StemLayer, ...]
    groups: tuple[Group, ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # (height, width, channels)
    name: str = ""

    def blocks(self) -> Iterable[BlockSpec]:
        for g in self.groups:
            spec = g.block
            for i in range(g.n):
                yield spec if i == 0 else spec.repeat()

    @property
    def is_spatial(self) -> bool:
        h, w, _ = self.input_shape
        return h * w > 1


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple[LayerNode, ...]
    input_shape: tuple[int, int, int]
    output_id: int

    def by_id(self) -> dict[int, LayerNode]:
        return {node.id: node for node in self.nodes}

    def first_trainable(self) -> LayerNode:
        for node in self.nodes:
            if node.kind in CONV_KINDS + ("dense", "classifier"):
                return node
        raise SpecError("graph has no trainable layer")


class _Ids:
    def __init__(self, start: int = 0):
        self.next = start

    def __call__(self) -> int:
        i = self.next
        self.next += 1
        return i


def _unit(ids, op, cin, cout, stride, src, tag, relu=True):
    """conv/dense -> batchnorm [-> relu]; returns the emitted nodes."""
    conv = LayerNode(ids(), op, cin, cout, stride if op != "dense" else 1, (src,), tag=tag + ".conv")
    bn = LayerNode(ids(), "batchnorm", cout, cout, 1, (conv.id,), tag=tag + ".bn")
    if not relu:
        return [conv, bn]
    return [conv, bn, LayerNode(ids(), "relu", cout, cout, 1, (bn.id,), tag=tag + ".relu")]


def _block_source(spec, src, ids, nodes):
    if src is None:
        root = LayerNode(ids(), "input", spec.in_channels_c, spec.in_channels_c)
        nodes.append(root)
        return root.id
    return src


def expand_bitblock(spec: BitBlockSpec, src: int | None = None, next_id: int = 0) -> list[LayerNode]:
    """Lower a BitBlock into layer nodes.

    Level ``k`` reads the previous level's left output and emits a left and a
    right branch of ``D / 2**k`` channels each. The block output concatenates
    the right branch of every level and the last left branch, in that order.
    With ``src=None`` an ``input`` node is emitted first so the result is a
    self-contained DAG.
    """
    problems = spec.violations()
    if problems:
        raise SpecError("; ".join(problems))
    ids = _Ids(next_id)
    nodes: list[LayerNode] = []
    x = _block_source(spec, src, ids, nodes)
    cin = spec.in_channels_c
    rights = []
    left_out = None
    for k in range(1, spec.depth_K + 1):
        width = spec.width_D // 2**k
        stride = spec.stride_s if k == 1 else 1
        left = _unit(ids, spec.op, cin, width, stride, x, f"L{k}.left")
        right = _unit(ids, spec.op, cin, width, stride, x, f"L{k}.right")
        nodes += left + right
        rights.append(right[-1].id)
        left_out = left[-1].id
        x, cin = left_out, width
    by_id = {n.id: n for n in nodes}
    parts = rights + [left_out]
    widths = [by_id[i].out_channels for i in parts]
    nodes.append(
        LayerNode(ids(), "concat_channels", sum(widths), sum(widths), 1, tuple(parts), tag="concat")
    )
    return nodes


def expand_convenblock(spec: ConvenBlockSpec, src: int | None = None, next_id: int = 0) -> list[LayerNode]:
    """Lower a conventional block: K equal-width layers, stride on the first.

    With a shortcut, the last layer's relu moves after the residual add
    (conv, bn, add, relu), as in the original residual networks.
    """
    problems = spec.violations()
    if problems:
        raise SpecError("; ".join(problems))
    ids = _Ids(next_id)
    nodes: list[LayerNode] = []
    block_in = x = _block_source(spec, src, ids, nodes)
    cin = spec.in_channels_c
    D = spec.width_D
    for k in range(1, spec.depth_K + 1):
        stride = spec.stride_s if k == 1 else 1
        last = k == spec.depth_K
        unit = _unit(ids, spec.op, cin, D, stride, x, f"L{k}", relu=not (last and spec.shortcut != "none"))
        nodes += unit
        x, cin = unit[-1].id, D
    if spec.shortcut == "none":
        return nodes
    if spec.shortcut == "projection":
        kind = "conv1x1" if spec.op == "conv3x3" else "dense"
        proj = LayerNode(ids(), kind, spec.in_channels_c, D, spec.stride_s if kind != "dense" else 1,
                         (block_in,), tag="shortcut.proj")
        nodes.append(proj)
        skip = proj.id
    else:
        skip = block_in
    add = LayerNode(ids(), "add_residual", D, D, 1, (x, skip), tag="shortcut.add")
    nodes.append(add)
    nodes.append(LayerNode(ids(), "relu", D, D, 1, (add.id,), tag="shortcut.relu"))
    return nodes


def expand_block(spec: BlockSpec, src: int | None = None, next_id: int = 0) -> list[LayerNode]:
    if isinstance(spec, BitBlockSpec):
        return expand_bitblock(spec, src, next_id)
    return expand_convenblock(spec, src, next_id)


def lower(net: NetworkSpec) -> LayerGraph:
    """Lower a network to its layer DAG: input, stem, blocks, pooling, classifier."""
    problems = validate(net)
    if problems:
        raise SpecError("; ".join(problems))
    return _lower(net)


def _lower(net: NetworkSpec) -> LayerGraph:
    ids = _Ids()
    h, w, c = net.input_shape
    nodes = [LayerNode(ids(), "input", c, c)]
    x = nodes[0].id
    for i, layer in enumerate(net.stem):
        if layer.kind == "maxpool3x3s2":
            node = LayerNode(ids(), layer.kind, c, c, 2, (x,), tag=f"stem{i}.pool")
            nodes.append(node)
        else:
            unit = _unit(ids, layer.kind, c, layer.out_channels, layer.stride, x, f"stem{i}")
            nodes += unit
            node, c = unit[-1], layer.out_channels
        x = node.id
    for g, group in enumerate(net.groups):
        spec = group.block
        for b in range(group.n):
            block = expand_block(spec if b == 0 else spec.repeat(), x, ids.next)
            block = [replace(n, tag=f"g{g}.b{b}.{n.tag}") for n in block]
            ids.next = block[-1].id + 1
            nodes += block
            x, c = block[-1].id, spec.width_D
    if any(n.kind in CONV_KINDS for n in nodes):
        gap = LayerNode(ids(), "global_avg_pool", c, c, 1, (x,), tag="gap")
        nodes.append(gap)
        x = gap.id
    head = LayerNode(ids(), "classifier", c, net.num_classes, 1, (x,), bias=True, tag="fc")
    nodes.append(head)
    return LayerGraph(tuple(nodes), tuple(net.input_shape), head.id)


def _out_hw(kind, h, w, stride):
    if kind in SPATIAL_KINDS:
        return (h - 1) // stride + 1, (w - 1) // stride + 1
    return h, w


def infer_shapes(nodes: Sequence[LayerNode], input_shape: tuple[int, int, int]) -> dict[int, tuple[int, int, int]]:
    """Propagate (channels, height, width) through the DAG.

    Raises :class:`ShapeError` on the first inconsistency. Nodes may come in
    any order; they are visited topologically.
    """
    by_id = {}
    for node in nodes:
        if node.id in by_id:
            raise ShapeError(f"duplicate node id {node.id}")
        by_id[node.id] = node
    sorter = graphlib.TopologicalSorter()
    for node in nodes:
        for i in node.inputs:
            if i not in by_id:
                raise ShapeError(f"node {node.id} reads missing node {i}")
        sorter.add(node.id, *node.inputs)
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise ShapeError(f"graph has a cycle: {exc.args[1]}") from None

    h0, w0, c0 = input_shape
    shapes: dict[int, tuple[int, int, int]] = {}
    for nid in order:
        node = by_id[nid]
        ins = [shapes[i] for i in node.inputs]
        kind = node.kind
        if kind == "input":
            if ins:
                raise ShapeError(f"input node {nid} has inputs")
            if node.out_channels != c0:
                raise ShapeError(f"input node {nid} has {node.out_channels} channels, input has {c0}")
            shapes[nid] = (c0, h0, w0)
            continue
        if not ins:
            raise ShapeError(f"node {nid} ({kind}) has no inputs")
        if kind == "concat_channels":
            spatial = {s[1:] for s in ins}
            if len(spatial) != 1:
                raise ShapeError(f"concat {nid} joins mismatched spatial sizes {sorted(spatial)}")
            total = sum(s[0] for s in ins)
            if node.out_channels != total:
                raise ShapeError(f"concat {nid} declares {node.out_channels} channels, inputs sum to {total}")
            shapes[nid] = (total,) + ins[0][1:]
            continue
        if kind == "add_residual":
            if len(ins) != 2 or ins[0] != ins[1]:
                raise ShapeError(f"residual add {nid} operand shapes differ: {ins}")
            shapes[nid] = ins[0]
            continue
        if len(ins) != 1:
            raise ShapeError(f"node {nid} ({kind}) takes one input, got {len(ins)}")
        c, h, w = ins[0]
        if node.in_channels != c:
            raise ShapeError(f"node {nid} ({kind}) expects {node.in_channels} channels, gets {c}")
        if kind in ("dense", "classifier") and (h, w) != (1, 1):
            raise ShapeError(f"dense node {nid} needs 1x1 spatial input, gets {h}x{w}")
        if kind in ("batchnorm", "relu", "maxpool3x3s2") and node.out_channels != c:
            raise ShapeError(f"node {nid} ({kind}) cannot change channel count")
        if kind == "global_avg_pool":
            shapes[nid] = (c, 1, 1)
            continue
        h, w = _out_hw(kind, h, w, node.stride)
        shapes[nid] = (node.out_channels, h, w)
    return shapes


def validate(net: NetworkSpec | LayerGraph | Sequence[LayerNode], input_shape=None) -> list[str]:
    """Collect invariant violations; an empty list means the architecture is valid.

    Accepts a :class:`NetworkSpec`, a :class:`LayerGraph`, or a bare node list
    (which then needs ``input_shape``).
    """
    if isinstance(net, LayerGraph):
        return _graph_violations(net.nodes, net.input_shape)
    if not isinstance(net, NetworkSpec):
        return _graph_violations(net, input_shape)

    out = []
    h, w, c = net.input_shape
    if min(h, w, c) <= 0:
        out.append(f"input shape must be positive, got {net.input_shape}")
    if not isinstance(net.num_classes, int) or net.num_classes <= 0:
        out.append(f"class count must be positive, got {net.num_classes!r}")
    for i, layer in enumerate(net.stem):
        if layer.kind == "maxpool3x3s2":
            continue
        if layer.kind not in CONV_KINDS + ("dense",):
            out.append(f"stem layer {i}: unsupported kind {layer.kind!r}")
            continue
        if layer.out_channels <= 0 or layer.stride <= 0:
            out.append(f"stem layer {i}: channels and stride must be positive")
            continue
        c = layer.out_channels
    for g, group in enumerate(net.groups):
        if not isinstance(group.n, int) or group.n <= 0:
            out.append(f"group {g}: block count must be positive, got {group.n!r}")
        spec = group.block
        out += [f"group {g}: {p}" for p in spec.violations()]
        if spec.in_channels_c != c:
            out.append(f"group {g}: block input channels {spec.in_channels_c} != previous width {c}")
        c = spec.width_D
    if out:
        return out
    return _graph_violations(_lower(net).nodes, net.input_shape)


def _graph_violations(nodes, input_shape) -> list[str]:
    if input_shape is None:
        return ["input_shape is required to validate a bare node list"]
    try:
        infer_shapes(nodes, input_shape)
    except ShapeError as exc:
        return [str(exc)]
    return []


def depth(net: NetworkSpec) -> int:
    """Weighted-layer depth: stem convs + blocks x block depth + classifier.

    Pooling, batchnorm, relu, concat and shortcut projections are not counted.
    """
    stem = sum(1 for layer in net.stem if layer.kind != "maxpool3x3s2")
    return stem + sum(g.n * g.block.depth_K for g in net.groups) + 1


def group_output_shapes(net: NetworkSpec) -> list[tuple[int, int, int]]:
    """(C, H, W) after the stem conv, after the stem, and after each group."""
    graph = lower(net)
    shapes = infer_shapes(graph.nodes, graph.input_shape)
    marks = []
    stem_nodes = [n for n in graph.nodes if n.tag.startswith("stem")]
    first_relu = next(n for n in stem_nodes if n.kind == "relu")
    marks.append(shapes[first_relu.id])
    marks.append(shapes[stem_nodes[-1].id])
    for g in range(len(net.groups)):
        last = [n for n in graph.nodes if n.tag.startswith(f"g{g}.")][-1]
        marks.append(shapes[last.id])
    return marks


# -- builders ---------------------------------------------------------------

BLOCK_KINDS = ("bit", "conven", "plain")


def _make_block(kind, width, k, stride, cin, op="conv3x3"):
    if kind == "bit":
        return BitBlockSpec(width, k, stride, cin, op)
    if kind == "conven":
        shortcut = "projection" if (cin != width or stride > 1) else "identity"
        return ConvenBlockSpec(width, k, stride, cin, shortcut, op)
    if kind == "plain":
        return ConvenBlockSpec(width, k, stride, cin, "none", op)
    raise SpecError(f"block kind must be one of {BLOCK_KINDS}, got {kind!r}")


def _check_dkn(d, k, n, block_kind, base):
    for name, v in (("d", d), ("k", k), ("n", n)):
        if not isinstance(v, int) or v <= 0:
            raise SpecError(f"{name} must be a positive integer, got {v!r}")
    if block_kind == "bit" and (d * base) % (2**k):
        raise SpecError(f"block width {d * base} not divisible by 2^{k}")


def build_cifar_net(d: int, k: int, n: int, block_kind: str = "bit", num_classes: int = 10) -> NetworkSpec:
    """Three-group CIFAR network: widths 16d, 32d, 64d with n blocks each.

    ``conven`` builds the residual baseline (identity shortcuts, 1x1
    projections where the shape changes); ``plain`` drops the shortcuts.
    """
    _check_dkn(d, k, n, block_kind, 16)
    groups = []
    cin = 16
    for width, stride in ((16 * d, 1), (32 * d, 2), (64 * d, 2)):
        groups.append(Group(_make_block(block_kind, width, k, stride, cin), n))
        cin = width
    return NetworkSpec(
        stem=(StemLayer("conv3x3", 16, 1),),
        groups=tuple(groups),
        num_classes=num_classes,
        input_shape=(32, 32, 3),
        name=f"cifar-{block_kind}(d={d},k={k},n={n})",
    )


def build_fc_net(d: int, k: int, n: int, block_kind: str = "bit", in_features: int = 2,
                 num_classes: int = 2, base_width: int = 16) -> NetworkSpec:
    """Fully connected analog of :func:`build_cifar_net` for low-dimensional data.

    Same topology and depth with dense layers in place of 3x3 convolutions;
    group widths are ``base_width * d * (1, 2, 4)``.
    """
    _check_dkn(d, k, n, block_kind, base_width)
    groups = []
    cin = base_width
    for mult in (1, 2, 4):
        width = base_width * d * mult
        groups.append(Group(_make_block(block_kind, width, k, 1, cin, "dense"), n))
        cin = width
    return NetworkSpec(
        stem=(StemLayer("dense", base_width),),
        groups=tuple(groups),
        num_classes=num_classes,
        input_shape=(1, 1, in_features),
        name=f"fc-{block_kind}(d={d},k={k},n={n})",
    )


def _imagenet(name, layout):
    groups = []
    cin = 64
    for stage, blocks in enumerate(layout):
        for i, (width, k, n) in enumerate(blocks):
            stride = 2 if stage > 0 and i == 0 else 1
            groups.append(Group(BitBlockSpec(width, k, stride, cin), n))
            cin = width
    return NetworkSpec(
        stem=(StemLayer("conv7x7", 64, 2), StemLayer("maxpool3x3s2")),
        groups=tuple(groups),
        num_classes=1000,
        input_shape=(224, 224, 3),
        name=name,
    )


def build_bitnet26() -> NetworkSpec:
    return _imagenet("bitnet26", [
        [(128, 3, 2)],
        [(192, 3, 1), (256, 3, 1)],
        [(384, 3, 2)],
        [(512, 3, 1), (768, 3, 1)],
    ])


def build_bitnet34() -> NetworkSpec:
    return _imagenet("bitnet34", [
        [(256, 4, 2)],
        [(384, 4, 2)],
        [(512, 4, 2)],
        [(768, 4, 2)],
    ])


# -- JSON -------------------------------------------------------------------

def to_dict(net: NetworkSpec) -> dict:
    groups = []
    for g in net.groups:
        b = g.block
        entry = {
            "kind": b.kind,
            "width": b.width_D,
            "depth": b.depth_K,
            "stride": b.stride_s,
            "in_channels": b.in_channels_c,
            "op": b.op,
            "n": g.n,
        }
        if isinstance(b, ConvenBlockSpec):
            entry["shortcut"] = b.shortcut
        groups.append(entry)
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "stem": [{"kind": s.kind, "out_channels": s.out_channels, "stride": s.stride} for s in net.stem],
        "groups": groups,
    }


def from_dict(doc: dict) -> NetworkSpec:
    try:
        groups = []
        for entry in doc["groups"]:
            args = (entry["width"], entry["depth"], entry.get("stride", 1), entry["in_channels"])
            op = entry.get("op", "conv3x3")
            if entry["kind"] == "bit":
                block = BitBlockSpec(*args, op=op)
            elif entry["kind"] == "conven":
                block = ConvenBlockSpec(*args, shortcut=entry.get("shortcut", "none"), op=op)
            else:
                raise SpecError(f"unknown block kind {entry['kind']!r}")
            groups.append(Group(block, entry["n"]))
        stem = tuple(StemLayer(s["kind"], s.get("out_channels", 0), s.get("stride", 1)) for s in doc["stem"])
        return NetworkSpec(
            stem=stem,
            groups=tuple(groups),
            num_classes=doc["num_classes"],
            input_shape=tuple(doc["input_shape"]),
            name=doc.get("name", ""),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed network document: {exc!r}") from None


def to_json(net: NetworkSpec, **kwargs) -> str:
    return json.dumps(to_dict(net), **kwargs)


def from_json(text: str) -> NetworkSpec:
    return from_dict(json.loads(text))
